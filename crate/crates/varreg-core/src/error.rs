use alloc::string::String;
use thiserror::Error;

/// Errors produced by the registration core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty mask for label {0}")]
    EmptyMask(i64),
    #[error("deformation sampling exhausted its rejection budget")]
    RejectionBudget,
    #[error("empty dataset")]
    EmptyDataset,
}
