//! Error type of the IO layer and its mapping onto process exit codes.

use std::path::PathBuf;
use thiserror::Error;

/// Process exit codes of the CLI contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    Usage = 1,
    Data = 2,
    Numerical = 3,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {msg}")]
    Data { path: PathBuf, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] varreg_core::Error),
}

impl CliError {
    pub fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        CliError::Data { path: path.into(), msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::Usage,
            CliError::Data { .. } | CliError::Io { .. } => ExitCode::Data,
            CliError::Numerical(_) => ExitCode::Numerical,
            CliError::Core(e) => match e {
                varreg_core::Error::NonFinite(_) => ExitCode::Numerical,
                varreg_core::Error::InvalidConfig(_) => ExitCode::Usage,
                _ => ExitCode::Data,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
