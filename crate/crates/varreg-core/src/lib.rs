//! Variable-splitting deformable image registration.
//!
//! The crate implements a generic variational registration model solved by
//! variable splitting: the intensity (data) subproblem has point-wise
//! closed-form solutions for L1 and L2 data terms, while the auxiliary
//! subproblem is a denoising step with pluggable denoisers. The same
//! building blocks are exposed twice:
//!
//! - [`solver::register`] runs the classical iterative scheme with nested
//!   warp/iteration loops over a coarse-to-fine pyramid, and
//! - [`unroll`] unrolls a fixed number of cascades into a trainable network
//!   with learnable penalty weights and convolutional denoisers, with exact
//!   reverse-mode gradients through every layer.
//!
//! The core is `no_std` + `alloc`; all IO, file formats, and the CLI live in
//! the companion `varreg` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod conv;
pub mod denoise;
mod error;
pub mod grid;
pub mod icl;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod solver;
pub mod synth;
pub mod unroll;

pub use error::Error;

pub type Result<T> = core::result::Result<T, Error>;
