//! Compression of a toy CLIP-style dual encoder through learnable
//! Kronecker-factorized width maps and a learnable depth-mixing matrix,
//! with diagonal-inheritance initialization and a two-stage
//! mapping/retraining pipeline driven by logit distillation.
//!
//! The crate is `no_std` + `alloc`: everything here is pure computation.
//! File formats, checkpoints, and the command-line surface live in the
//! companion `clipmap` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod compress;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
