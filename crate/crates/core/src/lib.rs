//! Dual multi-scale attention: the DMSA block, DMSA-50/101 network builders with
//! exact parameter/FLOP accounting, finite-difference gradient verification,
//! and a toy SGD trainer, all on a minimal dependency-light NCHW tensor
//! library.

pub mod attention;
pub mod backward;
pub mod cost;
pub mod dataset;
pub mod dmsa;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod network;
pub mod ops;
pub mod par;
pub mod scalar;
pub mod serialize;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use scalar::{Dtype, Element};
pub use tensor::{Axis, Shape, Tensor};

/// Epsilon used by every normalization layer in the crate.
pub const NORM_EPS: f64 = 1e-5;
