//! Shared helpers for the unit tests.

use crate::init::{normal_tensor, seeded_rng};
use crate::scalar::Element;
use crate::tensor::Tensor;

/// Loose bound for f32 kernels checked against f64 oracles.
pub(crate) const ABS_TOL_F32: f64 = 1e-5;
/// Bound for f64 kernels checked against f64 oracles.
pub(crate) const ABS_TOL_F64: f64 = 1e-12;

pub(crate) fn seeded_tensor<T: Element>(dims: &[usize], seed: u64) -> Tensor<T> {
    normal_tensor(dims, 0.0, 1.0, &mut seeded_rng(seed))
}
