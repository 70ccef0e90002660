//! Seeded parameter initialization. All randomness in the crate flows
//! through a ChaCha stream so identical seeds give bit-identical tensors;
//! values are always drawn at f64 and then narrowed, keeping f32/f64 builds
//! of the same seed aligned.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Element;
use crate::tensor::Tensor;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor<T: Element>(
    dims: &[usize],
    mean: f64,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let dist = Normal::new(mean, std).expect("normal distribution parameters must be finite");
    Tensor::from_fn(dims, |_| T::from_f64(dist.sample(rng)))
}

/// Kaiming-normal initialization for layers followed by a rectifier:
/// N(0, sqrt(2 / fan_in)).
pub fn kaiming_normal<T: Element>(
    dims: &[usize],
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    normal_tensor(dims, 0.0, (2.0 / fan_in as f64).sqrt(), rng)
}
