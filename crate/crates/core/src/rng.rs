//! Seedable counter-based random streams.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` under `seed`; streams never overlap.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A child seed for component `k`, independent of every other `k`.
pub fn derive(seed: u64, k: u64) -> u64 {
    stream(seed, k).next_u64()
}

pub fn normal<T: Scalar>(rng: &mut Rng) -> T {
    T::lit(rng.sample::<f64, _>(StandardNormal))
}

pub fn normal_tensor<T: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

pub fn uniform<T: Scalar>(rng: &mut Rng, lo: f64, hi: f64) -> T {
    T::lit(rng.random_range(lo..hi))
}

/// Uniform integer in `lo..=hi`.
pub fn index(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

pub fn unit(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}
