//! Seeded random streams.
//!
//! All randomness goes through [`Rng`], a ChaCha8 generator. ChaCha output is
//! defined by its seed and stream number alone, so draws are identical across
//! runs and platforms.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent stream derived from the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw from `[low, high)`.
    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.uniform(-bound, bound)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Inverted-dropout mask: each entry is `0` with probability `rate`,
    /// otherwise `1 / (1 - rate)`.
    pub fn dropout_mask(&mut self, len: usize, rate: f64) -> Tensor {
        let keep = 1.0 / (1.0 - rate);
        let data = (0..len)
            .map(|_| if self.inner.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        Tensor::from_parts(vec![len], data)
    }
}
