//! Seeded random sources shared by initialisation, data synthesis and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Real, Shape4, Tensor4};

/// Portable, reproducible RNG (ChaCha8).
pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Derives an independent stream for a labelled sub-task.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.random_range(lo..hi)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn uniform_tensor<T: Real>(rng: &mut SeededRng, shape: Shape4, lo: f64, hi: f64) -> Tensor4<T> {
    Tensor4::from_fn(shape, |_, _, _, _| T::from_f64(rng.uniform(lo, hi)))
}

pub fn normal_tensor<T: Real>(rng: &mut SeededRng, shape: Shape4, std: f64) -> Tensor4<T> {
    Tensor4::from_fn(shape, |_, _, _, _| T::from_f64(std * rng.normal()))
}
