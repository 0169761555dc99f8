use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Seeded generator for parameter and input initialisation.
///
/// Backed by ChaCha8, a counter-based stream cipher, so a seed fixes every
/// drawn value regardless of platform or thread count. Draw order is the
/// construction order of the parameters.
pub struct ParamRng {
    inner: ChaCha8Rng,
}

impl ParamRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Zero-mean normal tensor; values are drawn in f64 then converted.
    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| T::of(dist.sample(&mut self.inner)))
    }

    /// Uniform tensor on [lo, hi).
    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let dist = rand_distr::Uniform::new(lo, hi);
        Tensor::from_fn(shape, |_| T::of(dist.sample(&mut self.inner)))
    }

    /// He-style init: std = fan_in^(-1/2).
    pub fn fan_in<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.normal(shape, (fan_in as f64).powf(-0.5))
    }
}
