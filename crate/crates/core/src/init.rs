use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Glorot-uniform weights for a `fan_in × fan_out` matrix.
pub(crate) fn xavier<S: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| S::lit(rng.random_range(-a..a)))
}

pub(crate) fn normal<S: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| S::lit(dist.sample(rng)))
}
