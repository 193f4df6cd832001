//! Random parameter initialisation. Values are drawn in `f64` and cast, so a
//! given seed produces the same parameters at either precision (up to rounding).

use rand::Rng;

use crate::numcore::{Scalar, Tensor};

/// Entries drawn uniformly from `[-bound, bound)`.
pub fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

/// Uniform with bound `1 / sqrt(fan_in)`.
pub fn fan_in_uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    uniform(rng, shape, 1.0 / (fan_in.max(1) as f64).sqrt())
}
