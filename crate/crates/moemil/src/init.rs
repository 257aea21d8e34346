//! Parameter initialization helpers.
//!
//! Everything is sampled in f64 and cast, so a given seed produces the
//! same parameter values whether the model is built in f32 or f64.

use crate::tensor::{Scalar, Tensor};
use rand::Rng;

/// Uniform on (-bound, bound).
pub(crate) fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("consistent shape")
}

/// Uniform fan-in init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub(crate) fn fan_in_uniform<T: Scalar, R: Rng>(
    rng: &mut R,
    shape: Vec<usize>,
    fan_in: usize,
) -> Tensor<T> {
    uniform(rng, shape, 1.0 / (fan_in as f64).sqrt())
}
