//! Seeded weight initialization.

use crate::rng::Rng;
use ndarray::{ArrayD, IxDyn};
use rand::Rng as _;

/// Kaiming-uniform fill: U(-bound, bound) with bound = sqrt(6 / fan_in).
pub fn kaiming_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut arr = ArrayD::zeros(IxDyn(shape));
    for x in arr.iter_mut() {
        *x = rng.gen_range(-bound..bound) as f32;
    }
    arr
}

/// Uniform fill scaled by an explicit bound.
pub fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> ArrayD<f32> {
    let mut arr = ArrayD::zeros(IxDyn(shape));
    for x in arr.iter_mut() {
        *x = rng.gen_range(-bound..bound) as f32;
    }
    arr
}

pub fn zeros(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}
