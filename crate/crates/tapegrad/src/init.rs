//! Parameter initializers. All sampling happens in f64 before casting so a
//! given seed produces the same values for f32 and f64 models.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::Element;

pub fn zeros<F: Element>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<F: Element>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(shape), F::one())
}

pub fn full<F: Element>(shape: &[usize], value: f64) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(shape), F::from_f64(value))
}

pub fn uniform<F: Element>(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| F::from_f64(rng.gen_range(lo..hi))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn normal<F: Element>(rng: &mut impl Rng, shape: &[usize], mean: f64, std: f64) -> ArrayD<F> {
    let dist = Normal::new(mean, std).expect("invalid normal parameters");
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| F::from_f64(dist.sample(rng))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Glorot/Xavier uniform: U(+-sqrt(6 / (fan_in + fan_out))).
pub fn xavier_uniform<F: Element>(
    rng: &mut impl Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> ArrayD<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, shape, -bound, bound)
}
