use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Scalar, Tensor};

/// Normal(0, std) truncated to two standard deviations by resampling.
pub fn trunc_normal<F: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break F::from_f64(z * std);
            }
        })
        .collect();
    param(data, shape)
}

/// He-normal initialization for ReLU layers with the given fan-in.
pub fn he_normal<F: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::from_f64(z * std)
        })
        .collect();
    param(data, shape)
}

pub fn zeros<F: Scalar>(shape: &[usize]) -> Tensor<F> {
    Tensor::zeros(shape).requires_grad_(true)
}

pub fn ones<F: Scalar>(shape: &[usize]) -> Tensor<F> {
    Tensor::ones(shape).requires_grad_(true)
}

fn param<F: Scalar>(data: Vec<F>, shape: &[usize]) -> Tensor<F> {
    Tensor::from_vec(data, shape)
        .expect("shape matches data")
        .requires_grad_(true)
}
