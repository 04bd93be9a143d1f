use rand::Rng;

use crate::tensor::{Real, Tensor};

/// Uniform(−1/√fan_in, 1/√fan_in) initialisation.
pub fn uniform_fan_in<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    shape: Vec<usize>,
    fan_in: usize,
) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    uniform(rng, shape, bound)
}

pub fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape, data).expect("init shape")
}
