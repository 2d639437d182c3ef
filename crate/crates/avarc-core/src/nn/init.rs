//! Seeded parameter initialization.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rng::SeedRng;

pub fn normal_mat(rng: &mut SeedRng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

pub fn zeros_vec(n: usize) -> Array1<f64> {
    Array1::zeros(n)
}

/// He initialization scale for a layer with the given fan-in.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Uniform in [lo, hi), seeded.
pub fn uniform(rng: &mut SeedRng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}
