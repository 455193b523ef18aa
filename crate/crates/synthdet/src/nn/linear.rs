//! Fully connected layer over vectors.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[out, in]`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug)]
pub struct LinearCache {
    x: Array1<f64>,
}

/// Xavier-uniform matrix: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Array2<f64> {
    let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
    Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen::<f64>() * 2.0 * a - a)
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Linear { weight: xavier_uniform(out_dim, in_dim, rng), bias: Array1::zeros(out_dim) }
    }

    pub fn zeros_like(&self) -> Linear {
        Linear {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    pub fn forward_train(&self, x: &Array1<f64>) -> (Array1<f64>, LinearCache) {
        (self.forward(x), LinearCache { x: x.clone() })
    }

    pub fn backward(&self, cache: &LinearCache, dy: &Array1<f64>) -> (Array1<f64>, Linear) {
        let dx = self.weight.t().dot(dy);
        let mut grads = self.zeros_like();
        for (o, &d) in dy.iter().enumerate() {
            for (i, &xi) in cache.x.iter().enumerate() {
                grads.weight[[o, i]] = d * xi;
            }
            grads.bias[o] = d;
        }
        (dx, grads)
    }

    pub fn accumulate(&mut self, other: &Linear) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }

    pub fn scale(&mut self, c: f64) {
        self.weight *= c;
        self.bias *= c;
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&format!("{prefix}.weight"), self.weight.view().into_dyn());
        f(&format!("{prefix}.bias"), self.bias.view().into_dyn());
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&format!("{prefix}.weight"), self.weight.view_mut().into_dyn());
        f(&format!("{prefix}.bias"), self.bias.view_mut().into_dyn());
    }
}
