//! Minimal f64 neural-network engine: layers with explicit forward/backward
//! passes, a parameter visitor for optimizers and checkpoints, and Adam.
//!
//! Gradients are returned as a second instance of the layer's own type
//! (same tensors, same visit order), so gradient containers always line up
//! with parameters without a separate registry.

pub mod adam;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;

pub use adam::Adam;
pub use conv::{Conv2d, ConvCache};
pub use linear::{Linear, LinearCache};
pub use norm::{LayerNorm2d, LayerNorm2dCache};
pub use pool::{MaxPool2d, MaxPoolCache};

use ndarray::{Array, ArrayViewD, ArrayViewMutD, Dimension};

/// Read/write access to every learnable tensor of a component in one fixed,
/// documented order. Optimizer state, gradient flattening, and checkpoint
/// layout all rely on this order being stable.
pub trait Params {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>));
}

/// Total number of scalar parameters.
pub fn param_count(p: &impl Params) -> usize {
    let mut n = 0;
    p.visit_params(&mut |_, t| n += t.len());
    n
}

/// Snapshots all parameters as owned `(name, tensor)` pairs in visit order.
pub fn named_params(p: &impl Params) -> Vec<(String, ndarray::ArrayD<f64>)> {
    let mut out = Vec::new();
    p.visit_params(&mut |name, t| out.push((name.to_string(), t.to_owned())));
    out
}

pub fn relu<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Backward of ReLU given the forward *output* `y`: passes gradient where
/// the unit was active.
pub fn relu_backward<D: Dimension>(y: &Array<f64, D>, dy: &Array<f64, D>) -> Array<f64, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn relu_masks_gradient_by_output_sign() {
        let x = arr1(&[-1.0, 0.0, 2.5]);
        let y = relu(&x);
        assert_eq!(y, arr1(&[0.0, 0.0, 2.5]));
        let dy = arr1(&[1.0, 1.0, 1.0]);
        let dx = relu_backward(&y, &dy);
        assert_eq!(dx, arr1(&[0.0, 0.0, 1.0]));
    }

    #[test]
    fn sigmoid_is_stable_and_symmetric() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!((sigmoid(40.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0) > 0.0 || sigmoid(-800.0) == 0.0);
        assert!(sigmoid(-800.0).is_finite());
        let z = 1.7;
        assert!((sigmoid(z) + sigmoid(-z) - 1.0).abs() < 1e-15);
    }
}
