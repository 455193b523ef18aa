//! Adam optimizer driven by the parameter visitor, so it works for any
//! component whose gradients are exposed through the same visit order.

use ndarray::ArrayD;

use super::Params;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Adam {
        Adam { beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// The conventional defaults: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn standard() -> Adam {
        Adam::new(0.9, 0.999, 1e-8)
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. `grads` must visit the same tensors in the same order as
    /// `params`; moment buffers are allocated on first use.
    pub fn step<P: Params, G: Params>(
        &mut self,
        params: &mut P,
        grads: &G,
        lr: f64,
    ) -> Result<()> {
        let mut g: Vec<(String, ArrayD<f64>)> = Vec::new();
        grads.visit_params(&mut |name, t| g.push((name.to_string(), t.to_owned())));

        if self.m.is_empty() {
            self.m = g.iter().map(|(_, t)| ArrayD::zeros(t.raw_dim())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != g.len() {
            return Err(Error::Shape {
                expected: format!("{} gradient tensors", self.m.len()),
                actual: format!("{}", g.len()),
            });
        }

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);

        let mut idx = 0usize;
        let mut status = Ok(());
        params.visit_params_mut(&mut |name, mut p| {
            if status.is_err() {
                return;
            }
            if idx >= g.len() || g[idx].1.raw_dim() != p.raw_dim() || g[idx].0 != name {
                status = Err(Error::Shape {
                    expected: format!("gradient for parameter {name}"),
                    actual: g
                        .get(idx)
                        .map(|(n, t)| format!("{n} with shape {:?}", t.shape()))
                        .unwrap_or_else(|| "nothing".into()),
                });
                return;
            }
            let grad = &g[idx].1;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(&mut p).and(grad).and(m).and(v).for_each(
                |p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + self.eps);
                },
            );
            idx += 1;
        });
        status?;
        if idx != g.len() {
            return Err(Error::Shape {
                expected: format!("{} parameter tensors", g.len()),
                actual: format!("{idx}"),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, ArrayViewD, ArrayViewMutD};

    struct Vec1(Array1<f64>);
    impl Params for Vec1 {
        fn visit_params(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
            f("v", self.0.view().into_dyn());
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
            f("v", self.0.view_mut().into_dyn());
        }
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // With bias correction, the first Adam update has magnitude ~lr
        // regardless of gradient scale.
        let mut p = Vec1(Array1::from_elem(1, 1.0));
        let g = Vec1(Array1::from_elem(1, 0.37));
        let mut adam = Adam::standard();
        adam.step(&mut p, &g, 0.01).unwrap();
        assert!((p.0[0] - (1.0 - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        // f(x) = 0.5 * sum((x - t)^2), grad = x - t.
        let target = Array1::from_vec(vec![0.3, -1.2, 2.0]);
        let mut p = Vec1(Array1::zeros(3));
        let mut adam = Adam::standard();
        for _ in 0..2000 {
            let grad = Vec1(&p.0 - &target);
            adam.step(&mut p, &grad, 0.05).unwrap();
        }
        for (a, b) in p.0.iter().zip(target.iter()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
        assert_eq!(adam.steps_taken(), 2000);
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let mut p = Vec1(Array1::zeros(3));
        let g = Vec1(Array1::zeros(4));
        let mut adam = Adam::standard();
        // First step fixes the expected shape from the gradients; the
        // parameter walk must then notice the mismatch.
        assert!(adam.step(&mut p, &g, 0.1).is_err());
    }
}
