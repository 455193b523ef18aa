//! Per-sample feature normalization with per-channel affine parameters.
//!
//! Statistics (one mean, one variance) are computed over the entire C×H×W
//! tensor of a single sample, never across a batch, so each sample's forward
//! pass is independent of batch composition — a prerequisite for
//! deterministic chunked training. Normalizing all channels jointly (rather
//! than each channel to its own unit variance) preserves *relative* channel
//! magnitudes, so a strongly-firing channel still stands out after
//! normalization; the per-channel affine restores individual scaling freedom.

use ndarray::{Array1, Array3, ArrayViewD, ArrayViewMutD, Axis};

#[derive(Debug, Clone)]
pub struct LayerNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

#[derive(Debug)]
pub struct LayerNorm2dCache {
    xhat: Array3<f64>,
    inv_std: f64,
}

impl LayerNorm2d {
    pub fn new(channels: usize) -> Self {
        LayerNorm2d { gamma: Array1::ones(channels), beta: Array1::zeros(channels), eps: 1e-5 }
    }

    pub fn zeros_like(&self) -> LayerNorm2d {
        LayerNorm2d {
            gamma: Array1::zeros(self.gamma.len()),
            beta: Array1::zeros(self.beta.len()),
            eps: self.eps,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: &Array3<f64>) -> (Array3<f64>, LayerNorm2dCache) {
        let (c, h, w) = x.dim();
        let n = (c * h * w) as f64;
        let mean = x.sum() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + self.eps).sqrt();
        let mut xhat = Array3::zeros((c, h, w));
        let mut y = Array3::zeros((c, h, w));
        for ch in 0..c {
            let plane = x.index_axis(Axis(0), ch);
            let (g, b) = (self.gamma[ch], self.beta[ch]);
            let mut xhat_plane = xhat.index_axis_mut(Axis(0), ch);
            let mut y_plane = y.index_axis_mut(Axis(0), ch);
            for i in 0..h {
                for j in 0..w {
                    let xh = (plane[[i, j]] - mean) * inv_std;
                    xhat_plane[[i, j]] = xh;
                    y_plane[[i, j]] = g * xh + b;
                }
            }
        }
        (y, LayerNorm2dCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNorm2dCache,
        dy: &Array3<f64>,
    ) -> (Array3<f64>, LayerNorm2d) {
        let (c, h, w) = dy.dim();
        let n = (c * h * w) as f64;
        let mut grads = self.zeros_like();

        // dxhat = dy * gamma (per channel); statistics couple all elements.
        let mut dxhat = Array3::zeros((c, h, w));
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for ch in 0..c {
            let dy_p = dy.index_axis(Axis(0), ch);
            let xhat_p = cache.xhat.index_axis(Axis(0), ch);
            let g = self.gamma[ch];
            let mut dxhat_p = dxhat.index_axis_mut(Axis(0), ch);
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let d = dy_p[[i, j]];
                    let xh = xhat_p[[i, j]];
                    sum_dy += d;
                    sum_dy_xhat += d * xh;
                    let dxh = d * g;
                    dxhat_p[[i, j]] = dxh;
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xh;
                }
            }
            grads.beta[ch] = sum_dy;
            grads.gamma[ch] = sum_dy_xhat;
        }

        let mut dx = Array3::zeros((c, h, w));
        let k = cache.inv_std / n;
        for ch in 0..c {
            let dxhat_p = dxhat.index_axis(Axis(0), ch);
            let xhat_p = cache.xhat.index_axis(Axis(0), ch);
            let mut dx_p = dx.index_axis_mut(Axis(0), ch);
            for i in 0..h {
                for j in 0..w {
                    dx_p[[i, j]] =
                        k * (n * dxhat_p[[i, j]] - sum_dxhat - xhat_p[[i, j]] * sum_dxhat_xhat);
                }
            }
        }
        (dx, grads)
    }

    pub fn accumulate(&mut self, other: &LayerNorm2d) {
        self.gamma += &other.gamma;
        self.beta += &other.beta;
    }

    pub fn scale(&mut self, c: f64) {
        self.gamma *= c;
        self.beta *= c;
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&format!("{prefix}.gamma"), self.gamma.view().into_dyn());
        f(&format!("{prefix}.beta"), self.beta.view().into_dyn());
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&format!("{prefix}.gamma"), self.gamma.view_mut().into_dyn());
        f(&format!("{prefix}.beta"), self.beta.view_mut().into_dyn());
    }
}
