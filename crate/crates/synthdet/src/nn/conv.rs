//! 2-D convolution over single `[C, H, W]` samples via im2col + matmul.

use ndarray::{Array1, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Convolution layer. Weight layout `[out_ch, in_ch, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
}

/// Forward activations a backward pass needs: the unfolded input columns
/// plus the input dimensions for the scatter-add back to image layout.
#[derive(Debug)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize),
}

impl Conv2d {
    /// He-normal initialization: std = sqrt(2 / fan_in), biases zero.
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let weight = Array4::from_shape_fn((out_ch, in_ch, k, k), |_| dist.sample(rng));
        Conv2d { weight, bias: Array1::zeros(out_ch), stride, padding }
    }

    pub fn zeros_like(&self) -> Conv2d {
        Conv2d {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn out_hw(&self, in_hw: (usize, usize)) -> (usize, usize) {
        let k = self.weight.dim().2;
        let oh = (in_hw.0 + 2 * self.padding - k) / self.stride + 1;
        let ow = (in_hw.1 + 2 * self.padding - k) / self.stride + 1;
        (oh, ow)
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (in_ch, h, w) = x.dim();
        let k = self.weight.dim().2;
        let (oh, ow) = self.out_hw((h, w));
        let mut cols = Array2::zeros((in_ch * k * k, oh * ow));
        for c in 0..in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let mut row_view = cols.row_mut(row);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            row_view[oy * ow + ox] = x[[c, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    fn apply(&self, cols: &Array2<f64>, oh: usize, ow: usize) -> Array3<f64> {
        let (out_ch, in_ch, k, _) = self.weight.dim();
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((out_ch, in_ch * k * k))
            .expect("contiguous weight");
        let mut y_mat = w_mat.dot(cols);
        for (mut row, &b) in y_mat.rows_mut().into_iter().zip(self.bias.iter()) {
            row += b;
        }
        y_mat.into_shape_with_order((out_ch, oh, ow)).expect("conv output shape")
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_hw((h, w));
        self.apply(&self.im2col(x), oh, ow)
    }

    pub fn forward_train(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_hw((h, w));
        let cols = self.im2col(x);
        let y = self.apply(&cols, oh, ow);
        (y, ConvCache { cols, in_dim: x.dim() })
    }

    /// Returns the input gradient and parameter gradients.
    pub fn backward(&self, cache: &ConvCache, dy: &Array3<f64>) -> (Array3<f64>, Conv2d) {
        let (out_ch, in_ch, k, _) = self.weight.dim();
        let (_, oh, ow) = dy.dim();
        let dy_mat = dy
            .view()
            .into_shape_with_order((out_ch, oh * ow))
            .expect("contiguous output gradient");

        let dw_mat = dy_mat.dot(&cache.cols.t());
        let dweight = dw_mat
            .into_shape_with_order((out_ch, in_ch, k, k))
            .expect("weight gradient shape");
        let dbias = dy_mat.sum_axis(Axis(1));

        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((out_ch, in_ch * k * k))
            .expect("contiguous weight");
        let dcols = w_mat.t().dot(&dy_mat);

        // col2im: scatter-add each column tap back to its source pixel.
        let (_, h, w) = cache.in_dim;
        let mut dx = Array3::zeros(cache.in_dim);
        for c in 0..in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let row_view = dcols.row(row);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[[c, iy as usize, ix as usize]] += row_view[oy * ow + ox];
                        }
                    }
                }
            }
        }

        let mut grads = self.zeros_like();
        grads.weight = dweight;
        grads.bias = dbias;
        (dx, grads)
    }

    pub fn accumulate(&mut self, other: &Conv2d) {
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
