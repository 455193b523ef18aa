//! Max pooling over single `[C, H, W]` samples.

use ndarray::Array3;

#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub size: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Flat spatial index of the winning tap for each output cell, per channel.
#[derive(Debug)]
pub struct MaxPoolCache {
    argmax: Array3<usize>,
    in_dim: (usize, usize, usize),
}

impl MaxPool2d {
    pub fn new(size: usize, stride: usize, padding: usize) -> Self {
        MaxPool2d { size, stride, padding }
    }

    pub fn out_hw(&self, in_hw: (usize, usize)) -> (usize, usize) {
        let oh = (in_hw.0 + 2 * self.padding - self.size) / self.stride + 1;
        let ow = (in_hw.1 + 2 * self.padding - self.size) / self.stride + 1;
        (oh, ow)
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: &Array3<f64>) -> (Array3<f64>, MaxPoolCache) {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.out_hw((h, w));
        let mut y = Array3::zeros((c, oh, ow));
        let mut argmax = Array3::zeros((c, oh, ow));
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..self.size {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.size {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = x[[ch, iy as usize, ix as usize]];
                            if v > best {
                                best = v;
                                best_idx = iy as usize * w + ix as usize;
                            }
                        }
                    }
                    y[[ch, oy, ox]] = best;
                    argmax[[ch, oy, ox]] = best_idx;
                }
            }
        }
        (y, MaxPoolCache { argmax, in_dim: (c, h, w) })
    }

    pub fn backward(&self, cache: &MaxPoolCache, dy: &Array3<f64>) -> Array3<f64> {
        let (c, _, w) = cache.in_dim;
        let (_, oh, ow) = dy.dim();
        let mut dx = Array3::zeros(cache.in_dim);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let flat = cache.argmax[[ch, oy, ox]];
                    dx[[ch, flat / w, flat % w]] += dy[[ch, oy, ox]];
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_diff, rel_err};
    use crate::rng::{derive_rng, tag};
    use rand::Rng;

    #[test]
    fn picks_window_maxima() {
        let mut x = Array3::zeros((1, 4, 4));
        for i in 0..4 {
            for j in 0..4 {
                x[[0, i, j]] = (i * 4 + j) as f64;
            }
        }
        let pool = MaxPool2d::new(2, 2, 0);
        let y = pool.forward(&x);
        assert_eq!(y.dim(), (1, 2, 2));
        assert_eq!(y[[0, 0, 0]], 5.0);
        assert_eq!(y[[0, 1, 1]], 15.0);
    }

    #[test]
    fn padded_pooling_matches_reference_shape() {
        let mut rng = derive_rng(6, &[tag("pool-test")]);
        let x = Array3::from_shape_fn((2, 7, 7), |_| rng.gen::<f64>());
        let pool = MaxPool2d::new(3, 2, 1);
        let y = pool.forward(&x);
        assert_eq!(y.dim(), (2, 4, 4));
    }

    #[test]
    fn gradient_routes_to_argmax() {
        let mut rng = derive_rng(7, &[tag("pool-test")]);
        let x = Array3::from_shape_fn((2, 5, 5), |_| rng.gen::<f64>());
        let pool = MaxPool2d::new(3, 2, 1);
        let (y, cache) = pool.forward_train(&x);
        let r = Array3::from_shape_fn(y.raw_dim(), |_| rng.gen::<f64>() - 0.5);
        let dx = pool.backward(&cache, &r);
        let h = 1e-6;
        for &(c, i, j) in &[(0usize, 0usize, 0usize), (1, 2, 2), (0, 4, 3), (1, 1, 4)] {
            let fd = central_diff(
                |eps| {
                    let mut xp = x.clone();
                    xp[[c, i, j]] += eps;
                    (pool.forward(&xp) * &r).sum()
                },
                h,
            );
            assert!(rel_err(fd, dx[[c, i, j]]) < 1e-6, "dx[{c},{i},{j}]");
        }
    }
}
