//! Attention-based feature fusion: global and patch embeddings are stacked
//! into a token matrix and passed through a stack of multi-head
//! self-attention layers, then a linear head produces the fake-probability.
//!
//! The default stack is bare attention (no residual connections, layer
//! norm, feed-forward blocks, or positional encodings): each layer computes
//! per-head `softmax(Q Kᵀ / sqrt(d_h)) V`, concatenates heads, and applies
//! an output projection. Projections are linear without biases. A config
//! switch adds residual connections + non-affine layer norm for ablation;
//! another switches the score scale to the full model dimension.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core::EmbeddingSet;
use crate::error::{Error, Result};
use crate::nn::linear::{xavier_uniform, Linear, LinearCache};
use crate::nn::{sigmoid, Params};

/// How the post-attention token matrix is reduced for the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPool {
    /// Concatenate all tokens into one `[n * d]` vector (the default:
    /// keeps global/patch information in fixed slots).
    Flatten,
    /// Mean over tokens, `[d]`.
    MeanTokens,
    /// Take the (first) global token only, `[d]`.
    GlobalToken,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionConfig {
    pub layers: usize,
    pub heads: usize,
    /// Wrap each attention layer as `LN(x + MHA(x))` instead of bare
    /// stacking.
    pub residual_norm: bool,
    /// Scale attention scores by `1/sqrt(d_model)` instead of the per-head
    /// `1/sqrt(d_h)`.
    pub scale_by_model_dim: bool,
    pub pool: FusionPool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            layers: 3,
            heads: 4,
            residual_norm: false,
            scale_by_model_dim: false,
            pool: FusionPool::Flatten,
        }
    }
}

/// One attention layer's projections, `[d, d]` applied on the right of the
/// row-token matrix. Q/K/V matrices are column-blocked per head.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

impl AttentionLayer {
    fn new(dim: usize, rng: &mut impl Rng) -> Self {
        AttentionLayer {
            wq: xavier_uniform(dim, dim, rng),
            wk: xavier_uniform(dim, dim, rng),
            wv: xavier_uniform(dim, dim, rng),
            wo: xavier_uniform(dim, dim, rng),
        }
    }

    fn zeros_like(&self) -> AttentionLayer {
        let z = |m: &Array2<f64>| Array2::zeros(m.raw_dim());
        AttentionLayer { wq: z(&self.wq), wk: z(&self.wk), wv: z(&self.wv), wo: z(&self.wo) }
    }

    fn accumulate(&mut self, o: &AttentionLayer) {
        self.wq += &o.wq;
        self.wk += &o.wk;
        self.wv += &o.wv;
        self.wo += &o.wo;
    }

    fn scale(&mut self, c: f64) {
        self.wq *= c;
        self.wk *= c;
        self.wv *= c;
        self.wo *= c;
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&format!("{prefix}.wq"), self.wq.view().into_dyn());
        f(&format!("{prefix}.wk"), self.wk.view().into_dyn());
        f(&format!("{prefix}.wv"), self.wv.view().into_dyn());
        f(&format!("{prefix}.wo"), self.wo.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&format!("{prefix}.wq"), self.wq.view_mut().into_dyn());
        f(&format!("{prefix}.wk"), self.wk.view_mut().into_dyn());
        f(&format!("{prefix}.wv"), self.wv.view_mut().into_dyn());
        f(&format!("{prefix}.wo"), self.wo.view_mut().into_dyn());
    }
}

/// Row-wise softmax with max subtraction, stable for logits of any
/// magnitude.
pub fn softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// dS for S -> P = softmax_rows(S): per row,
/// dS_j = P_j * (dP_j - sum_k dP_k P_k).
fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut ds = Array2::zeros(p.raw_dim());
    for ((mut ds_row, p_row), dp_row) in
        ds.rows_mut().into_iter().zip(p.rows()).zip(dp.rows())
    {
        let dot: f64 = p_row.iter().zip(dp_row.iter()).map(|(a, b)| a * b).sum();
        for ((d, &pv), &dpv) in ds_row.iter_mut().zip(p_row.iter()).zip(dp_row.iter()) {
            *d = pv * (dpv - dot);
        }
    }
    ds
}

/// Single attention head on already-projected inputs:
/// `softmax(q kᵀ * scale) v`.
pub fn attention_head(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    scale: f64,
) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() {
        return Err(Error::Shape {
            expected: format!("key dim {}", q.ncols()),
            actual: format!("{}", k.ncols()),
        });
    }
    if k.nrows() != v.nrows() {
        return Err(Error::Shape {
            expected: format!("{} value rows", k.nrows()),
            actual: format!("{}", v.nrows()),
        });
    }
    let p = softmax_rows(&(q.dot(&k.t()) * scale));
    Ok(p.dot(v))
}

fn head_scale(dim: usize, heads: usize, scale_by_model_dim: bool) -> f64 {
    if scale_by_model_dim {
        1.0 / (dim as f64).sqrt()
    } else {
        1.0 / (dim as f64 / heads as f64).sqrt()
    }
}

/// Full multi-head layer: project, run each head on its column block,
/// concatenate, output-project.
pub fn multi_head_attention(
    tokens: &Array2<f64>,
    layer: &AttentionLayer,
    heads: usize,
    scale_by_model_dim: bool,
) -> Result<Array2<f64>> {
    let d = tokens.ncols();
    check_head_split(d, heads)?;
    if layer.wq.nrows() != d {
        return Err(Error::Shape {
            expected: format!("[{d}, {d}] projections"),
            actual: format!("[{}, {}]", layer.wq.nrows(), layer.wq.ncols()),
        });
    }
    let dh = d / heads;
    let scale = head_scale(d, heads, scale_by_model_dim);
    let q = tokens.dot(&layer.wq);
    let k = tokens.dot(&layer.wk);
    let v = tokens.dot(&layer.wv);
    let mut h = Array2::zeros((tokens.nrows(), d));
    for i in 0..heads {
        let cols = ndarray::s![.., i * dh..(i + 1) * dh];
        let hi = attention_head(
            &q.slice(cols).to_owned(),
            &k.slice(cols).to_owned(),
            &v.slice(cols).to_owned(),
            scale,
        )?;
        h.slice_mut(cols).assign(&hi);
    }
    Ok(h.dot(&layer.wo))
}

fn check_head_split(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::invalid(format!(
            "token dim {dim} must split evenly over {heads} heads"
        )));
    }
    Ok(())
}

struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per-head attention weights.
    p: Vec<Array2<f64>>,
    /// Concatenated head outputs before the output projection.
    h: Array2<f64>,
    /// Residual-norm cache: normalized rows and per-row inverse std.
    ln: Option<(Array2<f64>, Array1<f64>)>,
}

pub struct FusionCache {
    layers: Vec<LayerCache>,
    lin_cache: LinearCache,
}

const LN_EPS: f64 = 1e-5;

/// The fusion model: attention layers plus the linear classification head.
#[derive(Debug, Clone)]
pub struct FusionStack {
    pub layers: Vec<AttentionLayer>,
    pub classifier: Linear,
    pub config: FusionConfig,
    pub token_count: usize,
    pub dim: usize,
}

impl FusionStack {
    pub fn new(
        config: &FusionConfig,
        token_count: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<FusionStack> {
        check_head_split(dim, config.heads)?;
        if config.layers == 0 || token_count == 0 {
            return Err(Error::invalid("fusion needs at least one layer and one token"));
        }
        let layers = (0..config.layers).map(|_| AttentionLayer::new(dim, rng)).collect();
        let in_dim = match config.pool {
            FusionPool::Flatten => token_count * dim,
            FusionPool::MeanTokens | FusionPool::GlobalToken => dim,
        };
        Ok(FusionStack {
            layers,
            classifier: Linear::new(in_dim, 1, rng),
            config: config.clone(),
            token_count,
            dim,
        })
    }

    pub fn zeros_like(&self) -> FusionStack {
        FusionStack {
            layers: self.layers.iter().map(|l| l.zeros_like()).collect(),
            classifier: self.classifier.zeros_like(),
            config: self.config.clone(),
            token_count: self.token_count,
            dim: self.dim,
        }
    }

    pub fn accumulate(&mut self, o: &FusionStack) {
        for (a, b) in self.layers.iter_mut().zip(o.layers.iter()) {
            a.accumulate(b);
        }
        self.classifier.accumulate(&o.classifier);
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.scale(c);
        }
        self.classifier.scale(c);
    }

    fn check_tokens(&self, tokens: &Array2<f64>) -> Result<()> {
        if tokens.nrows() != self.token_count || tokens.ncols() != self.dim {
            return Err(Error::Shape {
                expected: format!("[{}, {}] token matrix", self.token_count, self.dim),
                actual: format!("[{}, {}]", tokens.nrows(), tokens.ncols()),
            });
        }
        Ok(())
    }

    /// Runs the attention layers only, returning the pre-classifier token
    /// matrix. Permuting input rows permutes output rows identically.
    pub fn forward_tokens(&self, tokens: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_tokens(tokens)?;
        let mut x = tokens.clone();
        for layer in &self.layers {
            let y =
                multi_head_attention(&x, layer, self.config.heads, self.config.scale_by_model_dim)?;
            x = if self.config.residual_norm { layer_norm_rows(&(x + y)).0 } else { y };
        }
        Ok(x)
    }

    fn pool(&self, tokens: &Array2<f64>) -> Array1<f64> {
        match self.config.pool {
            FusionPool::Flatten => Array1::from_iter(tokens.iter().cloned()),
            FusionPool::MeanTokens => tokens.mean_axis(Axis(0)).expect("non-empty tokens"),
            FusionPool::GlobalToken => tokens.row(0).to_owned(),
        }
    }

    /// Raw classifier logit for a token matrix.
    pub fn forward_logit(&self, tokens: &Array2<f64>) -> Result<f64> {
        let out = self.forward_tokens(tokens)?;
        Ok(self.classifier.forward(&self.pool(&out))[0])
    }

    /// Probability that the embedded image is synthesized.
    pub fn fuse_and_classify(&self, set: &EmbeddingSet) -> Result<f64> {
        Ok(sigmoid(self.forward_logit(&set.token_matrix())?))
    }

    pub fn forward_train(&self, tokens: &Array2<f64>) -> Result<(f64, FusionCache)> {
        self.check_tokens(tokens)?;
        let d = self.dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = head_scale(d, heads, self.config.scale_by_model_dim);
        let mut x = tokens.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let q = x.dot(&layer.wq);
            let k = x.dot(&layer.wk);
            let v = x.dot(&layer.wv);
            let mut p_heads = Vec::with_capacity(heads);
            let mut h = Array2::zeros((x.nrows(), d));
            for i in 0..heads {
                let cols = ndarray::s![.., i * dh..(i + 1) * dh];
                let qi = q.slice(cols);
                let ki = k.slice(cols);
                let vi = v.slice(cols);
                let p = softmax_rows(&(qi.dot(&ki.t()) * scale));
                h.slice_mut(cols).assign(&p.dot(&vi));
                p_heads.push(p);
            }
            let y = h.dot(&layer.wo);
            let (next, ln) = if self.config.residual_norm {
                let (normed, inv_std) = layer_norm_rows(&(&x + &y));
                (normed.clone(), Some((normed, inv_std)))
            } else {
                (y, None)
            };
            caches.push(LayerCache { x, q, k, v, p: p_heads, h, ln });
            x = next;
        }
        let pooled = self.pool(&x);
        let (out, lin_cache) = self.classifier.forward_train(&pooled);
        Ok((out[0], FusionCache { layers: caches, lin_cache }))
    }

    /// Backpropagates a scalar logit gradient; returns the token gradient
    /// and parameter gradients.
    pub fn backward(&self, cache: &FusionCache, dlogit: f64) -> (Array2<f64>, FusionStack) {
        let mut grads = self.zeros_like();
        let dy_lin = Array1::from_elem(1, dlogit);
        let (dpooled, lin_grads) = self.classifier.backward(&cache.lin_cache, &dy_lin);
        grads.classifier = lin_grads;

        let n = self.token_count;
        let d = self.dim;
        let mut dx: Array2<f64> = match self.config.pool {
            FusionPool::Flatten => Array2::from_shape_vec((n, d), dpooled.to_vec())
                .expect("flatten gradient reshapes"),
            FusionPool::MeanTokens => {
                let mut m = Array2::zeros((n, d));
                let scaled = &dpooled / n as f64;
                for mut row in m.rows_mut() {
                    row.assign(&scaled);
                }
                m
            }
            FusionPool::GlobalToken => {
                let mut m = Array2::zeros((n, d));
                m.row_mut(0).assign(&dpooled);
                m
            }
        };

        let heads = self.config.heads;
        let dh = d / heads;
        let scale = head_scale(d, heads, self.config.scale_by_model_dim);
        for (layer, (lc, lg)) in self
            .layers
            .iter()
            .zip(cache.layers.iter().zip(grads.layers.iter_mut()))
            .rev()
        {
            // Undo residual + norm wrapper first.
            let dy = if let Some((normed, inv_std)) = &lc.ln {
                layer_norm_rows_backward(normed, inv_std, &dx)
            } else {
                std::mem::take(&mut dx)
            };
            // dy is the gradient at the MHA output (plus, with residual, at x).
            lg.wo = lc.h.t().dot(&dy);
            let dh_full = dy.dot(&layer.wo.t());
            let mut dq = Array2::zeros((n, d));
            let mut dk = Array2::zeros((n, d));
            let mut dv = Array2::zeros((n, d));
            for i in 0..heads {
                let cols = ndarray::s![.., i * dh..(i + 1) * dh];
                let dhi = dh_full.slice(cols);
                let p = &lc.p[i];
                let vi = lc.v.slice(cols);
                let dp = dhi.dot(&vi.t());
                dv.slice_mut(cols).assign(&p.t().dot(&dhi));
                let ds = softmax_rows_backward(p, &dp);
                let qi = lc.q.slice(cols);
                let ki = lc.k.slice(cols);
                dq.slice_mut(cols).assign(&(ds.dot(&ki) * scale));
                dk.slice_mut(cols).assign(&(ds.t().dot(&qi) * scale));
            }
            lg.wq = lc.x.t().dot(&dq);
            lg.wk = lc.x.t().dot(&dk);
            lg.wv = lc.x.t().dot(&dv);
            let mut dx_new =
                dq.dot(&layer.wq.t()) + dk.dot(&layer.wk.t()) + dv.dot(&layer.wv.t());
            if lc.ln.is_some() {
                dx_new += &dy; // residual path
            }
            dx = dx_new;
        }
        (dx, grads)
    }
}

impl Params for FusionStack {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("layer{i}"), f);
        }
        self.classifier.visit("classifier", f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layer{i}"), f);
        }
        self.classifier.visit_mut("classifier", f);
    }
}

/// Row-wise non-affine layer norm; returns the normalized matrix and the
/// per-row inverse standard deviation.
fn layer_norm_rows(m: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = m.ncols() as f64;
    let mut out = m.clone();
    let mut inv_std = Array1::zeros(m.nrows());
    for (mut row, is) in out.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        *is = 1.0 / (var + LN_EPS).sqrt();
        let isv = *is;
        row.mapv_inplace(|v| (v - mean) * isv);
    }
    (out, inv_std)
}

fn layer_norm_rows_backward(
    normed: &Array2<f64>,
    inv_std: &Array1<f64>,
    dy: &Array2<f64>,
) -> Array2<f64> {
    let d = normed.ncols() as f64;
    let mut dx = Array2::zeros(normed.raw_dim());
    for ((mut dx_row, xhat), (dy_row, &is)) in dx
        .rows_mut()
        .into_iter()
        .zip(normed.rows())
        .zip(dy.rows().into_iter().zip(inv_std.iter()))
    {
        let mean_dy = dy_row.sum() / d;
        let mean_dy_xhat =
            dy_row.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        for ((dst, &g), &xh) in dx_row.iter_mut().zip(dy_row.iter()).zip(xhat.iter()) {
            *dst = is * (g - mean_dy - xh * mean_dy_xhat);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_diff, rel_err};
    use crate::rng::{derive_rng, tag};
    use ndarray::arr2;
    use rand::Rng;

    fn random_tokens(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = derive_rng(seed, &[tag("affm-test")]);
        Array2::from_shape_fn((n, d), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn softmax_rows_is_stable_and_normalized() {
        let m = arr2(&[[1e6, 1e6 - 1.0], [-1e6, 0.0], [0.5, 0.5]]);
        let p = softmax_rows(&m);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
        assert!((p[[2, 0]] - 0.5).abs() < 1e-15);
        // Shift invariance.
        let shifted = softmax_rows(&(&m + 17.0));
        for (a, b) in p.iter().zip(shifted.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_of_inverse_sqrt2_gap() {
        // Two logits separated by 1/sqrt(2) — the gap a unit dot product
        // gets under per-head scaling with d_h = 2.
        let gap = 1.0 / 2.0f64.sqrt();
        let p = softmax_rows(&arr2(&[[gap, 0.0]]));
        let expect = (gap.exp()) / (gap.exp() + 1.0);
        assert!((p[[0, 0]] - expect).abs() < 1e-15);
        assert!((p[[0, 0]] - 0.6698).abs() < 5e-5);
        assert!((p[[0, 1]] - 0.3302).abs() < 5e-5);
    }

    #[test]
    fn uniform_attention_averages_values() {
        // K = 0 makes every score equal, so attention averages V rows.
        let q = random_tokens(4, 3, 1);
        let k = Array2::zeros((5, 3));
        let v = random_tokens(5, 3, 2);
        let out = attention_head(&q, &k, &v, 1.0).unwrap();
        let mean = v.mean_axis(Axis(0)).unwrap();
        for row in out.rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // Shape mismatches are rejected.
        assert!(attention_head(&q, &random_tokens(5, 2, 3), &v, 1.0).is_err());
        assert!(attention_head(&q, &k, &random_tokens(4, 3, 4), 1.0).is_err());
    }

    #[test]
    fn multi_head_matches_plain_loop_oracle() {
        let (n, d, heads) = (5, 8, 4);
        let x = random_tokens(n, d, 5);
        let mut rng = derive_rng(6, &[tag("affm-test")]);
        let layer = AttentionLayer::new(d, &mut rng);
        let got = multi_head_attention(&x, &layer, heads, false).unwrap();

        // Oracle: plain nested loops, no ndarray matmuls.
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let matmul = |a: &Array2<f64>, b: &Array2<f64>| {
            let mut out = Array2::zeros((a.nrows(), b.ncols()));
            for i in 0..a.nrows() {
                for j in 0..b.ncols() {
                    let mut s = 0.0;
                    for t in 0..a.ncols() {
                        s += a[[i, t]] * b[[t, j]];
                    }
                    out[[i, j]] = s;
                }
            }
            out
        };
        let q = matmul(&x, &layer.wq);
        let k = matmul(&x, &layer.wk);
        let v = matmul(&x, &layer.wv);
        let mut h = Array2::zeros((n, d));
        for hd in 0..heads {
            for i in 0..n {
                // Scores for token i against all tokens, this head's block.
                let mut scores = vec![0.0; n];
                for j in 0..n {
                    let mut s = 0.0;
                    for t in 0..dh {
                        s += q[[i, hd * dh + t]] * k[[j, hd * dh + t]];
                    }
                    scores[j] = s * scale;
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                for t in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += exps[j] / total * v[[j, hd * dh + t]];
                    }
                    h[[i, hd * dh + t]] = acc;
                }
            }
        }
        let expect = matmul(&h, &layer.wo);
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn stack_is_permutation_equivariant() {
        let cfg = FusionConfig::default();
        let mut rng = derive_rng(7, &[tag("affm-test")]);
        let stack = FusionStack::new(&cfg, 7, 128, &mut rng).unwrap();
        let x = random_tokens(7, 128, 8);
        let y = stack.forward_tokens(&x).unwrap();

        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let mut xp = Array2::zeros((7, 128));
        for (dst, &src) in perm.iter().enumerate() {
            xp.row_mut(dst).assign(&x.row(src));
        }
        let yp = stack.forward_tokens(&xp).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..128 {
                assert!(
                    (yp[[dst, c]] - y[[src, c]]).abs() < 1e-9,
                    "row {dst} from {src} col {c}"
                );
            }
        }
    }

    #[test]
    fn fuse_and_classify_validates_and_bounds() {
        use crate::core::{Embedding, EmbeddingKind};
        let cfg = FusionConfig { layers: 2, heads: 2, ..Default::default() };
        let mut rng = derive_rng(9, &[tag("affm-test")]);
        let stack = FusionStack::new(&cfg, 3, 16, &mut rng).unwrap();
        let emb = |seed| Embedding {
            data: random_tokens(1, 16, seed).row(0).to_owned(),
            kind: EmbeddingKind::Patch,
        };
        let global = Embedding {
            data: random_tokens(1, 16, 20).row(0).to_owned(),
            kind: EmbeddingKind::Global,
        };
        let set = EmbeddingSet::new(global.clone(), vec![emb(21), emb(22)]).unwrap();
        let score = stack.fuse_and_classify(&set).unwrap();
        assert!(score > 0.0 && score < 1.0);
        // Wrong token count.
        let short = EmbeddingSet::new(global, vec![emb(23)]).unwrap();
        assert!(stack.fuse_and_classify(&short).is_err());
    }

    #[test]
    fn gradients_match_finite_differences_across_configs() {
        for (residual, by_model, pool) in [
            (false, false, FusionPool::Flatten),
            (true, false, FusionPool::Flatten),
            (false, true, FusionPool::MeanTokens),
            (false, false, FusionPool::GlobalToken),
        ] {
            let cfg = FusionConfig {
                layers: 2,
                heads: 2,
                residual_norm: residual,
                scale_by_model_dim: by_model,
                pool,
            };
            let mut rng = derive_rng(31, &[tag("affm-test"), residual as u64, by_model as u64]);
            let stack = FusionStack::new(&cfg, 3, 8, &mut rng).unwrap();
            let x = random_tokens(3, 8, 33);
            let (_, cache) = stack.forward_train(&x).unwrap();
            let (dx, grads) = stack.backward(&cache, 1.0);

            // h balances truncation against cancellation noise on the
            // smallest gradients (~1e-6 here).
            let h = 1e-5;
            // Token gradients.
            for &(i, j) in &[(0usize, 0usize), (1, 3), (2, 7)] {
                let fd = central_diff(
                    |eps| {
                        let mut xp = x.clone();
                        xp[[i, j]] += eps;
                        stack.forward_logit(&xp).unwrap()
                    },
                    h,
                );
                assert!(
                    rel_err(fd, dx[[i, j]]) < 1e-4,
                    "dx[{i},{j}] {residual}/{by_model}/{pool:?}: fd={fd} an={}",
                    dx[[i, j]]
                );
            }
            // A few weight coordinates in each tensor of each layer.
            let mut rng2 = derive_rng(35, &[tag("affm-test")]);
            let mut flat_grads: Vec<(String, ndarray::ArrayD<f64>)> = Vec::new();
            grads.visit_params(&mut |n, t| flat_grads.push((n.into(), t.to_owned())));
            for (name, g) in &flat_grads {
                for _ in 0..2 {
                    let pick = rng2.gen_range(0..g.len());
                    let fd = central_diff(
                        |eps| {
                            let mut sp = stack.clone();
                            let mut idx = 0usize;
                            sp.visit_params_mut(&mut |n2, mut t| {
                                if n2 == name {
                                    t.as_slice_mut().unwrap()[pick] += eps;
                                }
                                idx += 1;
                            });
                            assert!(idx > 0);
                            sp.forward_logit(&x).unwrap()
                        },
                        h,
                    );
                    let an = g.as_slice().unwrap()[pick];
                    assert!(
                        rel_err(fd, an) < 1e-4,
                        "{name}[{pick}] {residual}/{by_model}/{pool:?}: fd={fd} an={an}"
                    );
                }
            }
        }
    }
}
