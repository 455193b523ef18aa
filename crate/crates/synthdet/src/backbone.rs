//! Convolutional backbones. Each maps a `[3, 224, 224]` image to a spatial
//! feature map `[C, 7, 7]` (a 32x downsampling) plus a fixed-width
//! embedding obtained by mean-pooling the map and projecting linearly.
//!
//! Three architectures share the contract:
//! - `resnet50`: the standard bottleneck ResNet-50 trunk (C = 2048), heavy,
//!   practical only for inference-scale checks on this CPU engine;
//! - `reduced`: a four-stage small CNN (C = 32) sized so full training runs
//!   run on a desk machine in minutes;
//! - `tiny`: a three-stage CNN (C = 8) for fast tests.
//!
//! `reduced` and `tiny` prepend a fixed Laplacian (high-pass) channel to the
//! RGB input, the usual forensic-detector trick: generator artifacts are
//! high-frequency, and exposing that energy directly lets a randomly
//! initialized small net find it within a desk-scale training budget.
//! `resnet50` takes plain RGB like its ImageNet original.
//!
//! Normalization is per-sample over the whole feature tensor (never batch
//! norm), so results are independent of batch composition.

use ndarray::{Array1, Array3, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core::{Embedding, EmbeddingKind, FeatureMap, ImageTensor, EMBED_DIM};
use crate::error::{Error, Result};
use crate::nn::linear::LinearCache;
use crate::nn::{
    relu, relu_backward, LayerNorm2d, LayerNorm2dCache, Conv2d, ConvCache, Linear, MaxPool2d,
    MaxPoolCache, Params,
};

pub const INPUT_PX: u32 = 224;
pub const MAP_HW: usize = 7;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// One of "resnet50", "reduced", "tiny".
    pub architecture: String,
    pub embedding_dim: usize,
    /// When true the detector reuses the global backbone's weights for
    /// patches instead of training a separate local instance.
    pub shared_local_weights: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            architecture: "resnet50".into(),
            embedding_dim: EMBED_DIM,
            shared_local_weights: false,
        }
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv(Conv2d),
    Norm(LayerNorm2d),
    Relu,
    Pool(MaxPool2d),
}

enum LayerCache {
    Conv(ConvCache),
    Norm(LayerNorm2dCache),
    /// ReLU keeps its output for the mask.
    Relu(Array3<f64>),
    Pool(MaxPoolCache),
}

impl Layer {
    fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::Norm(n) => n.forward(x),
            Layer::Relu => relu(x),
            Layer::Pool(p) => p.forward(x),
        }
    }

    fn forward_train(&self, x: &Array3<f64>) -> (Array3<f64>, LayerCache) {
        match self {
            Layer::Conv(c) => {
                let (y, cache) = c.forward_train(x);
                (y, LayerCache::Conv(cache))
            }
            Layer::Norm(n) => {
                let (y, cache) = n.forward_train(x);
                (y, LayerCache::Norm(cache))
            }
            Layer::Relu => {
                let y = relu(x);
                (y.clone(), LayerCache::Relu(y))
            }
            Layer::Pool(p) => {
                let (y, cache) = p.forward_train(x);
                (y, LayerCache::Pool(cache))
            }
        }
    }

    fn backward(&self, cache: &LayerCache, dy: &Array3<f64>) -> (Array3<f64>, Layer) {
        match (self, cache) {
            (Layer::Conv(c), LayerCache::Conv(cc)) => {
                let (dx, g) = c.backward(cc, dy);
                (dx, Layer::Conv(g))
            }
            (Layer::Norm(n), LayerCache::Norm(nc)) => {
                let (dx, g) = n.backward(nc, dy);
                (dx, Layer::Norm(g))
            }
            (Layer::Relu, LayerCache::Relu(y)) => (relu_backward(y, dy), Layer::Relu),
            (Layer::Pool(p), LayerCache::Pool(pc)) => (p.backward(pc, dy), Layer::Pool(p.clone())),
            _ => unreachable!("layer cache kind mismatch"),
        }
    }

    fn zeros_like(&self) -> Layer {
        match self {
            Layer::Conv(c) => Layer::Conv(c.zeros_like()),
            Layer::Norm(n) => Layer::Norm(n.zeros_like()),
            Layer::Relu => Layer::Relu,
            Layer::Pool(p) => Layer::Pool(p.clone()),
        }
    }

    fn accumulate(&mut self, o: &Layer) {
        match (self, o) {
            (Layer::Conv(a), Layer::Conv(b)) => a.accumulate(b),
            (Layer::Norm(a), Layer::Norm(b)) => a.accumulate(b),
            (Layer::Relu, Layer::Relu) | (Layer::Pool(_), Layer::Pool(_)) => {}
            _ => unreachable!("layer kind mismatch"),
        }
    }

    fn scale(&mut self, c: f64) {
        match self {
            Layer::Conv(l) => l.scale(c),
            Layer::Norm(n) => n.scale(c),
            Layer::Relu | Layer::Pool(_) => {}
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        match self {
            Layer::Conv(c) => c.visit(prefix, f),
            Layer::Norm(n) => n.visit(prefix, f),
            Layer::Relu | Layer::Pool(_) => {}
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        match self {
            Layer::Conv(c) => c.visit_mut(prefix, f),
            Layer::Norm(n) => n.visit_mut(prefix, f),
            Layer::Relu | Layer::Pool(_) => {}
        }
    }
}

/// A sequence of layers, optionally wrapped as a residual unit:
/// `y = relu(body(x) + shortcut(x))` with an identity shortcut when none is
/// given.
#[derive(Debug, Clone)]
struct Block {
    body: Vec<Layer>,
    shortcut: Option<Vec<Layer>>,
    residual: bool,
}

struct BlockCache {
    body: Vec<LayerCache>,
    shortcut: Option<Vec<LayerCache>>,
    /// Output of the final ReLU for residual blocks.
    out: Option<Array3<f64>>,
}

fn run_seq(layers: &[Layer], x: &Array3<f64>) -> Array3<f64> {
    let mut cur = x.clone();
    for l in layers {
        cur = l.forward(&cur);
    }
    cur
}

fn run_seq_train(layers: &[Layer], x: &Array3<f64>) -> (Array3<f64>, Vec<LayerCache>) {
    let mut cur = x.clone();
    let mut caches = Vec::with_capacity(layers.len());
    for l in layers {
        let (y, c) = l.forward_train(&cur);
        caches.push(c);
        cur = y;
    }
    (cur, caches)
}

fn backward_seq(
    layers: &[Layer],
    caches: &[LayerCache],
    dy: &Array3<f64>,
) -> (Array3<f64>, Vec<Layer>) {
    let mut grads: Vec<Layer> = layers.iter().map(|l| l.zeros_like()).collect();
    let mut d = dy.clone();
    for i in (0..layers.len()).rev() {
        let (dx, g) = layers[i].backward(&caches[i], &d);
        grads[i] = g;
        d = dx;
    }
    (d, grads)
}

impl Block {
    fn plain(body: Vec<Layer>) -> Block {
        Block { body, shortcut: None, residual: false }
    }

    fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        if !self.residual {
            return run_seq(&self.body, x);
        }
        let main = run_seq(&self.body, x);
        let skip = match &self.shortcut {
            Some(s) => run_seq(s, x),
            None => x.clone(),
        };
        relu(&(main + skip))
    }

    fn forward_train(&self, x: &Array3<f64>) -> (Array3<f64>, BlockCache) {
        if !self.residual {
            let (y, caches) = run_seq_train(&self.body, x);
            return (y, BlockCache { body: caches, shortcut: None, out: None });
        }
        let (main, body_caches) = run_seq_train(&self.body, x);
        let (skip, skip_caches) = match &self.shortcut {
            Some(s) => {
                let (y, c) = run_seq_train(s, x);
                (y, Some(c))
            }
            None => (x.clone(), None),
        };
        let out = relu(&(main + skip));
        (out.clone(), BlockCache { body: body_caches, shortcut: skip_caches, out: Some(out) })
    }

    fn backward(&self, cache: &BlockCache, dy: &Array3<f64>) -> (Array3<f64>, Block) {
        if !self.residual {
            let (dx, body_grads) = backward_seq(&self.body, &cache.body, dy);
            return (
                dx,
                Block { body: body_grads, shortcut: None, residual: false },
            );
        }
        let dsum = relu_backward(cache.out.as_ref().expect("residual cache"), dy);
        let (dx_body, body_grads) = backward_seq(&self.body, &cache.body, &dsum);
        let (dx_skip, skip_grads) = match (&self.shortcut, &cache.shortcut) {
            (Some(s), Some(sc)) => {
                let (dx, g) = backward_seq(s, sc, &dsum);
                (dx, Some(g))
            }
            _ => (dsum.clone(), None),
        };
        (
            dx_body + dx_skip,
            Block { body: body_grads, shortcut: skip_grads, residual: true },
        )
    }

    fn zeros_like(&self) -> Block {
        Block {
            body: self.body.iter().map(|l| l.zeros_like()).collect(),
            shortcut: self.shortcut.as_ref().map(|s| s.iter().map(|l| l.zeros_like()).collect()),
            residual: self.residual,
        }
    }

    fn accumulate(&mut self, o: &Block) {
        for (a, b) in self.body.iter_mut().zip(o.body.iter()) {
            a.accumulate(b);
        }
        if let (Some(s), Some(os)) = (self.shortcut.as_mut(), o.shortcut.as_ref()) {
            for (a, b) in s.iter_mut().zip(os.iter()) {
                a.accumulate(b);
            }
        }
    }

    fn scale(&mut self, c: f64) {
        for l in &mut self.body {
            l.scale(c);
        }
        if let Some(s) = self.shortcut.as_mut() {
            for l in s {
                l.scale(c);
            }
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        for (i, l) in self.body.iter().enumerate() {
            l.visit(&format!("{prefix}.body{i}"), f);
        }
        if let Some(s) = &self.shortcut {
            for (i, l) in s.iter().enumerate() {
                l.visit(&format!("{prefix}.shortcut{i}"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        for (i, l) in self.body.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.body{i}"), f);
        }
        if let Some(s) = self.shortcut.as_mut() {
            for (i, l) in s.iter_mut().enumerate() {
                l.visit_mut(&format!("{prefix}.shortcut{i}"), f);
            }
        }
    }
}

/// Feature map plus pooled embedding for one image.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub feature_map: FeatureMap,
    pub embedding: Embedding,
}

pub struct BackboneCache {
    blocks: Vec<BlockCache>,
    feature_dim: (usize, usize, usize),
    proj_cache: LinearCache,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub architecture: String,
    pub embedding_dim: usize,
    blocks: Vec<Block>,
    proj: Linear,
    feat_channels: usize,
    high_pass_input: bool,
}

/// Discrete Laplacian of the RGB mean (zero padding). The stencil is
/// symmetric, so it is its own adjoint in [`high_pass_backward`].
fn luminance_laplacian(x: &Array3<f64>) -> ndarray::Array2<f64> {
    let (_, h, w) = x.dim();
    let lum = |i: usize, j: usize| (x[[0, i, j]] + x[[1, i, j]] + x[[2, i, j]]) / 3.0;
    let mut lap = ndarray::Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut v = 4.0 * lum(i, j);
            if i > 0 {
                v -= lum(i - 1, j);
            }
            if i + 1 < h {
                v -= lum(i + 1, j);
            }
            if j > 0 {
                v -= lum(i, j - 1);
            }
            if j + 1 < w {
                v -= lum(i, j + 1);
            }
            lap[[i, j]] = v;
        }
    }
    lap
}

fn with_high_pass(x: &Array3<f64>) -> Array3<f64> {
    let (_, h, w) = x.dim();
    let lap = luminance_laplacian(x);
    let mut out = Array3::zeros((4, h, w));
    for c in 0..3 {
        out.index_axis_mut(ndarray::Axis(0), c).assign(&x.index_axis(ndarray::Axis(0), c));
    }
    out.index_axis_mut(ndarray::Axis(0), 3).assign(&lap);
    out
}

fn high_pass_backward(d4: &Array3<f64>) -> Array3<f64> {
    let (_, h, w) = d4.dim();
    let dlap = d4.index_axis(ndarray::Axis(0), 3);
    let mut dx = Array3::zeros((3, h, w));
    for c in 0..3 {
        dx.index_axis_mut(ndarray::Axis(0), c).assign(&d4.index_axis(ndarray::Axis(0), c));
    }
    for i in 0..h {
        for j in 0..w {
            let mut v = 4.0 * dlap[[i, j]];
            if i > 0 {
                v -= dlap[[i - 1, j]];
            }
            if i + 1 < h {
                v -= dlap[[i + 1, j]];
            }
            if j > 0 {
                v -= dlap[[i, j - 1]];
            }
            if j + 1 < w {
                v -= dlap[[i, j + 1]];
            }
            // d lum / d rgb = 1/3 per channel
            let g = v / 3.0;
            for c in 0..3 {
                dx[[c, i, j]] += g;
            }
        }
    }
    dx
}

fn conv_norm_relu(
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    padding: usize,
    rng: &mut impl Rng,
) -> Vec<Layer> {
    vec![
        Layer::Conv(Conv2d::new(in_ch, out_ch, k, stride, padding, rng)),
        Layer::Norm(LayerNorm2d::new(out_ch)),
        Layer::Relu,
    ]
}

fn bottleneck(
    in_ch: usize,
    planes: usize,
    out_ch: usize,
    stride: usize,
    rng: &mut impl Rng,
) -> Block {
    let body = vec![
        Layer::Conv(Conv2d::new(in_ch, planes, 1, 1, 0, rng)),
        Layer::Norm(LayerNorm2d::new(planes)),
        Layer::Relu,
        Layer::Conv(Conv2d::new(planes, planes, 3, stride, 1, rng)),
        Layer::Norm(LayerNorm2d::new(planes)),
        Layer::Relu,
        Layer::Conv(Conv2d::new(planes, out_ch, 1, 1, 0, rng)),
        Layer::Norm(LayerNorm2d::new(out_ch)),
    ];
    let shortcut = if in_ch != out_ch || stride != 1 {
        Some(vec![
            Layer::Conv(Conv2d::new(in_ch, out_ch, 1, stride, 0, rng)),
            Layer::Norm(LayerNorm2d::new(out_ch)),
        ])
    } else {
        None
    };
    Block { body, shortcut, residual: true }
}

impl Backbone {
    pub fn new(config: &BackboneConfig, rng: &mut impl Rng) -> Result<Backbone> {
        if config.embedding_dim == 0 {
            return Err(Error::invalid("embedding_dim must be >= 1"));
        }
        let (blocks, feat_channels, high_pass_input) = match config.architecture.as_str() {
            "tiny" => {
                let blocks = vec![
                    Block::plain(conv_norm_relu(4, 4, 8, 8, 0, rng)),
                    Block::plain(conv_norm_relu(4, 8, 3, 2, 1, rng)),
                    Block::plain(conv_norm_relu(8, 8, 3, 2, 1, rng)),
                ];
                (blocks, 8, true)
            }
            "reduced" => {
                let blocks = vec![
                    Block::plain(conv_norm_relu(4, 8, 8, 8, 0, rng)),
                    Block::plain(conv_norm_relu(8, 16, 3, 2, 1, rng)),
                    Block::plain(conv_norm_relu(16, 32, 3, 2, 1, rng)),
                    Block {
                        body: vec![
                            Layer::Conv(Conv2d::new(32, 32, 3, 1, 1, rng)),
                            Layer::Norm(LayerNorm2d::new(32)),
                            Layer::Relu,
                            Layer::Conv(Conv2d::new(32, 32, 3, 1, 1, rng)),
                            Layer::Norm(LayerNorm2d::new(32)),
                        ],
                        shortcut: None,
                        residual: true,
                    },
                ];
                (blocks, 32, true)
            }
            "resnet50" => {
                let mut blocks = vec![Block::plain(vec![
                    Layer::Conv(Conv2d::new(3, 64, 7, 2, 3, rng)),
                    Layer::Norm(LayerNorm2d::new(64)),
                    Layer::Relu,
                    Layer::Pool(MaxPool2d::new(3, 2, 1)),
                ])];
                let stages: [(usize, usize, usize); 4] =
                    [(64, 256, 3), (128, 512, 4), (256, 1024, 6), (512, 2048, 3)];
                let mut in_ch = 64;
                for (si, &(planes, out_ch, reps)) in stages.iter().enumerate() {
                    for r in 0..reps {
                        let stride = if si > 0 && r == 0 { 2 } else { 1 };
                        blocks.push(bottleneck(in_ch, planes, out_ch, stride, rng));
                        in_ch = out_ch;
                    }
                }
                (blocks, 2048, false)
            }
            other => {
                return Err(Error::invalid(format!(
                    "unknown backbone architecture {other:?} (expected resnet50, reduced, or tiny)"
                )))
            }
        };
        Ok(Backbone {
            architecture: config.architecture.clone(),
            embedding_dim: config.embedding_dim,
            blocks,
            proj: Linear::new(feat_channels, config.embedding_dim, rng),
            feat_channels,
            high_pass_input,
        })
    }

    pub fn feature_channels(&self) -> usize {
        self.feat_channels
    }

    fn check_input(&self, img: &ImageTensor) -> Result<()> {
        let (c, h, w) = img.data.dim();
        if (c, h, w) != (3, INPUT_PX as usize, INPUT_PX as usize) {
            return Err(Error::Shape {
                expected: format!("[3, {INPUT_PX}, {INPUT_PX}] input"),
                actual: format!("[{c}, {h}, {w}]"),
            });
        }
        Ok(())
    }

    fn trunk(&self, img: &ImageTensor) -> Array3<f64> {
        let mut x =
            if self.high_pass_input { with_high_pass(&img.data) } else { img.data.clone() };
        for b in &self.blocks {
            x = b.forward(&x);
        }
        x
    }

    fn pool_project(&self, features: &Array3<f64>) -> Array1<f64> {
        self.proj.forward(&spatial_mean(features))
    }

    /// Feature map and global-pooled embedding for one `[3, 224, 224]`
    /// image.
    pub fn extract(&self, img: &ImageTensor) -> Result<BackboneOutput> {
        self.check_input(img)?;
        let features = self.trunk(img);
        debug_assert_eq!(features.dim().1, MAP_HW);
        let embedding = self.pool_project(&features);
        Ok(BackboneOutput {
            feature_map: FeatureMap {
                data: features,
                source: format!("{}/final", self.architecture),
            },
            embedding: Embedding { data: embedding, kind: EmbeddingKind::Global },
        })
    }

    /// Order-preserving parallel [`extract`] over a slice of images.
    pub fn extract_batch(&self, imgs: &[ImageTensor]) -> Result<Vec<BackboneOutput>> {
        use rayon::prelude::*;
        imgs.par_iter().map(|img| self.extract(img)).collect()
    }

    pub(crate) fn forward_train(
        &self,
        img: &ImageTensor,
    ) -> Result<(Array3<f64>, Array1<f64>, BackboneCache)> {
        self.check_input(img)?;
        let mut x =
            if self.high_pass_input { with_high_pass(&img.data) } else { img.data.clone() };
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward_train(&x);
            caches.push(c);
            x = y;
        }
        let (emb, proj_cache) = self.proj.forward_train(&spatial_mean(&x));
        let dim = x.dim();
        Ok((x, emb, BackboneCache { blocks: caches, feature_dim: dim, proj_cache }))
    }

    /// Backpropagates an embedding gradient to the input image, returning
    /// the input gradient and parameter gradients.
    pub(crate) fn backward(
        &self,
        cache: &BackboneCache,
        d_emb: &Array1<f64>,
    ) -> (Array3<f64>, Backbone) {
        let (d_pooled, proj_grads) = self.proj.backward(&cache.proj_cache, d_emb);
        let (c, h, w) = cache.feature_dim;
        let n = (h * w) as f64;
        let mut d_feat = Array3::zeros((c, h, w));
        for ch in 0..c {
            let g = d_pooled[ch] / n;
            d_feat.index_axis_mut(ndarray::Axis(0), ch).fill(g);
        }
        let mut grads = self.zeros_like();
        grads.proj = proj_grads;
        let mut d = d_feat;
        for i in (0..self.blocks.len()).rev() {
            let (dx, g) = self.blocks[i].backward(&cache.blocks[i], &d);
            grads.blocks[i] = g;
            d = dx;
        }
        if self.high_pass_input {
            d = high_pass_backward(&d);
        }
        (d, grads)
    }

    pub fn zeros_like(&self) -> Backbone {
        Backbone {
            architecture: self.architecture.clone(),
            embedding_dim: self.embedding_dim,
            blocks: self.blocks.iter().map(|b| b.zeros_like()).collect(),
            proj: self.proj.zeros_like(),
            feat_channels: self.feat_channels,
            high_pass_input: self.high_pass_input,
        }
    }

    pub fn accumulate(&mut self, o: &Backbone) {
        for (a, b) in self.blocks.iter_mut().zip(o.blocks.iter()) {
            a.accumulate(b);
        }
        self.proj.accumulate(&o.proj);
    }

    pub fn scale(&mut self, c: f64) {
        for b in &mut self.blocks {
            b.scale(c);
        }
        self.proj.scale(c);
    }
}

fn spatial_mean(features: &Array3<f64>) -> Array1<f64> {
    let (c, h, w) = features.dim();
    let n = (h * w) as f64;
    Array1::from_shape_fn(c, |ch| features.index_axis(ndarray::Axis(0), ch).sum() / n)
}

impl Params for Backbone {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("block{i}"), f);
        }
        self.proj.visit("proj", f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("block{i}"), f);
        }
        self.proj.visit_mut("proj", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_diff, rel_err};
    use crate::nn::param_count;
    use crate::rng::{derive_rng, tag};
    use rand::Rng;

    fn test_image(seed: u64) -> ImageTensor {
        let mut rng = derive_rng(seed, &[tag("backbone-test")]);
        ImageTensor::from_array(Array3::from_shape_fn((3, 224, 224), |_| rng.gen())).unwrap()
    }

    fn tiny_backbone(seed: u64) -> Backbone {
        let cfg = BackboneConfig {
            architecture: "tiny".into(),
            embedding_dim: 16,
            shared_local_weights: false,
        };
        let mut rng = derive_rng(seed, &[tag("backbone-init")]);
        Backbone::new(&cfg, &mut rng).unwrap()
    }

    #[test]
    fn tiny_and_reduced_meet_the_shape_contract() {
        for (arch, channels) in [("tiny", 8), ("reduced", 32)] {
            let cfg = BackboneConfig {
                architecture: arch.into(),
                embedding_dim: 128,
                shared_local_weights: false,
            };
            let mut rng = derive_rng(1, &[tag("backbone-init")]);
            let bb = Backbone::new(&cfg, &mut rng).unwrap();
            let out = bb.extract(&test_image(2)).unwrap();
            assert_eq!(out.feature_map.data.dim(), (channels, 7, 7), "{arch}");
            assert_eq!(out.embedding.data.len(), 128);
            assert_eq!(out.embedding.kind, EmbeddingKind::Global);
            assert!(out.feature_map.source.starts_with(arch));
        }
    }

    #[test]
    fn rejects_wrong_input_shape_and_unknown_arch() {
        let bb = tiny_backbone(3);
        let small =
            ImageTensor::from_array(Array3::zeros((3, 64, 64))).unwrap();
        assert!(bb.extract(&small).is_err());
        let cfg = BackboneConfig {
            architecture: "resnet18".into(),
            embedding_dim: 128,
            shared_local_weights: false,
        };
        let mut rng = derive_rng(4, &[tag("backbone-init")]);
        assert!(Backbone::new(&cfg, &mut rng).is_err());
    }

    #[test]
    fn deterministic_and_input_sensitive() {
        let bb = tiny_backbone(5);
        let img = test_image(6);
        let a = bb.extract(&img).unwrap();
        let b = bb.extract(&img).unwrap();
        assert_eq!(a.embedding.data, b.embedding.data);
        assert_eq!(a.feature_map.data, b.feature_map.data);

        let mut nudged = img.clone();
        nudged.data[[0, 100, 100]] = (nudged.data[[0, 100, 100]] + 0.5) % 1.0;
        let c = bb.extract(&nudged).unwrap();
        let diff: f64 =
            (&a.embedding.data - &c.embedding.data).iter().map(|v| v.abs()).sum();
        assert!(diff > 0.0, "embedding ignored an input perturbation");
    }

    #[test]
    fn batch_extraction_matches_sequential() {
        let bb = tiny_backbone(7);
        let imgs: Vec<ImageTensor> = (0..4).map(|i| test_image(10 + i)).collect();
        let batch = bb.extract_batch(&imgs).unwrap();
        for (img, out) in imgs.iter().zip(batch.iter()) {
            let solo = bb.extract(img).unwrap();
            assert_eq!(solo.embedding.data, out.embedding.data);
            assert_eq!(solo.feature_map.data, out.feature_map.data);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let bb = tiny_backbone(8);
        let img = test_image(9);
        let (_, emb, cache) = bb.forward_train(&img).unwrap();
        let mut rng = derive_rng(10, &[tag("backbone-test")]);
        let r = Array1::from_shape_fn(emb.len(), |_| rng.gen::<f64>() - 0.5);
        let (dx, grads) = bb.backward(&cache, &r);

        let objective = |b: &Backbone, im: &ImageTensor| {
            (&b.extract(im).unwrap().embedding.data * &r).sum()
        };
        let h = 1e-5;
        // Input pixels.
        for &(c, y, x) in &[(0usize, 3usize, 3usize), (1, 100, 57), (2, 223, 223)] {
            let fd = central_diff(
                |eps| {
                    let mut im = img.clone();
                    im.data[[c, y, x]] += eps;
                    // Bypass range validation: perturbed pixels may leave [0,1].
                    objective(&bb, &im)
                },
                h,
            );
            assert!(
                rel_err(fd, dx[[c, y, x]]) < 1e-4,
                "dx[{c},{y},{x}]: fd={fd} an={}",
                dx[[c, y, x]]
            );
        }
        // A sample of parameter coordinates across tensors.
        let mut flat: Vec<(String, ndarray::ArrayD<f64>)> = Vec::new();
        grads.visit_params(&mut |n, t| flat.push((n.into(), t.to_owned())));
        assert_eq!(flat.len(), 3 * 4 + 2); // 3 blocks x (conv w/b + norm g/b) + proj w/b
        let mut rng2 = derive_rng(11, &[tag("backbone-test")]);
        for (name, g) in flat.iter().filter(|(n, _)| {
            n.contains("block0.body0") || n.contains("block2.body1") || n.starts_with("proj")
        }) {
            let pick = rng2.gen_range(0..g.len());
            let fd = central_diff(
                |eps| {
                    let mut bp = bb.clone();
                    bp.visit_params_mut(&mut |n2, mut t| {
                        if n2 == name {
                            t.as_slice_mut().unwrap()[pick] += eps;
                        }
                    });
                    objective(&bp, &img)
                },
                h,
            );
            let an = g.as_slice().unwrap()[pick];
            assert!(rel_err(fd, an) < 1e-4, "{name}[{pick}]: fd={fd} an={an}");
        }
        assert!(param_count(&bb) > 0);
    }

    #[test]
    fn resnet50_meets_the_shape_contract() {
        let cfg = BackboneConfig::default();
        let mut rng = derive_rng(12, &[tag("backbone-init")]);
        let bb = Backbone::new(&cfg, &mut rng).unwrap();
        let out = bb.extract(&test_image(13)).unwrap();
        assert_eq!(out.feature_map.data.dim(), (2048, 7, 7));
        assert_eq!(out.embedding.data.len(), 128);
        // 16 bottlenecks + stem; > 23M parameters.
        assert!(param_count(&bb) > 23_000_000);
    }
}
