//! The full two-branch detector: global backbone -> patch selection ->
//! local backbone -> attention fusion -> fake probability.
//!
//! The global branch sees the image resized to 224x224; patches are cropped
//! from the original pixels and resized to 224 for the local branch. Patch
//! selection is a discrete step: no gradient flows through window scores or
//! crop coordinates, but gradients do flow through both backbones via the
//! embeddings. Identical crops (common when a patch covers the whole image)
//! are embedded once and their gradients summed — an exact optimization.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};

use crate::affm::{FusionCache, FusionConfig, FusionStack};
use crate::backbone::{Backbone, BackboneCache, BackboneConfig, INPUT_PX};
use crate::core::{
    resize_bilinear, Embedding, EmbeddingKind, EmbeddingSet, ImageTensor,
};
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::psm::{select_patches, PatchProposal, WindowSpec, DEFAULT_IOU_THRESHOLD};
use crate::rng::{derive_rng, tag};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub backbone: BackboneConfig,
    pub window_specs: Vec<WindowSpec>,
    pub iou_threshold: f64,
    pub fusion: FusionConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            backbone: BackboneConfig::default(),
            window_specs: crate::psm::default_window_specs(),
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            fusion: FusionConfig::default(),
        }
    }
}

impl DetectorConfig {
    pub fn token_count(&self) -> usize {
        1 + self.window_specs.iter().map(|s| s.n_select).sum::<usize>()
    }
}

#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub global_backbone: Backbone,
    /// `None` when `shared_local_weights` is set: patches then reuse the
    /// global backbone.
    pub local_backbone: Option<Backbone>,
    pub fusion: FusionStack,
}

pub struct DetectorCache {
    global: BackboneCache,
    /// One cache per unique patch, plus which unique each token slot maps
    /// to.
    patches: Vec<BackboneCache>,
    slot_to_unique: Vec<usize>,
    fusion: FusionCache,
}

impl DetectorModel {
    pub fn new(config: &DetectorConfig, seed: u64) -> Result<DetectorModel> {
        if config.window_specs.is_empty() {
            return Err(Error::invalid("detector needs at least one window spec"));
        }
        if !(0.0..=1.0).contains(&config.iou_threshold) {
            return Err(Error::invalid("iou_threshold must be in [0, 1]"));
        }
        let mut g_rng = derive_rng(seed, &[tag("init-global")]);
        let global_backbone = Backbone::new(&config.backbone, &mut g_rng)?;
        let local_backbone = if config.backbone.shared_local_weights {
            None
        } else {
            let mut l_rng = derive_rng(seed, &[tag("init-local")]);
            Some(Backbone::new(&config.backbone, &mut l_rng)?)
        };
        let mut f_rng = derive_rng(seed, &[tag("init-fusion")]);
        let fusion = FusionStack::new(
            &config.fusion,
            config.token_count(),
            config.backbone.embedding_dim,
            &mut f_rng,
        )?;
        Ok(DetectorModel { config: config.clone(), global_backbone, local_backbone, fusion })
    }

    fn local(&self) -> &Backbone {
        self.local_backbone.as_ref().unwrap_or(&self.global_backbone)
    }

    /// Global input: the image resized to the backbone's 224x224 footprint.
    fn global_input(&self, img: &ImageTensor) -> Result<ImageTensor> {
        resize_bilinear(img, (INPUT_PX, INPUT_PX))
    }

    /// Selects patches on the original image using the global feature map.
    fn propose(
        &self,
        feature: &crate::core::FeatureMap,
        img: &ImageTensor,
    ) -> Result<(Vec<ImageTensor>, Vec<PatchProposal>)> {
        select_patches(feature, img, &self.config.window_specs, self.config.iou_threshold, INPUT_PX)
    }

    /// Scores an image: probability it is synthesized, plus the selected
    /// patch proposals (with image-space crop rectangles). Images smaller
    /// than the largest configured patch are rejected.
    pub fn forward(&self, img: &ImageTensor) -> Result<(f64, Vec<PatchProposal>)> {
        let global_in = self.global_input(img)?;
        let out = self.global_backbone.extract(&global_in)?;
        let (patches, proposals) = self.propose(&out.feature_map, img)?;
        let (unique, slot_to_unique) = dedup_patches(&patches, &proposals);

        let local = self.local();
        let unique_embs: Vec<_> = unique
            .iter()
            .map(|p| local.extract(p).map(|o| o.embedding.data))
            .collect::<Result<_>>()?;
        let patch_embs = slot_to_unique
            .iter()
            .map(|&u| Embedding { data: unique_embs[u].clone(), kind: EmbeddingKind::Patch })
            .collect();
        let set = EmbeddingSet::new(out.embedding, patch_embs)?;
        let score = self.fusion.fuse_and_classify(&set)?;
        Ok((score, proposals))
    }

    /// Training forward: returns the raw logit, the proposals, and the
    /// caches needed by [`DetectorModel::backward`].
    pub fn forward_train(
        &self,
        img: &ImageTensor,
    ) -> Result<(f64, Vec<PatchProposal>, DetectorCache)> {
        let global_in = self.global_input(img)?;
        let (feature, g_emb, g_cache) = self.global_backbone.forward_train(&global_in)?;
        let fmap =
            crate::core::FeatureMap { data: feature, source: "train/global".into() };
        let (patches, proposals) = self.propose(&fmap, img)?;
        let (unique, slot_to_unique) = dedup_patches(&patches, &proposals);

        let local = self.local();
        let mut patch_caches = Vec::with_capacity(unique.len());
        let mut unique_embs = Vec::with_capacity(unique.len());
        for p in &unique {
            let (_, emb, cache) = local.forward_train(p)?;
            unique_embs.push(emb);
            patch_caches.push(cache);
        }

        let d = self.config.backbone.embedding_dim;
        let n_tokens = 1 + slot_to_unique.len();
        let mut tokens = Array2::zeros((n_tokens, d));
        tokens.row_mut(0).assign(&g_emb);
        for (slot, &u) in slot_to_unique.iter().enumerate() {
            tokens.row_mut(slot + 1).assign(&unique_embs[u]);
        }
        let (logit, fusion_cache) = self.fusion.forward_train(&tokens)?;
        Ok((
            logit,
            proposals,
            DetectorCache {
                global: g_cache,
                patches: patch_caches,
                slot_to_unique,
                fusion: fusion_cache,
            },
        ))
    }

    /// Backpropagates a logit gradient through fusion and both backbones.
    /// Returns parameter gradients shaped like the model itself.
    pub fn backward(&self, cache: &DetectorCache, dlogit: f64) -> DetectorModel {
        let (d_tokens, fusion_grads) = self.fusion.backward(&cache.fusion, dlogit);
        let mut grads = self.zeros_like();
        grads.fusion = fusion_grads;

        let d_global_emb = d_tokens.row(0).to_owned();
        let (_, g_grads) = self.global_backbone.backward(&cache.global, &d_global_emb);
        grads.global_backbone = g_grads;

        // Sum token gradients per unique patch, then one backbone backward
        // per unique — exact because duplicate slots saw identical inputs.
        let d = d_tokens.ncols();
        let mut per_unique = vec![ndarray::Array1::<f64>::zeros(d); cache.patches.len()];
        for (slot, &u) in cache.slot_to_unique.iter().enumerate() {
            per_unique[u] += &d_tokens.row(slot + 1);
        }
        let local = self.local();
        for (u, d_emb) in per_unique.iter().enumerate() {
            let (_, l_grads) = local.backward(&cache.patches[u], d_emb);
            match (&mut grads.local_backbone, self.local_backbone.is_some()) {
                (Some(acc), true) => acc.accumulate(&l_grads),
                _ => grads.global_backbone.accumulate(&l_grads),
            }
        }
        grads
    }

    pub fn zeros_like(&self) -> DetectorModel {
        DetectorModel {
            config: self.config.clone(),
            global_backbone: self.global_backbone.zeros_like(),
            local_backbone: self.local_backbone.as_ref().map(|b| b.zeros_like()),
            fusion: self.fusion.zeros_like(),
        }
    }

    pub fn accumulate(&mut self, o: &DetectorModel) {
        self.global_backbone.accumulate(&o.global_backbone);
        if let (Some(a), Some(b)) = (self.local_backbone.as_mut(), o.local_backbone.as_ref()) {
            a.accumulate(b);
        }
        self.fusion.accumulate(&o.fusion);
    }

    pub fn scale(&mut self, c: f64) {
        self.global_backbone.scale(c);
        if let Some(l) = self.local_backbone.as_mut() {
            l.scale(c);
        }
        self.fusion.scale(c);
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(path, e);

        w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
        let config_json = serde_json::to_vec(&self.config)
            .map_err(|e| Error::format(path, format!("config serialization failed: {e}")))?;
        w.write_all(&(config_json.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&config_json).map_err(io_err)?;

        let mut tensors: Vec<(String, ndarray::ArrayD<f64>)> = Vec::new();
        self.visit_params(&mut |name, t| tensors.push((name.to_string(), t.to_owned())));
        w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io_err)?;
        for (name, t) in &tensors {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(name_bytes).map_err(io_err)?;
            w.write_all(&(t.ndim() as u32).to_le_bytes()).map_err(io_err)?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
            }
            for &v in t.iter() {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    /// Loads a checkpoint written by [`DetectorModel::save_checkpoint`].
    /// The stored config rebuilds the model skeleton; every stored tensor
    /// must match a parameter by name and shape, with nothing missing or
    /// extra — otherwise this is a format error and no model is returned.
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DetectorModel> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let fmt = |msg: String| Error::format(path, msg);

        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, path)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fmt("not a detector checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r, path)?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let config_len = read_u32(&mut r, path)? as usize;
        let mut config_bytes = vec![0u8; config_len];
        read_exact(&mut r, &mut config_bytes, path)?;
        let config: DetectorConfig = serde_json::from_slice(&config_bytes)
            .map_err(|e| fmt(format!("bad config block: {e}")))?;

        let tensor_count = read_u32(&mut r, path)? as usize;
        let mut stored: HashMap<String, ndarray::ArrayD<f64>> = HashMap::new();
        for _ in 0..tensor_count {
            let name_len = read_u32(&mut r, path)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(&mut r, &mut name_bytes, path)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| fmt(format!("bad tensor name: {e}")))?;
            let ndim = read_u32(&mut r, path)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u32(&mut r, path)? as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = vec![0.0f64; len];
            for v in &mut data {
                let mut buf = [0u8; 8];
                read_exact(&mut r, &mut buf, path)?;
                *v = f64::from_le_bytes(buf);
            }
            let t = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
                .map_err(|e| fmt(format!("tensor {name}: {e}")))?;
            if stored.insert(name.clone(), t).is_some() {
                return Err(fmt(format!("duplicate tensor {name}")));
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
            return Err(fmt("trailing bytes after last tensor".into()));
        }

        let mut model = DetectorModel::new(&config, 0)?;
        let mut assigned = 0usize;
        let mut status: Result<()> = Ok(());
        model.visit_params_mut(&mut |name, mut t| {
            if status.is_err() {
                return;
            }
            match stored.get(name) {
                Some(src) if src.raw_dim() == t.raw_dim() => {
                    t.assign(src);
                    assigned += 1;
                }
                Some(src) => {
                    status = Err(Error::format(
                        path,
                        format!(
                            "tensor {name}: shape {:?} does not match model {:?}",
                            src.shape(),
                            t.shape()
                        ),
                    ));
                }
                None => {
                    status = Err(Error::format(path, format!("missing tensor {name}")));
                }
            }
        });
        status?;
        if assigned != stored.len() {
            return Err(fmt(format!(
                "checkpoint has {} tensors but the model needs {assigned}",
                stored.len()
            )));
        }
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SYNTHDET";
const CHECKPOINT_VERSION: u32 = 1;

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(path, "truncated checkpoint")
        } else {
            Error::io(path, e)
        }
    })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

/// Groups patches by crop rectangle: returns the unique patch tensors and,
/// per original slot, the index of its unique representative. Patches with
/// equal rects on the same image are pixel-identical.
fn dedup_patches(
    patches: &[ImageTensor],
    proposals: &[PatchProposal],
) -> (Vec<ImageTensor>, Vec<usize>) {
    let mut index: HashMap<(u32, u32, u32, u32), usize> = HashMap::new();
    let mut unique = Vec::new();
    let mut slots = Vec::with_capacity(patches.len());
    for (patch, prop) in patches.iter().zip(proposals.iter()) {
        let r = prop.crop_rect.expect("selected proposals carry crop rects");
        let key = (r.x, r.y, r.w, r.h);
        let u = *index.entry(key).or_insert_with(|| {
            unique.push(patch.clone());
            unique.len() - 1
        });
        slots.push(u);
    }
    (unique, slots)
}

impl Params for DetectorModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.global_backbone.visit_params(&mut |n, t| f(&format!("global.{n}"), t));
        if let Some(l) = &self.local_backbone {
            l.visit_params(&mut |n, t| f(&format!("local.{n}"), t));
        }
        self.fusion.visit_params(&mut |n, t| f(&format!("fusion.{n}"), t));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.global_backbone.visit_params_mut(&mut |n, t| f(&format!("global.{n}"), t));
        if let Some(l) = self.local_backbone.as_mut() {
            l.visit_params_mut(&mut |n, t| f(&format!("local.{n}"), t));
        }
        self.fusion.visit_params_mut(&mut |n, t| f(&format!("fusion.{n}"), t));
    }
}

/// A small detector configuration used across tests: tiny backbones, two
/// fusion layers, two window scales with small patches.
pub fn test_config() -> DetectorConfig {
    DetectorConfig {
        backbone: BackboneConfig {
            architecture: "tiny".into(),
            embedding_dim: 16,
            shared_local_weights: false,
        },
        window_specs: vec![
            WindowSpec { height: 3, width: 3, stride: 1, n_select: 2, patch_px: 224 },
            WindowSpec { height: 2, width: 2, stride: 1, n_select: 2, patch_px: 112 },
        ],
        iou_threshold: DEFAULT_IOU_THRESHOLD,
        fusion: FusionConfig { layers: 2, heads: 2, ..Default::default() },
    }
}
