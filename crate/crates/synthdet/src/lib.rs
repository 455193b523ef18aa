//! Detection of AI-synthesized images by fusing a whole-image feature branch
//! with local features from automatically selected patches.
//!
//! The pipeline: a global backbone embeds the full image and produces a
//! spatial feature map; a patch selection stage scores sliding windows on
//! that map, keeps the strongest non-overlapping ones, and maps them back to
//! image-space crops; a local backbone embeds each crop; a multi-head
//! attention stack fuses global and patch embeddings into one token set and
//! a linear head scores it. Everything — training included — runs on plain
//! f64 CPU code with explicit backward passes, deterministically for a
//! given seed.

pub mod affm;
pub mod backbone;
pub mod cli;
pub mod core;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod evaluator;
pub mod nn;
pub mod psm;
pub mod rng;
pub mod trainer;

pub use crate::core::{
    load_image, resize_bilinear, save_png, CropRect, Embedding, EmbeddingKind, EmbeddingSet,
    FeatureMap, ImageTensor, Label, EMBED_DIM,
};
pub use crate::detector::{DetectorConfig, DetectorModel};
pub use crate::error::{Error, Result};
