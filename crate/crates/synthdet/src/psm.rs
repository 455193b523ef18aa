//! Patch selection: turns a backbone feature map into a small set of
//! image-space crops covering the most active regions.
//!
//! Pipeline per window spec: channel-sum the feature map into an activation
//! map, mean-score every sliding window, suppress overlapping windows
//! greedily (IoU on feature-map rectangles), then map the survivors back to
//! pixel rectangles centered on the window center and crop.

use std::io::Write;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::core::{resize_bilinear, CropRect, FeatureMap, ImageTensor};
use crate::error::{Error, Result};

/// Per-cell activation: the feature map summed over channels.
#[derive(Debug, Clone)]
pub struct ActivationMap {
    pub data: Array2<f64>,
}

/// Sliding-window family: window extent and stride in feature-map cells,
/// how many windows survive selection, and the side length (in original
/// pixels) of the square patch cropped around each survivor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub n_select: usize,
    pub patch_px: u32,
}

/// The standard two-scale configuration: three 3x3 windows cropped at
/// 224 px and three 2x2 windows cropped at 112 px.
pub fn default_window_specs() -> Vec<WindowSpec> {
    vec![
        WindowSpec { height: 3, width: 3, stride: 1, n_select: 3, patch_px: 224 },
        WindowSpec { height: 2, width: 2, stride: 1, n_select: 3, patch_px: 112 },
    ]
}

/// Default overlap threshold above which the lower-scoring window is
/// suppressed.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.25;

/// A scored window, optionally already mapped to an image-space crop.
/// `window_x`/`window_y` are the window's top-left cell in feature-map
/// coordinates; `window_w`/`window_h` its extent in cells.
#[derive(Debug, Clone, Serialize)]
pub struct PatchProposal {
    pub window_x: usize,
    pub window_y: usize,
    pub window_w: usize,
    pub window_h: usize,
    pub patch_px: u32,
    pub score: f64,
    pub crop_rect: Option<CropRect>,
}

/// Sums feature channels into a single spatial activation map.
pub fn activation_map(feature: &FeatureMap) -> ActivationMap {
    ActivationMap { data: feature.data.sum_axis(Axis(0)) }
}

/// Scores every window position of `spec` on the activation map: the score
/// is the mean activation inside the window. Positions are returned in
/// row-major order (top-left first).
pub fn window_scores(map: &ActivationMap, spec: &WindowSpec) -> Result<Vec<PatchProposal>> {
    let (h, w) = map.data.dim();
    if spec.height == 0 || spec.width == 0 || spec.stride == 0 || spec.n_select == 0 {
        return Err(Error::invalid("window spec dimensions, stride, and n_select must be >= 1"));
    }
    if spec.height > h || spec.width > w {
        return Err(Error::invalid(format!(
            "window {}x{} exceeds feature map {h}x{w}",
            spec.height, spec.width
        )));
    }
    let denom = (spec.height * spec.width) as f64;
    let mut out = Vec::new();
    let mut wy = 0;
    while wy + spec.height <= h {
        let mut wx = 0;
        while wx + spec.width <= w {
            let mut sum = 0.0;
            for y in wy..wy + spec.height {
                for x in wx..wx + spec.width {
                    sum += map.data[[y, x]];
                }
            }
            out.push(PatchProposal {
                window_x: wx,
                window_y: wy,
                window_w: spec.width,
                window_h: spec.height,
                patch_px: spec.patch_px,
                score: sum / denom,
                crop_rect: None,
            });
            wx += spec.stride;
        }
        wy += spec.stride;
    }
    Ok(out)
}

/// Intersection-over-union of two window rectangles in feature-map cells.
pub fn window_iou(a: &PatchProposal, b: &PatchProposal) -> f64 {
    let ix = overlap(a.window_x, a.window_w, b.window_x, b.window_w);
    let iy = overlap(a.window_y, a.window_h, b.window_y, b.window_h);
    let inter = (ix * iy) as f64;
    let union = (a.window_w * a.window_h + b.window_w * b.window_h) as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn overlap(a0: usize, aw: usize, b0: usize, bw: usize) -> usize {
    let lo = a0.max(b0);
    let hi = (a0 + aw).min(b0 + bw);
    hi.saturating_sub(lo)
}

/// Greedy non-maximum suppression: proposals are visited in order of
/// descending score (ties broken row-major: smaller `window_y`, then
/// smaller `window_x`) and kept while their IoU with every already-kept
/// window is at most `iou_threshold`. Exactly `n_select` proposals are
/// returned; if fewer survive, the top survivor is duplicated to pad.
pub fn nms(
    proposals: &[PatchProposal],
    iou_threshold: f64,
    n_select: usize,
) -> Result<Vec<PatchProposal>> {
    if proposals.is_empty() {
        return Err(Error::invalid("nms requires at least one proposal"));
    }
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::invalid("iou_threshold must be in [0, 1]"));
    }
    if n_select == 0 {
        return Err(Error::invalid("n_select must be >= 1"));
    }
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&proposals[i], &proposals[j]);
        b.score
            .total_cmp(&a.score)
            .then(a.window_y.cmp(&b.window_y))
            .then(a.window_x.cmp(&b.window_x))
    });
    let mut kept: Vec<PatchProposal> = Vec::with_capacity(n_select);
    for idx in order {
        let cand = &proposals[idx];
        if kept.iter().all(|k| window_iou(k, cand) <= iou_threshold) {
            kept.push(cand.clone());
            if kept.len() == n_select {
                break;
            }
        }
    }
    while kept.len() < n_select {
        let top = kept[0].clone();
        kept.push(top);
    }
    Ok(kept)
}

/// Maps a window back to a square pixel crop on the original image: the
/// window center scales by (original / feature) per axis, and a
/// `patch_px`-sided square is centered there, then translated (never
/// shrunk) to lie fully inside the image. Sizes are `(width, height)` /
/// `(cells_x, cells_y)` pairs.
pub fn map_to_image(
    p: &PatchProposal,
    original_size: (u32, u32),
    feature_size: (usize, usize),
) -> Result<PatchProposal> {
    let (ow, oh) = original_size;
    let (fw, fh) = feature_size;
    if fw == 0 || fh == 0 {
        return Err(Error::invalid("feature map size must be non-zero"));
    }
    if p.patch_px == 0 || p.patch_px > ow || p.patch_px > oh {
        return Err(Error::invalid(format!(
            "patch size {} does not fit image {ow}x{oh}",
            p.patch_px
        )));
    }
    let cx = (p.window_x as f64 + p.window_w as f64 / 2.0) * ow as f64 / fw as f64;
    let cy = (p.window_y as f64 + p.window_h as f64 / 2.0) * oh as f64 / fh as f64;
    let half = p.patch_px as f64 / 2.0;
    let x = (cx - half).round().clamp(0.0, (ow - p.patch_px) as f64) as u32;
    let y = (cy - half).round().clamp(0.0, (oh - p.patch_px) as f64) as u32;
    let mut out = p.clone();
    out.crop_rect = Some(CropRect { x, y, w: p.patch_px, h: p.patch_px });
    Ok(out)
}

/// Full selection pipeline over several window specs. Crops come from
/// `image` (the original, pre-resize pixels) and are each resized to
/// `patch_out_px` square. Returns `sum(n_select)` patches; proposals keep
/// spec order, then selection order within a spec.
pub fn select_patches(
    feature: &FeatureMap,
    image: &ImageTensor,
    specs: &[WindowSpec],
    iou_threshold: f64,
    patch_out_px: u32,
) -> Result<(Vec<ImageTensor>, Vec<PatchProposal>)> {
    if specs.is_empty() {
        return Err(Error::invalid("select_patches needs at least one window spec"));
    }
    let amap = activation_map(feature);
    let (fh, fw) = amap.data.dim();
    let original = (image.width(), image.height());
    let mut patches = Vec::new();
    let mut proposals = Vec::new();
    for spec in specs {
        let scored = window_scores(&amap, spec)?;
        let kept = nms(&scored, iou_threshold, spec.n_select)?;
        for p in kept {
            let mapped = map_to_image(&p, original, (fw, fh))?;
            let rect = mapped.crop_rect.as_ref().expect("mapped proposal has a rect");
            let crop = image.crop(rect)?;
            patches.push(resize_bilinear(&crop, (patch_out_px, patch_out_px))?);
            proposals.push(mapped);
        }
    }
    Ok((patches, proposals))
}

/// Writes one JSONL record describing the selected windows of an image.
pub fn dump_proposals(
    out: &mut impl Write,
    image: &str,
    proposals: &[PatchProposal],
) -> Result<()> {
    #[derive(Serialize)]
    struct Record<'a> {
        image: &'a str,
        proposals: &'a [PatchProposal],
    }
    let line = serde_json::to_string(&Record { image, proposals })
        .map_err(|e| Error::Numeric(format!("proposal serialization failed: {e}")))?;
    writeln!(out, "{line}").map_err(|e| Error::io(image, e))
}
