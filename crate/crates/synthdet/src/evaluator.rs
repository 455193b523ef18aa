//! Metrics and robustness harness: average precision over score rankings,
//! the model/family/global report hierarchy, per-image score dumps, and
//! blur/JPEG degradation sweeps.
//!
//! Grouping convention: every manifest entry carries a `model` field, reals
//! included — a model's AP pools that model's fakes with the reals sharing
//! its `model` value. A family's score is the unweighted mean over its
//! models with defined APs; the total is the unweighted mean over families.
//! Groups lacking a positive or a negative have no defined AP: they are
//! listed in the report and skipped with a warning, never silently dropped.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core::{load_image, ImageTensor, Label};
use crate::dataset::{gaussian_blur, jpeg_compress, ManifestEntry};
use crate::detector::DetectorModel;
use crate::error::{Error, Result};

/// Ranks by descending score (ties keep original order) and accumulates
/// precision at each positive rank: AP = sum over positive ranks k of
/// (precision at k) / (total positives). Needs both classes present.
pub fn average_precision(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let positives = labels.iter().filter(|l| **l == Label::Fake).count();
    if positives == 0 || positives == scores.len() {
        return Err(Error::invalid(
            "average precision is undefined without both a positive and a negative",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let mut seen_pos = 0usize;
    let mut ap = 0.0;
    for (rank0, &i) in order.iter().enumerate() {
        if labels[i] == Label::Fake {
            seen_pos += 1;
            ap += seen_pos as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(ap / positives as f64)
}

/// One scored test image, as dumped to and read from score files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredImage {
    pub path: PathBuf,
    pub label: Label,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_images: usize,
    pub global_ap: f64,
    pub per_model_ap: BTreeMap<String, f64>,
    pub per_family_map: BTreeMap<String, f64>,
    pub total_map: f64,
    /// Models/families whose AP is undefined (single-class pools); they are
    /// excluded from the means above.
    pub undefined_models: Vec<String>,
    pub undefined_families: Vec<String>,
    /// Perturbation name -> (parameter, global AP) curve; filled by
    /// [`robustness_sweep`], empty otherwise.
    pub robustness_curves: BTreeMap<String, Vec<(f64, f64)>>,
    /// Echo of the detector configuration the scores came from.
    pub config: serde_json::Value,
}

/// Scores every entry with the model, in manifest order. Parallelism is
/// order-preserving: each image is scored independently, so results do not
/// depend on the worker count.
pub fn score_entries(
    model: &DetectorModel,
    entries: &[ManifestEntry],
) -> Result<Vec<ScoredImage>> {
    entries
        .par_iter()
        .map(|e| {
            let img = load_image(&e.path)?;
            let (score, _) = model.forward(&img)?;
            Ok(ScoredImage { path: e.path.clone(), label: e.label, score })
        })
        .collect()
}

/// Scores a manifest and assembles the full report (no robustness curves).
pub fn evaluate(model: &DetectorModel, entries: &[ManifestEntry]) -> Result<EvalReport> {
    if entries.is_empty() {
        return Err(Error::invalid("manifest has no entries"));
    }
    let scored = score_entries(model, entries)?;
    let mut report = report_from_scores(entries, &scored)?;
    report.config = serde_json::to_value(&model.config)
        .map_err(|e| Error::invalid(format!("config echo failed: {e}")))?;
    Ok(report)
}

/// Builds the metric hierarchy from already-computed scores. `entries` and
/// `scored` must be parallel slices (as produced by [`score_entries`]).
pub fn report_from_scores(
    entries: &[ManifestEntry],
    scored: &[ScoredImage],
) -> Result<EvalReport> {
    if entries.len() != scored.len() {
        return Err(Error::invalid(format!(
            "{} entries vs {} scores",
            entries.len(),
            scored.len()
        )));
    }
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let labels: Vec<Label> = scored.iter().map(|s| s.label).collect();
    let global_ap = average_precision(&scores, &labels)?;

    // model -> indices, family -> its models.
    let mut by_model: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut family_models: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        by_model.entry(&e.model).or_default().push(i);
        let fam = family_models.entry(&e.family).or_default();
        if !fam.contains(&e.model.as_str()) {
            fam.push(&e.model);
        }
    }

    let mut per_model_ap = BTreeMap::new();
    let mut undefined_models = Vec::new();
    for (model, idxs) in &by_model {
        let s: Vec<f64> = idxs.iter().map(|&i| scores[i]).collect();
        let l: Vec<Label> = idxs.iter().map(|&i| labels[i]).collect();
        match average_precision(&s, &l) {
            Ok(ap) => {
                per_model_ap.insert(model.to_string(), ap);
            }
            Err(_) => {
                eprintln!("warning: AP undefined for model {model} (single-class pool)");
                undefined_models.push(model.to_string());
            }
        }
    }

    let mut per_family_map = BTreeMap::new();
    let mut undefined_families = Vec::new();
    for (family, models) in &family_models {
        let defined: Vec<f64> =
            models.iter().filter_map(|m| per_model_ap.get(*m).copied()).collect();
        if defined.is_empty() {
            eprintln!("warning: mAP undefined for family {family} (no defined model AP)");
            undefined_families.push(family.to_string());
        } else {
            per_family_map
                .insert(family.to_string(), defined.iter().sum::<f64>() / defined.len() as f64);
        }
    }
    if per_family_map.is_empty() {
        return Err(Error::invalid("no family has a defined AP"));
    }
    let total_map =
        per_family_map.values().sum::<f64>() / per_family_map.len() as f64;

    Ok(EvalReport {
        n_images: entries.len(),
        global_ap,
        per_model_ap,
        per_family_map,
        total_map,
        undefined_models,
        undefined_families,
        robustness_curves: BTreeMap::new(),
        config: serde_json::Value::Null,
    })
}

pub fn write_scores(path: impl AsRef<Path>, scored: &[ScoredImage]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in scored {
        let line = serde_json::to_string(s)
            .map_err(|e| Error::format(path, format!("score serialization failed: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoredImage>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: ScoredImage = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessSweepConfig {
    pub blur_sigmas: Vec<f64>,
    pub jpeg_qualities: Vec<u8>,
}

impl Default for RobustnessSweepConfig {
    fn default() -> Self {
        RobustnessSweepConfig {
            blur_sigmas: vec![0.0, 1.0, 2.0, 3.0],
            jpeg_qualities: vec![100, 90, 70, 50, 30],
        }
    }
}

impl RobustnessSweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blur_sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::invalid("blur sigmas must be finite and >= 0"));
        }
        if self.jpeg_qualities.iter().any(|q| *q == 0 || *q > 100) {
            return Err(Error::invalid("jpeg qualities must be in 1..=100"));
        }
        Ok(())
    }
}

fn global_ap_under(
    model: &DetectorModel,
    entries: &[ManifestEntry],
    perturb: impl Fn(&ImageTensor) -> Result<ImageTensor> + Sync,
) -> Result<f64> {
    let scored: Vec<(f64, Label)> = entries
        .par_iter()
        .map(|e| {
            let img = perturb(&load_image(&e.path)?)?;
            let (score, _) = model.forward(&img)?;
            Ok((score, e.label))
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let labels: Vec<Label> = scored.iter().map(|s| s.1).collect();
    average_precision(&scores, &labels)
}

/// Global AP under each blur sigma and JPEG quality. A sigma of 0 is an
/// exact identity, so that entry equals the unperturbed global AP bitwise.
pub fn robustness_sweep(
    model: &DetectorModel,
    entries: &[ManifestEntry],
    cfg: &RobustnessSweepConfig,
) -> Result<BTreeMap<String, Vec<(f64, f64)>>> {
    cfg.validate()?;
    if entries.is_empty() {
        return Err(Error::invalid("manifest has no entries"));
    }
    let mut curves = BTreeMap::new();
    let mut blur_curve = Vec::with_capacity(cfg.blur_sigmas.len());
    for &sigma in &cfg.blur_sigmas {
        let ap = global_ap_under(model, entries, |img| gaussian_blur(img, sigma))?;
        blur_curve.push((sigma, ap));
    }
    curves.insert("blur_sigma".to_string(), blur_curve);

    let mut jpeg_curve = Vec::with_capacity(cfg.jpeg_qualities.len());
    for &q in &cfg.jpeg_qualities {
        let ap = global_ap_under(model, entries, |img| jpeg_compress(img, q))?;
        jpeg_curve.push((q as f64, ap));
    }
    curves.insert("jpeg_quality".to_string(), jpeg_curve);
    Ok(curves)
}
