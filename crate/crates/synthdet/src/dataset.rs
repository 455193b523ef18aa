//! Dataset access and synthesis: JSONL manifests, training-time
//! perturbations (Gaussian blur, JPEG re-encoding), and a self-contained toy
//! dataset generator for end-to-end runs without any external corpus.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core::{resize_bilinear, save_png, ImageTensor, Label};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, tag};

/// One manifest row. `path` has been resolved against the manifest's
/// directory; `family` groups generators (e.g. "gan", "diffusion") and
/// `model` names the specific generator, with reals carrying the `model`
/// value of the generator pool they are evaluated against.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
    pub family: String,
    pub model: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    path: String,
    label: Label,
    family: String,
    model: String,
}

/// Reads a JSONL manifest. Blank lines are skipped; any other deviation
/// (bad JSON, missing/unknown fields, label outside {0,1}, empty strings,
/// duplicate paths) is an error naming the offending line.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or_else(|| Path::new(""));
    let mut entries = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let raw: RawEntry = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {lineno}: {e}")))?;
        if raw.path.is_empty() || raw.family.is_empty() || raw.model.is_empty() {
            return Err(Error::format(
                path,
                format!("line {lineno}: path, family, and model must be non-empty"),
            ));
        }
        if !seen.insert(raw.path.clone()) {
            return Err(Error::format(
                path,
                format!("line {lineno}: duplicate path {:?}", raw.path),
            ));
        }
        let p = PathBuf::from(&raw.path);
        let resolved = if p.is_absolute() { p } else { dir.join(p) };
        entries.push(ManifestEntry {
            path: resolved,
            label: raw.label,
            family: raw.family,
            model: raw.model,
        });
    }
    Ok(entries)
}

/// Gaussian blur with a truncated, renormalized kernel (radius = ceil(3σ))
/// applied separably with mirrored (reflect-101) borders. `sigma == 0`
/// returns the image unchanged.
pub fn gaussian_blur(img: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::invalid(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for i in -(radius as isize)..=(radius as isize) {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }

    let (c, h, w) = img.data.dim();
    let reflect = |i: isize, n: usize| -> usize {
        // reflect-101: ..., 2, 1, 0, 1, 2, ..., n-1, n-2, ...
        let n = n as isize;
        let mut i = i;
        loop {
            if i < 0 {
                i = -i;
            } else if i >= n {
                i = 2 * n - 2 - i;
            } else {
                return i as usize;
            }
            if n == 1 {
                return 0;
            }
        }
    };

    // Horizontal pass, then vertical.
    let mut tmp = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + ki as isize - radius as isize, w);
                    acc += kv * img.data[[ch, y, sx]];
                }
                tmp[[ch, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + ki as isize - radius as isize, h);
                    acc += kv * tmp[[ch, sy, x]];
                }
                out[[ch, y, x]] = acc.clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(out, img.source_path.clone(), img.original_size)
}

/// Re-encodes through an in-memory JPEG at the given quality (1..=100) and
/// decodes back, preserving dimensions.
pub fn jpeg_compress(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    if !(1..=100).contains(&quality) {
        return Err(Error::invalid(format!("jpeg quality must be in 1..=100, got {quality}")));
    }
    let (w, h) = (img.width(), img.height());
    let mut rgb = image::RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                (img.data[[c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8
            });
            rgb.put_pixel(x, y, image::Rgb(px));
        }
    }
    let mut buf = Vec::new();
    let mut enc =
        image::codecs::jpeg::JpegEncoder::new_with_quality(std::io::Cursor::new(&mut buf), quality);
    enc.encode_image(&rgb)
        .map_err(|e| Error::Numeric(format!("jpeg encode failed: {e}")))?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)
        .map_err(|e| Error::Numeric(format!("jpeg decode failed: {e}")))?
        .to_rgb8();
    let mut data = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in decoded.enumerate_pixels() {
        for cch in 0..3 {
            data[[cch, y as usize, x as usize]] = px.0[cch] as f64 / 255.0;
        }
    }
    ImageTensor::new(data, img.source_path.clone(), img.original_size)
}

/// Training-time perturbation policy: with probability `apply_fraction` a
/// sample is blurred with σ ~ U[0, blur_sigma_max) and JPEG re-encoded with
/// quality ~ U{quality_min..=quality_max}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub apply_fraction: f64,
    pub blur_sigma_max: f64,
    pub jpeg_quality_min: u8,
    pub jpeg_quality_max: u8,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            apply_fraction: 0.1,
            blur_sigma_max: 3.0,
            jpeg_quality_min: 30,
            jpeg_quality_max: 100,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_fraction) {
            return Err(Error::invalid("apply_fraction must be in [0, 1]"));
        }
        if !self.blur_sigma_max.is_finite() || self.blur_sigma_max < 0.0 {
            return Err(Error::invalid("blur_sigma_max must be >= 0"));
        }
        if self.jpeg_quality_min < 1
            || self.jpeg_quality_max > 100
            || self.jpeg_quality_min > self.jpeg_quality_max
        {
            return Err(Error::invalid("jpeg quality range must satisfy 1 <= min <= max <= 100"));
        }
        Ok(())
    }
}

/// Applies the augmentation policy, reporting what was done: `None` when the
/// sample passed through untouched, otherwise the `(sigma, quality)` drawn.
/// The apply/skip decision consumes exactly one draw, so a fixed RNG stream
/// yields a fixed decision sequence regardless of image content.
pub fn augment_describe(
    img: &ImageTensor,
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
) -> Result<(ImageTensor, Option<(f64, u8)>)> {
    cfg.validate()?;
    if rng.gen::<f64>() >= cfg.apply_fraction {
        return Ok((img.clone(), None));
    }
    let sigma = rng.gen::<f64>() * cfg.blur_sigma_max;
    let quality = rng.gen_range(cfg.jpeg_quality_min..=cfg.jpeg_quality_max);
    let out = jpeg_compress(&gaussian_blur(img, sigma)?, quality)?;
    Ok((out, Some((sigma, quality))))
}

/// [`augment_describe`] without the report.
pub fn augment(
    img: &ImageTensor,
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
) -> Result<ImageTensor> {
    augment_describe(img, cfg, rng).map(|(img, _)| img)
}

/// Toy dataset parameters. Reals are smooth random color fields; fakes are
/// the same fields with a small checkerboard artifact planted at a random
/// location, mimicking a localized generator fingerprint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_real: usize,
    pub n_fake: usize,
    pub image_size: u32,
    pub artifact_size: u32,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { n_real: 100, n_fake: 100, image_size: 224, artifact_size: 16, seed: 0 }
    }
}

/// Ground-truth artifact location for one fake image, written as a sidecar
/// JSONL next to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

const CHECKER_AMPLITUDE: f64 = 0.25;

/// Smooth random field: coarse uniform noise upsampled bilinearly.
fn toy_field(seed: u64, index: u64, size: u32) -> Result<ImageTensor> {
    let coarse = (size / 8).max(2) as usize;
    let mut rng = derive_rng(seed, &[tag("toy-field"), index]);
    let data = Array3::from_shape_fn((3, coarse, coarse), |_| rng.gen::<f64>());
    let img = ImageTensor::from_array(data)?;
    resize_bilinear(&img, (size, size))
}

fn plant_checkerboard(img: &mut ImageTensor, x: u32, y: u32, size: u32) {
    for py in y..y + size {
        for px in x..x + size {
            let sign = if (px + py) % 2 == 0 { 1.0 } else { -1.0 };
            for c in 0..3 {
                let v = &mut img.data[[c, py as usize, px as usize]];
                *v = (*v + sign * CHECKER_AMPLITUDE).clamp(0.0, 1.0);
            }
        }
    }
}

/// Generates the toy dataset under `out_dir` and returns the manifest path.
///
/// Layout: `images/real_NNNN.png`, `images/fake_NNNN.png`, `manifest.jsonl`
/// (paths relative to the manifest), and `artifacts.jsonl` with the planted
/// rectangle of every fake. Fake `i` reuses the field of real `i`, so the
/// pair is pixel-identical outside the artifact. Output depends only on the
/// config, so equal configs produce byte-identical trees.
pub fn generate_toy_dataset(cfg: &ToyConfig, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    if cfg.image_size < 16 {
        return Err(Error::invalid("toy image_size must be >= 16"));
    }
    if cfg.artifact_size == 0 || cfg.artifact_size >= cfg.image_size {
        return Err(Error::invalid("artifact_size must be in 1..image_size"));
    }
    if cfg.n_real + cfg.n_fake == 0 {
        return Err(Error::invalid("toy dataset must contain at least one image"));
    }
    let out_dir = out_dir.as_ref();
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;

    let manifest_path = out_dir.join("manifest.jsonl");
    let sidecar_path = out_dir.join("artifacts.jsonl");
    let mut manifest = Vec::new();
    let mut sidecar = Vec::new();

    #[derive(Serialize)]
    struct Row<'a> {
        path: &'a str,
        label: u8,
        family: &'a str,
        model: &'a str,
    }

    for i in 0..cfg.n_real {
        let img = toy_field(cfg.seed, i as u64, cfg.image_size)?;
        let rel = format!("images/real_{i:04}.png");
        save_png(&img, images.join(format!("real_{i:04}.png")))?;
        manifest.push(serde_json::to_string(&Row {
            path: &rel,
            label: 0,
            family: "toy",
            model: "toy_checker",
        })
        .expect("row serializes"));
    }
    for i in 0..cfg.n_fake {
        let mut img = toy_field(cfg.seed, i as u64, cfg.image_size)?;
        let mut art_rng = derive_rng(cfg.seed, &[tag("toy-artifact"), i as u64]);
        let max_pos = cfg.image_size - cfg.artifact_size;
        let x = art_rng.gen_range(0..=max_pos);
        let y = art_rng.gen_range(0..=max_pos);
        plant_checkerboard(&mut img, x, y, cfg.artifact_size);
        let rel = format!("images/fake_{i:04}.png");
        save_png(&img, images.join(format!("fake_{i:04}.png")))?;
        manifest.push(serde_json::to_string(&Row {
            path: &rel,
            label: 1,
            family: "toy",
            model: "toy_checker",
        })
        .expect("row serializes"));
        sidecar.push(
            serde_json::to_string(&ArtifactRecord {
                path: rel,
                x,
                y,
                w: cfg.artifact_size,
                h: cfg.artifact_size,
            })
            .expect("record serializes"),
        );
    }

    let write_lines = |path: &Path, lines: &[String]| -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for line in lines {
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    };
    write_lines(&manifest_path, &manifest)?;
    write_lines(&sidecar_path, &sidecar)?;
    Ok(manifest_path)
}

/// Reads the artifact sidecar produced by [`generate_toy_dataset`].
pub fn read_artifact_sidecar(path: impl AsRef<Path>) -> Result<Vec<ArtifactRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ArtifactRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::load_image;
    use crate::rng::{derive_rng, tag};

    fn textured_image(size: usize, seed: u64) -> ImageTensor {
        let mut rng = derive_rng(seed, &[tag("dataset-test")]);
        let data = Array3::from_shape_fn((3, size, size), |_| rng.gen::<f64>());
        ImageTensor::from_array(data).unwrap()
    }

    #[test]
    fn blur_of_interior_impulse_matches_kernel_peak() {
        let mut data = Array3::zeros((3, 9, 9));
        data[[0, 4, 4]] = 1.0;
        let img = ImageTensor::from_array(data).unwrap();
        let out = gaussian_blur(&img, 1.0).unwrap();
        // Independent kernel recompute: radius 3, then the separable peak is
        // the squared 1-D center weight.
        let taps: Vec<f64> = (-3i32..=3).map(|i| (-(i * i) as f64 / 2.0).exp()).collect();
        let total: f64 = taps.iter().sum();
        let peak = (taps[3] / total).powi(2);
        assert!((out.data[[0, 4, 4]] - peak).abs() < 1e-12);
        // Mass is conserved while the kernel stays off the border.
        let mass: f64 = out.data.index_axis(ndarray::Axis(0), 0).sum();
        assert!((mass - 1.0).abs() < 1e-9);
        // Untouched channels stay zero.
        assert_eq!(out.data.index_axis(ndarray::Axis(0), 1).sum(), 0.0);
    }

    #[test]
    fn blur_zero_sigma_is_identity_and_negative_rejected() {
        let img = textured_image(12, 1);
        let same = gaussian_blur(&img, 0.0).unwrap();
        assert_eq!(img.data, same.data);
        assert!(gaussian_blur(&img, -0.5).is_err());
        assert!(gaussian_blur(&img, f64::NAN).is_err());
    }

    #[test]
    fn blur_smooths_and_stays_in_range() {
        let img = textured_image(24, 2);
        let out = gaussian_blur(&img, 2.0).unwrap();
        assert_eq!(out.data.dim(), img.data.dim());
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let var = |t: &ImageTensor| {
            let m = t.data.sum() / t.data.len() as f64;
            t.data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / t.data.len() as f64
        };
        assert!(var(&out) < var(&img) * 0.5);
    }

    #[test]
    fn jpeg_round_trip_quality_ordering() {
        let img = textured_image(32, 3);
        let hi = jpeg_compress(&img, 95).unwrap();
        let lo = jpeg_compress(&img, 10).unwrap();
        assert_eq!(hi.data.dim(), img.data.dim());
        let mse = |a: &ImageTensor, b: &ImageTensor| {
            a.data
                .iter()
                .zip(b.data.iter())
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                / a.data.len() as f64
        };
        assert!(mse(&hi, &img) < mse(&lo, &img));
        assert!(jpeg_compress(&img, 0).is_err());
        assert!(jpeg_compress(&img, 101).is_err());
    }

    #[test]
    fn jpeg_q100_is_nearly_lossless_on_smooth_content() {
        let img = toy_field(5, 0, 32).unwrap();
        let out = jpeg_compress(&img, 100).unwrap();
        let max_diff = img
            .data
            .iter()
            .zip(out.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 0.05, "max diff {max_diff}");
    }

    #[test]
    fn augment_hits_requested_fraction() {
        let cfg = AugmentationConfig { apply_fraction: 0.1, ..Default::default() };
        let img = textured_image(16, 4);
        let n = 10_000;
        let mut applied = 0usize;
        for i in 0..n {
            let mut rng = derive_rng(99, &[tag("augment"), 0, i as u64]);
            let (_, report) = augment_describe(&img, &cfg, &mut rng).unwrap();
            if report.is_some() {
                applied += 1;
            }
        }
        let p = 0.1f64;
        let tol = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
        let frac = applied as f64 / n as f64;
        assert!((frac - p).abs() <= tol, "fraction {frac} outside {p} +/- {tol}");
    }

    #[test]
    fn augment_draws_are_within_configured_ranges() {
        let cfg = AugmentationConfig {
            apply_fraction: 1.0,
            blur_sigma_max: 3.0,
            jpeg_quality_min: 30,
            jpeg_quality_max: 100,
        };
        let img = textured_image(16, 5);
        for i in 0..50u64 {
            let mut rng = derive_rng(7, &[tag("augment"), 1, i]);
            let (_, report) = augment_describe(&img, &cfg, &mut rng).unwrap();
            let (sigma, q) = report.expect("always applied");
            assert!((0.0..3.0).contains(&sigma));
            assert!((30..=100).contains(&q));
        }
        let off = AugmentationConfig { apply_fraction: 0.0, ..Default::default() };
        let mut rng = derive_rng(7, &[tag("augment"), 2]);
        let (out, report) = augment_describe(&img, &off, &mut rng).unwrap();
        assert!(report.is_none());
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn toy_dataset_layout_and_pairing() {
        let dir = tempfile::tempdir().unwrap();
        let cfg =
            ToyConfig { n_real: 3, n_fake: 3, image_size: 32, artifact_size: 8, seed: 17 };
        let manifest_path = generate_toy_dataset(&cfg, dir.path()).unwrap();
        let entries = read_manifest(&manifest_path).unwrap();
        assert_eq!(entries.len(), 6);
        assert_eq!(entries.iter().filter(|e| e.label == Label::Real).count(), 3);
        for e in &entries {
            assert!(e.path.exists(), "{:?}", e.path);
            assert_eq!(e.family, "toy");
        }

        let sidecar = read_artifact_sidecar(dir.path().join("artifacts.jsonl")).unwrap();
        assert_eq!(sidecar.len(), 3);
        for rec in &sidecar {
            assert!(rec.x + rec.w <= 32 && rec.y + rec.h <= 32);
        }

        // Real/fake pair i shares pixels exactly outside the planted rect.
        let real = load_image(dir.path().join("images/real_0000.png")).unwrap();
        let fake = load_image(dir.path().join("images/fake_0000.png")).unwrap();
        let rect = &sidecar[0];
        let mut inside_diff = 0usize;
        for y in 0..32usize {
            for x in 0..32usize {
                let inside = (x as u32) >= rect.x
                    && (x as u32) < rect.x + rect.w
                    && (y as u32) >= rect.y
                    && (y as u32) < rect.y + rect.h;
                for c in 0..3 {
                    let same = real.data[[c, y, x]] == fake.data[[c, y, x]];
                    if inside {
                        if !same {
                            inside_diff += 1;
                        }
                    } else {
                        assert!(same, "pixel ({x},{y}) differs outside artifact");
                    }
                }
            }
        }
        assert!(inside_diff > 8 * 8, "artifact barely visible: {inside_diff} diffs");
    }

    #[test]
    fn toy_dataset_is_bytewise_reproducible() {
        let cfg = ToyConfig { n_real: 2, n_fake: 2, image_size: 32, artifact_size: 6, seed: 5 };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_toy_dataset(&cfg, d1.path()).unwrap();
        generate_toy_dataset(&cfg, d2.path()).unwrap();
        for rel in
            ["manifest.jsonl", "artifacts.jsonl", "images/real_0001.png", "images/fake_0001.png"]
        {
            let a = std::fs::read(d1.path().join(rel)).unwrap();
            let b = std::fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between runs");
        }
        let other = ToyConfig { seed: 6, ..cfg };
        let d3 = tempfile::tempdir().unwrap();
        generate_toy_dataset(&other, d3.path()).unwrap();
        let a = std::fs::read(d1.path().join("images/real_0000.png")).unwrap();
        let b = std::fs::read(d3.path().join("images/real_0000.png")).unwrap();
        assert_ne!(a, b, "different seeds must differ");
    }

    #[test]
    fn manifest_schema_violations_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, content: &str| {
            let p = dir.path().join(name);
            std::fs::write(&p, content).unwrap();
            p
        };

        let ok = write(
            "ok.jsonl",
            "{\"path\":\"a.png\",\"label\":0,\"family\":\"f\",\"model\":\"m\"}\n\n{\"path\":\"b.png\",\"label\":1,\"family\":\"f\",\"model\":\"m\"}\n",
        );
        let entries = read_manifest(&ok).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].path, dir.path().join("a.png"));

        let missing = write("missing.jsonl", "{\"path\":\"a.png\",\"label\":0,\"family\":\"f\"}\n");
        let err = read_manifest(&missing).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");

        let bad_label = write(
            "label.jsonl",
            "{\"path\":\"a.png\",\"label\":0,\"family\":\"f\",\"model\":\"m\"}\n{\"path\":\"b.png\",\"label\":2,\"family\":\"f\",\"model\":\"m\"}\n",
        );
        let err = read_manifest(&bad_label).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");

        let dup = write(
            "dup.jsonl",
            "{\"path\":\"a.png\",\"label\":0,\"family\":\"f\",\"model\":\"m\"}\n{\"path\":\"a.png\",\"label\":1,\"family\":\"f\",\"model\":\"m\"}\n",
        );
        let err = read_manifest(&dup).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");

        let junk = write("junk.jsonl", "not json\n");
        assert!(read_manifest(&junk).is_err());

        let unknown = write(
            "unknown.jsonl",
            "{\"path\":\"a.png\",\"label\":0,\"family\":\"f\",\"model\":\"m\",\"extra\":1}\n",
        );
        assert!(read_manifest(&unknown).is_err());
    }
}
