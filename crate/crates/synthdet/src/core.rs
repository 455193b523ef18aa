//! Shared data model: images as channel-first float tensors, backbone
//! feature maps, embeddings, and class labels.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default width of global and patch embeddings, and of the fusion stack.
pub const EMBED_DIM: usize = 128;

/// Binary class label: reals are 0, synthesized images are 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    /// Regression target used by the binary cross-entropy loss.
    pub fn target(self) -> f64 {
        self.as_u8() as f64
    }
}

impl TryFrom<u8> for Label {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Real),
            1 => Ok(Label::Fake),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.as_u8()
    }
}

/// Axis-aligned pixel rectangle, `x`/`y` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// An RGB image as `[3, H, W]` float data in `[0, 1]`.
///
/// `source_path` is empty for synthetic tensors. `original_size` records the
/// `(width, height)` the source file had at load time and is carried through
/// resizes and crops unchanged, so patch geometry can always be expressed in
/// original pixel coordinates.
#[derive(Debug, Clone)]
pub struct ImageTensor {
    pub data: Array3<f64>,
    pub source_path: String,
    pub original_size: (u32, u32),
}

impl ImageTensor {
    /// Validates channel count, finiteness, and value range.
    pub fn new(data: Array3<f64>, source_path: String, original_size: (u32, u32)) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(Error::Shape {
                expected: "[3, H, W]".into(),
                actual: format!("[{c}, {h}, {w}]"),
            });
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid("image has zero height or width"));
        }
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Numeric(format!(
                    "image value {v} outside [0, 1] (source: {source_path:?})"
                )));
            }
        }
        Ok(ImageTensor { data, source_path, original_size })
    }

    /// Wraps an in-memory array; `original_size` is taken from its dims.
    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        let (_, h, w) = data.dim();
        ImageTensor::new(data, String::new(), (w as u32, h as u32))
    }

    pub fn width(&self) -> u32 {
        self.data.dim().2 as u32
    }

    pub fn height(&self) -> u32 {
        self.data.dim().1 as u32
    }

    /// Copies out `rect`, which must lie fully inside the image.
    pub fn crop(&self, rect: &CropRect) -> Result<ImageTensor> {
        let (x, y, w, h) = (rect.x as usize, rect.y as usize, rect.w as usize, rect.h as usize);
        if w == 0 || h == 0 {
            return Err(Error::invalid(format!("empty crop rect {rect:?}")));
        }
        if x + w > self.width() as usize || y + h > self.height() as usize {
            return Err(Error::invalid(format!(
                "crop rect {rect:?} exceeds image {}x{}",
                self.width(),
                self.height()
            )));
        }
        let data = self.data.slice(ndarray::s![.., y..y + h, x..x + w]).to_owned();
        Ok(ImageTensor {
            data,
            source_path: self.source_path.clone(),
            original_size: self.original_size,
        })
    }
}

/// Spatial feature map `[C, H_f, W_f]` produced by a backbone; `source`
/// names which backbone/stage it came from.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Global,
    Patch,
}

/// A fixed-width feature vector for one image or one patch.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub data: Array1<f64>,
    pub kind: EmbeddingKind,
}

/// One global embedding plus the patch embeddings selected for the same
/// image, in selection order. This is the fusion stack's input token set.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub global: Embedding,
    pub patches: Vec<Embedding>,
}

impl EmbeddingSet {
    pub fn new(global: Embedding, patches: Vec<Embedding>) -> Result<Self> {
        if global.kind != EmbeddingKind::Global {
            return Err(Error::invalid("first embedding must be the global one"));
        }
        let d = global.data.len();
        for (i, p) in patches.iter().enumerate() {
            if p.kind != EmbeddingKind::Patch {
                return Err(Error::invalid(format!("embedding {i} is not a patch embedding")));
            }
            if p.data.len() != d {
                return Err(Error::Shape {
                    expected: format!("patch embedding of dim {d}"),
                    actual: format!("dim {} at index {i}", p.data.len()),
                });
            }
        }
        Ok(EmbeddingSet { global, patches })
    }

    /// Stacks the set into a token matrix `[1 + n_patches, d]`, global first.
    pub fn token_matrix(&self) -> Array2<f64> {
        let d = self.global.data.len();
        let n = 1 + self.patches.len();
        let mut m = Array2::zeros((n, d));
        m.row_mut(0).assign(&self.global.data);
        for (i, p) in self.patches.iter().enumerate() {
            m.row_mut(i + 1).assign(&p.data);
        }
        m
    }
}

/// Loads an image file, converting grayscale or RGBA to RGB and scaling to
/// `[0, 1]` floats.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut data = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    ImageTensor::new(data, path.display().to_string(), (w, h))
}

/// Quantizes to 8-bit RGB and writes a PNG.
pub fn save_png(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width(), img.height());
    let mut buf = image::RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                (img.data[[c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8
            });
            buf.put_pixel(x, y, image::Rgb(px));
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Bilinear resize to `(width, height)` with half-pixel sample centers and
/// edge clamping. Resizing to the current size returns a copy unchanged.
pub fn resize_bilinear(img: &ImageTensor, size: (u32, u32)) -> Result<ImageTensor> {
    let (dst_w, dst_h) = (size.0 as usize, size.1 as usize);
    if dst_w == 0 || dst_h == 0 {
        return Err(Error::invalid("resize target has zero dimension"));
    }
    let (_, src_h, src_w) = img.data.dim();
    if (dst_w, dst_h) == (src_w, src_h) {
        return Ok(img.clone());
    }

    // Per-axis taps: source index pair and interpolation weight.
    let axis_taps = |src: usize, dst: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|d| {
                let pos = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let tx = axis_taps(src_w, dst_w);
    let ty = axis_taps(src_h, dst_h);

    let mut out = Array3::zeros((3, dst_h, dst_w));
    for c in 0..3 {
        let plane = img.data.index_axis(Axis(0), c);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[[y0, x0]] * (1.0 - fx) + plane[[y0, x1]] * fx;
                let bot = plane[[y1, x0]] * (1.0 - fx) + plane[[y1, x1]] * fx;
                out[[c, oy, ox]] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(out, img.source_path.clone(), img.original_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, tag};
    use rand::Rng;

    fn ramp_image(w: usize, h: usize) -> ImageTensor {
        // Horizontal ramp, identical across channels and rows.
        let data = Array3::from_shape_fn((3, h, w), |(_, _, x)| x as f64 / (w - 1) as f64);
        ImageTensor::from_array(data).unwrap()
    }

    #[test]
    fn identity_resize_is_exact() {
        let mut rng = derive_rng(3, &[tag("core-test")]);
        let data = Array3::from_shape_fn((3, 9, 11), |_| rng.gen::<f64>());
        let img = ImageTensor::from_array(data).unwrap();
        let same = resize_bilinear(&img, (11, 9)).unwrap();
        assert_eq!(img.data, same.data);
    }

    #[test]
    fn downscale_of_linear_ramp_interpolates_linearly() {
        // Bilinear interpolation reproduces a linear function exactly away
        // from clamped borders: out(x) = ((x + 0.5) * 2 - 0.5) / 7 for 8 -> 4.
        let img = ramp_image(8, 4);
        let out = resize_bilinear(&img, (4, 2)).unwrap();
        for ox in 0..4usize {
            let pos = ((ox as f64 + 0.5) * 2.0 - 0.5).clamp(0.0, 7.0);
            let expect = pos / 7.0;
            let got = out.data[[0, 0, ox]];
            assert!((got - expect).abs() < 1e-12, "x={ox}: {got} vs {expect}");
        }
    }

    #[test]
    fn two_by_two_collapses_to_mean() {
        let mut data = Array3::zeros((3, 2, 2));
        for c in 0..3 {
            data[[c, 0, 0]] = 0.1;
            data[[c, 0, 1]] = 0.3;
            data[[c, 1, 0]] = 0.5;
            data[[c, 1, 1]] = 0.9;
        }
        let img = ImageTensor::from_array(data).unwrap();
        let out = resize_bilinear(&img, (1, 1)).unwrap();
        assert!((out.data[[0, 0, 0]] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn upscale_stays_in_range_and_keeps_original_size() {
        let img = ramp_image(5, 5);
        let up = resize_bilinear(&img, (13, 7)).unwrap();
        assert_eq!(up.data.dim(), (3, 7, 13));
        assert_eq!(up.original_size, (5, 5));
        assert!(up.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn crop_bounds_are_enforced() {
        let img = ramp_image(8, 6);
        let ok = img.crop(&CropRect { x: 2, y: 1, w: 4, h: 3 }).unwrap();
        assert_eq!(ok.data.dim(), (3, 3, 4));
        assert_eq!(ok.data[[0, 0, 0]], img.data[[0, 1, 2]]);
        assert!(img.crop(&CropRect { x: 5, y: 0, w: 4, h: 2 }).is_err());
        assert!(img.crop(&CropRect { x: 0, y: 0, w: 1, h: 0 }).is_err());
    }

    #[test]
    fn constructor_rejects_bad_tensors() {
        assert!(ImageTensor::from_array(Array3::zeros((1, 4, 4))).is_err());
        let mut data = Array3::zeros((3, 4, 4));
        data[[0, 0, 0]] = 1.5;
        assert!(ImageTensor::from_array(data.clone()).is_err());
        data[[0, 0, 0]] = f64::NAN;
        assert!(ImageTensor::from_array(data).is_err());
    }

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.png");
        let mut rng = derive_rng(11, &[tag("core-test")]);
        let data = Array3::from_shape_fn((3, 6, 5), |_| rng.gen::<f64>());
        let img = ImageTensor::from_array(data).unwrap();
        save_png(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.data.dim(), (3, 6, 5));
        assert_eq!(back.original_size, (5, 6));
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            let quantized = (a * 255.0).round() / 255.0;
            assert!((quantized - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grayscale_files_load_as_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let gray = image::GrayImage::from_fn(4, 3, |x, y| image::Luma([(x * 20 + y) as u8]));
        gray.save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.data.dim(), (3, 3, 4));
        for y in 0..3 {
            for x in 0..4 {
                let v = img.data[[0, y, x]];
                assert_eq!(v, img.data[[1, y, x]]);
                assert_eq!(v, img.data[[2, y, x]]);
            }
        }
    }

    #[test]
    fn label_codec_round_trips() {
        assert_eq!(Label::try_from(0u8).unwrap(), Label::Real);
        assert_eq!(Label::try_from(1u8).unwrap(), Label::Fake);
        assert!(Label::try_from(2u8).is_err());
        assert_eq!(Label::Fake.target(), 1.0);
        let json = serde_json::to_string(&Label::Fake).unwrap();
        assert_eq!(json, "1");
        let back: Label = serde_json::from_str("0").unwrap();
        assert_eq!(back, Label::Real);
    }

    #[test]
    fn embedding_set_validates_kinds_and_dims() {
        let g = Embedding { data: Array1::zeros(8), kind: EmbeddingKind::Global };
        let p = Embedding { data: Array1::zeros(8), kind: EmbeddingKind::Patch };
        let bad_dim = Embedding { data: Array1::zeros(7), kind: EmbeddingKind::Patch };
        assert!(EmbeddingSet::new(g.clone(), vec![p.clone(), p.clone()]).is_ok());
        assert!(EmbeddingSet::new(p.clone(), vec![]).is_err());
        assert!(EmbeddingSet::new(g.clone(), vec![bad_dim]).is_err());
        let set = EmbeddingSet::new(g, vec![p.clone(), p]).unwrap();
        let m = set.token_matrix();
        assert_eq!(m.dim(), (3, 8));
    }
}
