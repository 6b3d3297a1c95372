//! Turning annotated source images into labeled square patches: HSV
//! conversion, Otsu foreground segmentation, grid extraction, normalization
//! and geometric augmentation.

mod dataset;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor, TensorError};

pub use dataset::{
    assign_split, check_leakage, label_counts, load_source, read_manifest, read_split,
    save_gray_png, save_rgb_png, write_dataset, ManifestRow, PatchSet, Split, CLASS_DIRS,
    MANIFEST, MANIFEST_HEADER,
};

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("data leakage: source {source_id} appears in {first} and {second}")]
    Leakage {
        source_id: String,
        first: Split,
        second: Split,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{path}: {source}")]
    Image {
        path: String,
        source: image::ImageError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = PreprocessError> = std::result::Result<T, E>;

/// Annotation codes stored in mask images.
pub const MASK_BACKGROUND: u8 = 0;
pub const MASK_ARTIFACT_FREE: u8 = 1;
pub const MASK_AIR_BUBBLES: u8 = 2;

/// Class label of artifact-free tissue.
pub const LABEL_ARTIFACT_FREE: usize = 0;
/// Class label of air-bubble patches; the positive class.
pub const LABEL_AIR_BUBBLES: usize = 1;

/// An 8-bit RGB image with an optional per-pixel annotation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceImage {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB.
    pub rgb: Vec<u8>,
    pub mask: Option<Vec<u8>>,
}

impl SourceImage {
    pub fn new(
        id: impl Into<String>,
        width: usize,
        height: usize,
        rgb: Vec<u8>,
        mask: Option<Vec<u8>>,
    ) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(PreprocessError::Contract(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                rgb.len()
            )));
        }
        if let Some(m) = &mask {
            if m.len() != width * height {
                return Err(PreprocessError::Contract(format!(
                    "mask has {} pixels, image has {}",
                    m.len(),
                    width * height
                )));
            }
        }
        Ok(SourceImage {
            id: id.into(),
            width,
            height,
            rgb,
            mask,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hsv {
    /// Degrees in `[0, 360)`.
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

pub fn rgb_to_hsv([r, g, b]: [u8; 3]) -> Hsv {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let v = max as f64 / 255.0;
    if max == 0 {
        return Hsv { h: 0.0, s: 0.0, v };
    }
    let delta = (max - min) as f64;
    let s = delta / max as f64;
    if delta == 0.0 {
        return Hsv { h: 0.0, s, v };
    }
    let (r, g, b) = (r as f64, g as f64, b as f64);
    let sector = if max as f64 == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max as f64 == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    Hsv {
        h: (sector * 60.0) % 360.0,
        s,
        v,
    }
}

/// Value channel scaled to 0..=255: exactly `max(R, G, B)`.
pub fn value_channel(img: &SourceImage) -> Vec<u8> {
    img.rgb.chunks_exact(3).map(|p| p[0].max(p[1]).max(p[2])).collect()
}

pub fn histogram(values: &[u8]) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &v in values {
        h[v as usize] += 1;
    }
    h
}

/// Threshold `t` maximizing the between-class variance of the split
/// `{v <= t}` / `{v > t}`. Ties resolve to the smallest `t`.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<u8> {
    let populated = hist.iter().filter(|&&c| c > 0).count();
    if populated < 2 {
        return Err(PreprocessError::Degenerate(format!(
            "Otsu thresholding needs at least two populated intensity levels, found {populated}"
        )));
    }
    let n: i128 = hist.iter().map(|&c| c as i128).sum();
    let total: i128 = hist.iter().enumerate().map(|(i, &c)| i as i128 * c as i128).sum();
    let (mut w0, mut s0) = (0i128, 0i128);
    let mut best = (f64::NEG_INFINITY, 0u8);
    for t in 0..255usize {
        w0 += hist[t] as i128;
        s0 += t as i128 * hist[t] as i128;
        let w1 = n - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        // N² w0 w1 (mu0 - mu1)² = (s0 N - S w0)² / (w0 w1)
        let num = (s0 * n - total * w0) as f64;
        let score = num * num / (w0 as f64 * w1 as f64);
        if score > best.0 {
            best = (score, t as u8);
        }
    }
    Ok(best.1)
}

/// Tissue mask: pixels whose value is at or below the Otsu threshold.
/// Returns the mask and the threshold.
pub fn foreground_mask(img: &SourceImage) -> Result<(Vec<bool>, u8)> {
    let v = value_channel(img);
    let t = otsu_threshold(&histogram(&v))?;
    Ok((v.iter().map(|&x| x <= t).collect(), t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_size: usize,
    /// Minimum fraction of a cell covered by one annotation class.
    pub overlap_threshold: f64,
    /// Minimum fraction of a cell that is tissue foreground.
    pub foreground_threshold: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            patch_size: 224,
            overlap_threshold: 0.70,
            foreground_threshold: 0.70,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(PreprocessError::Parameter("patch_size must be positive".into()));
        }
        for (name, v) in [
            ("overlap_threshold", self.overlap_threshold),
            ("foreground_threshold", self.foreground_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PreprocessError::Parameter(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub source_id: String,
    pub grid_y: usize,
    pub grid_x: usize,
    /// Top-left pixel of the cell.
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub label: usize,
    pub overlap_fraction: f64,
    pub foreground_fraction: f64,
    /// `size * size * 3` RGB bytes.
    pub pixels: Vec<u8>,
}

/// Cuts the image into an origin-anchored grid of `patch_size` cells and
/// keeps cells covered by exactly one annotation class at the overlap
/// threshold and by enough tissue. Partial cells at the right and bottom
/// edges are dropped.
pub fn extract_patches(img: &SourceImage, cfg: &PatchConfig) -> Result<Vec<PatchRecord>> {
    cfg.validate()?;
    let mask = img.mask.as_ref().ok_or_else(|| {
        PreprocessError::Contract(format!("source {} has no annotation mask", img.id))
    })?;
    let p = cfg.patch_size;
    if p > img.width.min(img.height) {
        return Err(PreprocessError::Contract(format!(
            "patch size {p} exceeds the {}x{} image {}",
            img.width, img.height, img.id
        )));
    }
    let (fg, _) = foreground_mask(img)?;
    let area = (p * p) as f64;
    let mut out = Vec::new();
    for gy in 0..img.height / p {
        for gx in 0..img.width / p {
            let (x0, y0) = (gx * p, gy * p);
            let mut class = [0usize; 3];
            let mut tissue = 0usize;
            for y in y0..y0 + p {
                for x in x0..x0 + p {
                    let i = y * img.width + x;
                    if let code @ (MASK_ARTIFACT_FREE | MASK_AIR_BUBBLES) = mask[i] {
                        class[code as usize] += 1;
                    }
                    tissue += fg[i] as usize;
                }
            }
            let hits: Vec<usize> = [MASK_ARTIFACT_FREE, MASK_AIR_BUBBLES]
                .into_iter()
                .filter(|&k| class[k as usize] as f64 / area >= cfg.overlap_threshold)
                .map(|k| k as usize)
                .collect();
            let foreground_fraction = tissue as f64 / area;
            if hits.len() != 1 || foreground_fraction < cfg.foreground_threshold {
                continue;
            }
            let code = hits[0];
            let mut pixels = Vec::with_capacity(p * p * 3);
            for y in y0..y0 + p {
                let row = (y * img.width + x0) * 3;
                pixels.extend_from_slice(&img.rgb[row..row + p * 3]);
            }
            out.push(PatchRecord {
                source_id: img.id.clone(),
                grid_y: gy,
                grid_x: gx,
                x: x0,
                y: y0,
                size: p,
                label: if code == MASK_AIR_BUBBLES as usize {
                    LABEL_AIR_BUBBLES
                } else {
                    LABEL_ARTIFACT_FREE
                },
                overlap_fraction: class[code] as f64 / area,
                foreground_fraction,
                pixels,
            });
        }
    }
    Ok(out)
}

/// Per-channel normalization constants applied to `pixel / 255`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    /// ImageNet channel statistics.
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(PreprocessError::Parameter(format!(
                "std components must be positive, got {:?}",
                self.std
            )));
        }
        Ok(())
    }

    /// Interleaved RGB bytes to normalized values in the same layout.
    pub fn apply<F: Scalar>(&self, rgb: &[u8]) -> Result<Vec<F>> {
        self.validate()?;
        Ok(rgb
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i % 3;
                F::from_f64((v as f64 / 255.0 - self.mean[c]) / self.std[c])
            })
            .collect())
    }

    /// Inverse of [`Normalization::apply`], in `pixel / 255` units.
    pub fn invert<F: Scalar>(&self, values: &[F]) -> Vec<f64> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = i % 3;
                v.as_f64() * self.std[c] + self.mean[c]
            })
            .collect()
    }
}

/// Stacks square RGB patches into a normalized `[B, size, size, 3]` batch.
pub fn batch_tensor<F: Scalar>(
    patches: &[&[u8]],
    size: usize,
    norm: &Normalization,
) -> Result<Tensor<F>> {
    let mut data = Vec::with_capacity(patches.len() * size * size * 3);
    for p in patches {
        if p.len() != size * size * 3 {
            return Err(PreprocessError::Contract(format!(
                "patch has {} bytes, expected {}",
                p.len(),
                size * size * 3
            )));
        }
        data.extend(norm.apply::<F>(p)?);
    }
    Ok(Tensor::from_vec(data, &[patches.len(), size, size, 3])?)
}

/// The geometric transform drawn by [`augment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns.
    pub quarter_turns: u8,
}

impl Augmentation {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Augmentation {
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
            quarter_turns: rng.gen_range(0..4),
        }
    }

    /// Applies the flips, then the rotation, to a square interleaved image.
    pub fn apply<T: Copy>(&self, img: &[T], size: usize, channels: usize) -> Vec<T> {
        let mut out = img.to_vec();
        if self.hflip {
            out = hflip(&out, size, channels);
        }
        if self.vflip {
            out = vflip(&out, size, channels);
        }
        for _ in 0..self.quarter_turns {
            out = rotate90(&out, size, channels);
        }
        out
    }
}

fn remap<T: Copy>(
    img: &[T],
    size: usize,
    channels: usize,
    src: impl Fn(usize, usize) -> (usize, usize),
) -> Vec<T> {
    let mut out = Vec::with_capacity(img.len());
    for y in 0..size {
        for x in 0..size {
            let (sx, sy) = src(x, y);
            let i = (sy * size + sx) * channels;
            out.extend_from_slice(&img[i..i + channels]);
        }
    }
    out
}

pub fn hflip<T: Copy>(img: &[T], size: usize, channels: usize) -> Vec<T> {
    remap(img, size, channels, |x, y| (size - 1 - x, y))
}

pub fn vflip<T: Copy>(img: &[T], size: usize, channels: usize) -> Vec<T> {
    remap(img, size, channels, |x, y| (x, size - 1 - y))
}

/// Quarter turn counter-clockwise.
pub fn rotate90<T: Copy>(img: &[T], size: usize, channels: usize) -> Vec<T> {
    remap(img, size, channels, |x, y| (size - 1 - y, x))
}

/// Random flips and right-angle rotation of a square RGB patch.
pub fn augment(patch: &[u8], size: usize, rng: &mut impl Rng) -> Vec<u8> {
    Augmentation::sample(rng).apply(patch, size, 3)
}

#[cfg(test)]
mod tests;
