//! Synthetic stained-tissue images with air-bubble artifacts and pixel-exact
//! annotation masks.
//!
//! Each image is an elliptical patch of pink-purple tissue on a pale glass
//! background. Tissue colour mixes two stain tones by low-frequency value
//! noise, plus per-pixel jitter. Bubbles are disks inside the tissue,
//! brightened toward a pale tone and bordered by a darker rim.
//!
//! Corpus layout:
//!
//! ```text
//! <root>/<split>/images/<id>.png
//! <root>/<split>/masks/<id>.png
//! <root>/corpus.tsv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::par;
use crate::preprocess::{
    save_gray_png, save_rgb_png, PreprocessError, SourceImage, Split, MASK_AIR_BUBBLES,
    MASK_ARTIFACT_FREE, MASK_BACKGROUND,
};
use crate::rng;

pub const CORPUS_INDEX: &str = "corpus.tsv";
pub const CORPUS_HEADER: &str = "id\tsplit\tseed";

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Image(#[from] PreprocessError),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub image_size: usize,
    /// Glass margin between the tissue ellipse and the image border, px.
    pub margin: usize,
    /// Expected bubbles per 10 000 px² of tissue.
    pub bubble_density: f64,
    pub bubble_radius_min: f64,
    pub bubble_radius_max: f64,
    /// Rim width as a fraction of the bubble radius.
    pub rim_fraction: f64,
    /// Blend weight toward the pale bubble tone, in `[0, 1]`.
    pub bubble_contrast: f64,
    /// Lattice spacing of the stain noise, px.
    pub noise_scale: f64,
    /// Uniform per-pixel jitter amplitude, in 8-bit levels.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_images: 10,
            val_images: 3,
            test_images: 3,
            image_size: 128,
            margin: 8,
            bubble_density: 1.0,
            bubble_radius_min: 14.0,
            bubble_radius_max: 30.0,
            rim_fraction: 0.15,
            bubble_contrast: 0.45,
            noise_scale: 24.0,
            jitter: 18.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.image_size == 0 || 2 * self.margin >= self.image_size {
            return bad(format!(
                "image_size {} leaves no tissue inside a {} px margin",
                self.image_size, self.margin
            ));
        }
        if !(self.bubble_density >= 0.0 && self.bubble_density.is_finite()) {
            return bad(format!("bubble_density must be >= 0, got {}", self.bubble_density));
        }
        if !(self.bubble_radius_min > 0.0 && self.bubble_radius_min <= self.bubble_radius_max) {
            return bad(format!(
                "bubble radius range [{}, {}] is empty or nonpositive",
                self.bubble_radius_min, self.bubble_radius_max
            ));
        }
        for (name, v) in [
            ("rim_fraction", self.rim_fraction),
            ("bubble_contrast", self.bubble_contrast),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.noise_scale > 0.0) || !(self.jitter >= 0.0) {
            return bad("noise_scale must be positive and jitter nonnegative".into());
        }
        Ok(())
    }

    pub fn images_in(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_images,
            Split::Val => self.val_images,
            Split::Test => self.test_images,
        }
    }

    fn tissue_axes(&self) -> (f64, f64) {
        let half = self.image_size as f64 / 2.0;
        (half, half - self.margin as f64)
    }

    /// Whether the pixel centred at `(x + 0.5, y + 0.5)` lies in the tissue.
    pub fn in_tissue(&self, x: usize, y: usize) -> bool {
        let (c, a) = self.tissue_axes();
        let (dx, dy) = ((x as f64 + 0.5 - c) / a, (y as f64 + 0.5 - c) / a);
        dx * dx + dy * dy <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bubble {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Bubble {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

/// Bubble placement drawn before any pixel is rendered.
pub fn sample_bubbles(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Bubble> {
    let (c, a) = cfg.tissue_axes();
    let area = std::f64::consts::PI * a * a;
    let mean = cfg.bubble_density * area / 1e4;
    let count = if mean > 0.0 {
        Poisson::new(mean).map(|p| p.sample(rng) as usize).unwrap_or(0)
    } else {
        0
    };
    (0..count)
        .map(|_| {
            let radius = rng.gen_range(cfg.bubble_radius_min..=cfg.bubble_radius_max);
            // centre uniform over the tissue disk shrunk by half a radius
            let reach = (a - radius / 2.0).max(0.0);
            let (rho, theta) = (reach * rng.gen::<f64>().sqrt(), rng.gen_range(0.0..std::f64::consts::TAU));
            Bubble {
                cx: c + rho * theta.cos(),
                cy: c + rho * theta.sin(),
                radius,
            }
        })
        .collect()
}

/// Bilinear value noise with smoothstep easing on a square lattice.
struct ValueNoise {
    lattice: Vec<f64>,
    side: usize,
    scale: f64,
}

impl ValueNoise {
    fn new(size: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let side = (size as f64 / scale).ceil() as usize + 2;
        ValueNoise {
            lattice: (0..side * side).map(|_| rng.gen::<f64>()).collect(),
            side,
            scale,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (fx, fy) = (x / self.scale, y / self.scale);
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let ease = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (ease(fx - ix as f64), ease(fy - iy as f64));
        let g = |i: usize, j: usize| self.lattice[j * self.side + i];
        let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
        let bottom = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

const GLASS: [f64; 3] = [246.0, 244.0, 247.0];
const HEMATOXYLIN: [f64; 3] = [118.0, 62.0, 142.0];
const EOSIN: [f64; 3] = [200.0, 112.0, 168.0];
const PALE: [f64; 3] = [214.0, 192.0, 214.0];
const RIM: [f64; 3] = [105.0, 70.0, 115.0];

/// Renders the image and its mask from a bubble layout. Mask codes follow
/// the geometry exactly: glass 0, tissue 1, tissue inside any bubble 2.
pub fn render(cfg: &SynthConfig, id: &str, bubbles: &[Bubble], rng: &mut ChaCha8Rng) -> SourceImage {
    let n = cfg.image_size;
    let noise = ValueNoise::new(n, cfg.noise_scale, rng);
    let mut rgb = Vec::with_capacity(n * n * 3);
    let mut mask = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let jitter = cfg.jitter * (rng.gen::<f64>() - 0.5);
            let (code, color) = if !cfg.in_tissue(x, y) {
                (MASK_BACKGROUND, GLASS.map(|c| c + jitter / 4.0))
            } else {
                let t = noise.at(x as f64, y as f64);
                let mut color = [0.0; 3];
                for k in 0..3 {
                    color[k] = HEMATOXYLIN[k] * (1.0 - t) + EOSIN[k] * t + jitter;
                }
                let hit = bubbles.iter().find(|b| b.contains(x, y));
                match hit {
                    None => (MASK_ARTIFACT_FREE, color),
                    Some(b) => {
                        let (dx, dy) = (x as f64 + 0.5 - b.cx, y as f64 + 0.5 - b.cy);
                        let depth = (b.radius - (dx * dx + dy * dy).sqrt()) / b.radius;
                        let rim = cfg.rim_fraction;
                        for k in 0..3 {
                            let faded = color[k] * (1.0 - cfg.bubble_contrast) + PALE[k] * cfg.bubble_contrast;
                            color[k] = if rim > 0.0 && depth < rim {
                                let w = 0.6 * (1.0 - depth / rim);
                                faded * (1.0 - w) + RIM[k] * w
                            } else {
                                faded
                            };
                        }
                        (MASK_AIR_BUBBLES, color)
                    }
                }
            };
            rgb.extend(color.map(|c| c.round().clamp(0.0, 255.0) as u8));
            mask.push(code);
        }
    }
    SourceImage {
        id: id.to_string(),
        width: n,
        height: n,
        rgb,
        mask: Some(mask),
    }
}

/// One annotated image; returns the bubble layout alongside it.
pub fn generate_image(cfg: &SynthConfig, id: &str, rng: &mut ChaCha8Rng) -> (SourceImage, Vec<Bubble>) {
    let bubbles = sample_bubbles(cfg, rng);
    let img = render(cfg, id, &bubbles, rng);
    (img, bubbles)
}

/// Seed of image `index` in `split`; splits use disjoint sub-streams.
pub fn image_seed(cfg: &SynthConfig, split: Split, index: usize) -> u64 {
    let split_seed = rng::derive_seed(cfg.seed, rng::SYNTH, split as u64);
    rng::derive_seed(split_seed, "image", index as u64)
}

pub fn image_id(split: Split, index: usize) -> String {
    format!("{}{index:05}", split.as_str())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
}

impl CorpusEntry {
    pub fn image_path(&self, root: &Path) -> PathBuf {
        root.join(self.split.as_str()).join("images").join(format!("{}.png", self.id))
    }

    pub fn mask_path(&self, root: &Path) -> PathBuf {
        root.join(self.split.as_str()).join("masks").join(format!("{}.png", self.id))
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes every split's images and masks plus the corpus index.
pub fn generate_corpus(cfg: &SynthConfig, root: &Path) -> Result<Vec<CorpusEntry>> {
    cfg.validate()?;
    let entries: Vec<CorpusEntry> = Split::ALL
        .iter()
        .flat_map(|&split| {
            (0..cfg.images_in(split)).map(move |i| CorpusEntry {
                id: image_id(split, i),
                split,
                seed: image_seed(cfg, split, i),
            })
        })
        .collect();
    for split in Split::ALL {
        for sub in ["images", "masks"] {
            let dir = root.join(split.as_str()).join(sub);
            fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        }
    }
    let results = par::map_collect(entries.len(), |i| -> Result<()> {
        let e = &entries[i];
        let mut r = rand::SeedableRng::seed_from_u64(e.seed);
        let (img, _) = generate_image(cfg, &e.id, &mut r);
        save_rgb_png(&e.image_path(root), img.width, img.height, &img.rgb)?;
        save_gray_png(&e.mask_path(root), img.width, img.height, img.mask.as_ref().unwrap())?;
        Ok(())
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;
    let mut text = format!("{CORPUS_HEADER}\n");
    for e in &entries {
        text.push_str(&format!("{}\t{}\t{}\n", e.id, e.split, e.seed));
    }
    let index = root.join(CORPUS_INDEX);
    fs::write(&index, text).map_err(|e| io(&index, e))?;
    Ok(entries)
}

pub fn read_corpus(root: &Path) -> Result<Vec<CorpusEntry>> {
    let path = root.join(CORPUS_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, h)| h) != Some(CORPUS_HEADER) {
        return Err(io(&path, "missing or unexpected header"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.filter(|(_, l)| !l.is_empty()) {
        let at = |m: String| io(&path, format!("line {}: {m}", i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(at(format!("expected 3 columns, found {}", f.len())));
        }
        out.push(CorpusEntry {
            id: f[0].to_string(),
            split: f[1].parse().map_err(at)?,
            seed: f[2].parse().map_err(|_| at(format!("seed {:?} is not an integer", f[2])))?,
        });
    }
    Ok(out)
}
