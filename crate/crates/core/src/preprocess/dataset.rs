//! On-disk patch datasets and PNG helpers.
//!
//! ```text
//! <root>/<split>/<class>/patch_<source>_<gy>_<gx>.png
//! <root>/manifest.tsv
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};

use super::{PatchRecord, PreprocessError, Result, SourceImage};

pub const CLASS_DIRS: [&str; 2] = ["artifact_free", "air_bubbles"];
pub const MANIFEST: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str =
    "source_id\tsplit\tgrid_y\tgrid_x\tlabel\toverlap_fraction\tforeground_fraction";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}, expected train, val or test")),
        }
    }
}

/// Split for a source image; depends only on the id, the seed and the
/// fractions, so every patch of a source lands in the same split.
pub fn assign_split(source_id: &str, seed: u64, train: f64, val: f64) -> Split {
    let h = crate::rng::derive_seed(seed, source_id, 0);
    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
    if u < train {
        Split::Train
    } else if u < train + val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Fails if any source id is paired with two different splits.
pub fn check_leakage<'a>(pairs: impl IntoIterator<Item = (&'a str, Split)>) -> Result<()> {
    let mut seen: HashMap<&str, Split> = HashMap::new();
    for (id, split) in pairs {
        match seen.insert(id, split) {
            Some(prev) if prev != split => {
                return Err(PreprocessError::Leakage {
                    source_id: id.to_string(),
                    first: prev.min(split),
                    second: prev.max(split),
                })
            }
            _ => {}
        }
    }
    Ok(())
}

/// Counts per label `[artifact_free, air_bubbles]`.
pub fn label_counts(labels: impl IntoIterator<Item = usize>) -> [usize; 2] {
    let mut c = [0; 2];
    for l in labels {
        c[l.min(1)] += 1;
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub source_id: String,
    pub split: Split,
    pub grid_y: usize,
    pub grid_x: usize,
    pub label: usize,
    pub overlap_fraction: f64,
    pub foreground_fraction: f64,
}

impl ManifestRow {
    pub fn relative_path(&self) -> PathBuf {
        Path::new(self.split.as_str())
            .join(CLASS_DIRS[self.label])
            .join(format!("patch_{}_{}_{}.png", self.source_id, self.grid_y, self.grid_x))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> PreprocessError {
    PreprocessError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes patch PNGs and the manifest. Rows are ordered by split, source and
/// grid position, so the output does not depend on the input order.
pub fn write_dataset(root: &Path, records: &[(Split, PatchRecord)]) -> Result<Vec<ManifestRow>> {
    check_leakage(records.iter().map(|(s, r)| (r.source_id.as_str(), *s)))?;
    if let Some((_, r)) = records.iter().find(|(_, r)| r.source_id.contains(['\t', '/', '\\'])) {
        return Err(PreprocessError::Contract(format!(
            "source id {:?} contains a tab or path separator",
            r.source_id
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, ra) = &records[a];
        let (sb, rb) = &records[b];
        (sa, &ra.source_id, ra.grid_y, ra.grid_x).cmp(&(sb, &rb.source_id, rb.grid_y, rb.grid_x))
    });
    let mut rows = Vec::with_capacity(records.len());
    let mut text = format!("{MANIFEST_HEADER}\n");
    for i in order {
        let (split, r) = &records[i];
        let row = ManifestRow {
            source_id: r.source_id.clone(),
            split: *split,
            grid_y: r.grid_y,
            grid_x: r.grid_x,
            label: r.label,
            overlap_fraction: r.overlap_fraction,
            foreground_fraction: r.foreground_fraction,
        };
        let path = root.join(row.relative_path());
        fs::create_dir_all(path.parent().unwrap()).map_err(|e| io_err(&path, e))?;
        save_rgb_png(&path, r.size, r.size, &r.pixels)?;
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            row.source_id,
            row.split,
            row.grid_y,
            row.grid_x,
            row.label,
            row.overlap_fraction,
            row.foreground_fraction
        ));
        rows.push(row);
    }
    let manifest = root.join(MANIFEST);
    fs::write(&manifest, text).map_err(|e| io_err(&manifest, e))?;
    Ok(rows)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let bad = |line: usize, message: String| PreprocessError::Format {
        path: format!("{}:{line}", path.display()),
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MANIFEST_HEADER => {}
        _ => return Err(bad(1, "missing or unexpected header".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(bad(n, format!("expected 7 columns, found {}", f.len())));
        }
        let num = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|_| bad(n, format!("{what} {s:?} is not an integer")))
        };
        let frac = |s: &str, what: &str| {
            s.parse::<f64>().map_err(|_| bad(n, format!("{what} {s:?} is not a number")))
        };
        let label = num(f[4], "label")?;
        if label > 1 {
            return Err(bad(n, format!("label {label} is not 0 or 1")));
        }
        rows.push(ManifestRow {
            source_id: f[0].to_string(),
            split: f[1].parse().map_err(|e| bad(n, e))?,
            grid_y: num(f[2], "grid_y")?,
            grid_x: num(f[3], "grid_x")?,
            label,
            overlap_fraction: frac(f[5], "overlap_fraction")?,
            foreground_fraction: frac(f[6], "foreground_fraction")?,
        });
    }
    check_leakage(rows.iter().map(|r| (r.source_id.as_str(), r.split)))?;
    Ok(rows)
}

/// Patches of one split held in memory as raw RGB bytes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatchSet {
    pub size: usize,
    pub pixels: Vec<Vec<u8>>,
    pub labels: Vec<usize>,
    pub sources: Vec<String>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, pixels: Vec<u8>, label: usize, source: String) {
        self.pixels.push(pixels);
        self.labels.push(label);
        self.sources.push(source);
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a PatchRecord>) -> Self {
        let mut set = PatchSet::default();
        for r in records {
            set.size = r.size;
            set.push(r.pixels.clone(), r.label, r.source_id.clone());
        }
        set
    }
}

/// Loads every patch of `split` listed in the manifest, in manifest order.
pub fn read_split(root: &Path, split: Split) -> Result<PatchSet> {
    let mut set = PatchSet::default();
    for row in read_manifest(root)?.into_iter().filter(|r| r.split == split) {
        let path = root.join(row.relative_path());
        let img = read_rgb(&path)?;
        let (w, h) = img.dimensions();
        if w != h || (set.size != 0 && w as usize != set.size) {
            return Err(PreprocessError::Format {
                path: path.display().to_string(),
                message: format!("patch is {w}x{h}, expected a square of side {}", set.size.max(w as usize)),
            });
        }
        set.size = w as usize;
        set.push(img.into_raw(), row.label, row.source_id);
    }
    Ok(set)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let image_err = |source| PreprocessError::Image {
        path: path.display().to_string(),
        source,
    };
    ImageReader::open(path)
        .map_err(|e| io_err(path, e))?
        .with_guessed_format()
        .map_err(|e| io_err(path, e))?
        .decode()
        .map_err(image_err)
}

fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(decode(path)?.to_rgb8())
}

/// Reads an RGB image and an optional single-channel annotation mask.
pub fn load_source(id: &str, image: &Path, mask: Option<&Path>) -> Result<SourceImage> {
    let rgb = read_rgb(image)?;
    let (w, h) = rgb.dimensions();
    let mask = match mask {
        Some(p) => {
            let m = decode(p)?.to_luma8();
            if m.dimensions() != (w, h) {
                return Err(PreprocessError::Contract(format!(
                    "mask {} is {:?}, image {} is {:?}",
                    p.display(),
                    m.dimensions(),
                    image.display(),
                    (w, h)
                )));
            }
            Some(m.into_raw())
        }
        None => None,
    };
    SourceImage::new(id, w as usize, h as usize, rgb.into_raw(), mask)
}

fn save(path: &Path, result: image::ImageResult<()>) -> Result<()> {
    result.map_err(|source| PreprocessError::Image {
        path: path.display().to_string(),
        source,
    })
}

pub fn save_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let img = RgbImage::from_raw(width as u32, height as u32, rgb.to_vec()).ok_or_else(|| {
        PreprocessError::Contract(format!("{} bytes do not fill {width}x{height} RGB", rgb.len()))
    })?;
    save(path, img.save_with_format(path, image::ImageFormat::Png))
}

pub fn save_gray_png(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, gray.to_vec()).ok_or_else(|| {
        PreprocessError::Contract(format!("{} bytes do not fill {width}x{height} gray", gray.len()))
    })?;
    save(path, img.save_with_format(path, image::ImageFormat::Png))
}
