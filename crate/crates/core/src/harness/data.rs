//! Dataset discovery, image decoding and intensity normalisation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::Normalization;
use crate::error::{Error, Result};

/// Directory conventions of the supported datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// `<split>/images/21_training.tif`, `<split>/1st_manual/21_manual1.gif`,
    /// `<split>/mask/21_training_mask.gif`; files are keyed by the leading number.
    Drive,
    /// Flat folder: `Image_01L.jpg` with `Image_01L_1stHO.png` (second observer ignored).
    Chase,
    /// `stare-images/im0001.ppm` with `labels-ah/im0001.ah.ppm`.
    Stare,
    /// `<split>/Original/x.png` with `<split>/Ground truth/x.png`.
    Fives,
    /// `<split>/img/x.png` with `<split>/gt/x.png`.
    Octa,
    /// `images/x.png` with `masks/x.png` (what `synth` writes).
    Synthetic,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "drive" => Layout::Drive,
            "chase" | "chasedb1" => Layout::Chase,
            "stare" => Layout::Stare,
            "fives" => Layout::Fives,
            "octa" => Layout::Octa,
            "synthetic" | "synth" => Layout::Synthetic,
            other => return Err(Error::Config(format!("unknown dataset layout {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub layout: Layout,
    /// Sub-directory for split-aware layouts (e.g. `training` / `test` for DRIVE).
    pub split: Option<String>,
    /// Load field-of-view masks where the layout has them.
    pub use_fov: bool,
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, layout: Layout) -> Self {
        Self {
            root: root.into(),
            layout,
            split: None,
            use_fov: true,
        }
    }

    pub fn with_split(mut self, split: impl Into<String>) -> Self {
        self.split = Some(split.into());
        self
    }
}

/// One normalised image with its binary ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Array2<f64>,
    pub mask: Array2<bool>,
    pub fov: Option<Array2<bool>>,
}

#[derive(Debug, Default)]
pub struct Ingested {
    pub samples: Vec<Sample>,
    /// Files that were skipped, with the reason.
    pub rejected: Vec<(PathBuf, String)>,
}

#[derive(Clone, Copy, PartialEq)]
enum Role {
    Image,
    Mask,
    Fov,
}

struct Dirs {
    image: PathBuf,
    mask: PathBuf,
    fov: Option<PathBuf>,
}

fn dirs(spec: &DatasetSpec) -> Dirs {
    let base = match (&spec.split, spec.layout) {
        (Some(s), _) => spec.root.join(s),
        (None, Layout::Drive) if spec.root.join("training").is_dir() => spec.root.join("training"),
        (None, Layout::Fives | Layout::Octa) if spec.root.join("train").is_dir() => spec.root.join("train"),
        _ => spec.root.clone(),
    };
    match spec.layout {
        Layout::Drive => Dirs {
            image: base.join("images"),
            mask: base.join("1st_manual"),
            fov: Some(base.join("mask")),
        },
        Layout::Chase => Dirs {
            image: base.clone(),
            mask: base,
            fov: None,
        },
        Layout::Stare => Dirs {
            image: base.join("stare-images"),
            mask: base.join("labels-ah"),
            fov: None,
        },
        Layout::Fives => Dirs {
            image: base.join("Original"),
            mask: base.join("Ground truth"),
            fov: None,
        },
        Layout::Octa => Dirs {
            image: base.join("img"),
            mask: base.join("gt"),
            fov: None,
        },
        Layout::Synthetic => Dirs {
            image: base.join("images"),
            mask: base.join("masks"),
            fov: None,
        },
    }
}

/// Join key of a file for its role, or `None` if the file plays another role.
fn key(layout: Layout, role: Role, stem: &str) -> Option<String> {
    match layout {
        Layout::Drive => {
            let digits: String = stem.chars().take_while(char::is_ascii_digit).collect();
            let ok = match role {
                Role::Image => stem.ends_with("_training") || stem.ends_with("_test"),
                Role::Mask => stem.contains("_manual1"),
                Role::Fov => stem.ends_with("_mask"),
            };
            (ok && !digits.is_empty()).then_some(digits)
        }
        Layout::Chase => match role {
            Role::Image => (!stem.contains("_1stHO") && !stem.contains("_2ndHO")).then(|| stem.to_string()),
            Role::Mask => stem.strip_suffix("_1stHO").map(str::to_string),
            Role::Fov => None,
        },
        Layout::Stare => Some(stem.split('.').next().unwrap_or(stem).to_string()),
        Layout::Fives | Layout::Octa | Layout::Synthetic => Some(stem.to_string()),
    }
}

const EXTENSIONS: &[&str] = &["png", "tif", "tiff", "gif", "jpg", "jpeg", "ppm", "bmp"];

fn list(dir: &Path, layout: Layout, role: Role) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        if !path.is_file() || !EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        // STARE labels carry a double extension (`im0001.ah.ppm`).
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if let Some(k) = key(layout, role, stem) {
            out.insert(k, path);
        }
    }
    Ok(out)
}

fn read_luma(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    // Rec. 709 luminance weighting, scaled to [0, 1] for any bit depth.
    let luma = img.to_luma32f();
    let (w, h) = luma.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), luma.into_raw().into_iter().map(f64::from).collect()).unwrap())
}

/// Grayscale intensities in `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<Array2<f64>> {
    read_luma(path)
}

/// Binary mask: luminance `>= 0.5` (so `{0, 255}` maps to `{0, 1}`).
pub fn load_mask(path: &Path) -> Result<Array2<bool>> {
    Ok(read_luma(path)?.mapv(|v| v >= 0.5))
}

pub fn normalize(image: &Array2<f64>, mode: Normalization) -> Array2<f64> {
    let n = image.len().max(1) as f64;
    match mode {
        Normalization::Standardize => {
            let mean = image.sum() / n;
            let var = image.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if var <= 1e-24 {
                Array2::zeros(image.raw_dim())
            } else {
                let sd = var.sqrt();
                image.mapv(|v| (v - mean) / sd)
            }
        }
        Normalization::MinMax => {
            let lo = image.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = image.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo <= 0.0 {
                Array2::zeros(image.raw_dim())
            } else {
                image.mapv(|v| (v - lo) / (hi - lo))
            }
        }
    }
}

/// Loads every image with a matching ground truth. Unreadable files and
/// size mismatches are reported in `rejected` and skipped.
pub fn ingest(spec: &DatasetSpec, mode: Normalization) -> Result<Ingested> {
    let d = dirs(spec);
    let images = list(&d.image, spec.layout, Role::Image)?;
    let masks = list(&d.mask, spec.layout, Role::Mask)?;
    let fovs = match (&d.fov, spec.use_fov) {
        (Some(dir), true) if dir.is_dir() => list(dir, spec.layout, Role::Fov)?,
        _ => BTreeMap::new(),
    };
    let mut out = Ingested::default();
    for (k, img_path) in &images {
        let Some(mask_path) = masks.get(k) else {
            log::warn!("{}: no ground truth, skipped", img_path.display());
            out.rejected.push((img_path.clone(), "no matching ground-truth mask".into()));
            continue;
        };
        let loaded = (|| -> Result<Sample> {
            let raw = load_gray(img_path)?;
            let mask = load_mask(mask_path)?;
            if mask.dim() != raw.dim() {
                return Err(Error::Data(format!(
                    "image is {:?} but mask {} is {:?}",
                    raw.dim(),
                    mask_path.display(),
                    mask.dim()
                )));
            }
            let fov = match fovs.get(k) {
                Some(p) => {
                    let f = load_mask(p)?;
                    if f.dim() != raw.dim() {
                        return Err(Error::Data(format!("fov mask {} is {:?}", p.display(), f.dim())));
                    }
                    Some(f)
                }
                None => None,
            };
            Ok(Sample {
                id: k.clone(),
                image: normalize(&raw, mode),
                mask,
                fov,
            })
        })();
        match loaded {
            Ok(s) => out.samples.push(s),
            Err(e) => {
                log::warn!("{}: {e}", img_path.display());
                out.rejected.push((img_path.clone(), e.to_string()));
            }
        }
    }
    if out.samples.is_empty() {
        return Err(Error::Data(format!(
            "no usable image/mask pairs under {} ({} rejected)",
            spec.root.display(),
            out.rejected.len()
        )));
    }
    Ok(out)
}

/// Loads all images under `path` (a file or a directory) without ground truth.
pub fn load_images(path: &Path, mode: Normalization) -> Result<Vec<(String, Array2<f64>)>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
                p.is_file() && EXTENSIONS.contains(&ext.as_str())
            })
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Data(format!("no images found at {}", path.display())));
    }
    files
        .iter()
        .map(|p| {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
            Ok((id, normalize(&load_gray(p)?, mode)))
        })
        .collect()
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// 8-bit grayscale PNG of values in `[0, 1]` (clamped).
pub fn save_gray(path: &Path, values: &Array2<f64>) -> Result<()> {
    create_parent(path)?;
    let (h, w) = values.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(values[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    save_gray(path, &mask.mapv(|b| if b { 1.0 } else { 0.0 }))
}

/// 16-bit PNG of probabilities, precise to 1/65535.
pub fn save_probability(path: &Path, probs: &Array2<f64>) -> Result<()> {
    create_parent(path)?;
    let (h, w) = probs.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(probs[[y as usize, x as usize]].clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_probability(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let img = img.to_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec(
        (h as usize, w as usize),
        img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
    )
    .unwrap())
}
