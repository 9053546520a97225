//! Training configuration, stored as TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, LdcaSites};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::optim::AdamConfig;

/// How intensities are normalised on ingest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Zero mean, unit variance per image (constant images map to zeros).
    #[default]
    Standardize,
    /// Per-image min-max scaling to `[0, 1]`.
    MinMax,
}

/// Reading of the "Gaussian noise with a 5x5 kernel" augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// White Gaussian noise smoothed by a 5x5 Gaussian kernel, added to the image.
    #[default]
    SmoothedNoise,
    /// 5x5 Gaussian blur of the image plus white Gaussian noise.
    BlurPlusNoise,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standardize" => Ok(Self::Standardize),
            "min-max" => Ok(Self::MinMax),
            _ => Err(Error::Config(format!("unknown normalization {s:?} (standardize, min-max)"))),
        }
    }
}

impl std::str::FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smoothed-noise" => Ok(Self::SmoothedNoise),
            "blur-plus-noise" => Ok(Self::BlurPlusNoise),
            _ => Err(Error::Config(format!("unknown noise mode {s:?} (smoothed-noise, blur-plus-noise)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs_main: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of `1 - clDice` in the main-phase loss.
    pub alpha: f64,
    /// Soft-skeleton iterations in the main-phase loss.
    pub skeleton_iters: usize,
    /// Fraction of patches held out for validation.
    pub val_fraction: f64,
    /// Sliding-window stride used to cut training patches.
    pub stride: usize,
    pub noise_sigma: f64,
    pub noise_mode: NoiseMode,
    pub normalization: Normalization,
    /// Fraction of each fine-tuning batch that also gets the topological loss.
    pub topo_fraction: f64,
    /// Stop a phase early once validation Dice reaches this value.
    pub target_val_dice: Option<f64>,
    /// Network architecture; the Kalman `r` lives under `model.ld`.
    pub model: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            epochs_main: 10,
            epochs_finetune: 5,
            batch_size: 2,
            seed: 0,
            alpha: 0.4,
            skeleton_iters: 5,
            val_fraction: 0.1,
            stride: 24,
            noise_sigma: 0.05,
            noise_mode: NoiseMode::default(),
            normalization: Normalization::default(),
            topo_fraction: 0.25,
            target_val_dice: None,
            model: BackboneConfig::default(),
        }
    }
}

/// A reduced architecture that trains on a single CPU core in minutes:
/// width 8 instead of 32, with LDCA at every nested node below full
/// resolution (`i >= 1`). Depth, patch size and the LD parameters keep their
/// defaults.
pub fn desk_model() -> BackboneConfig {
    let d = BackboneConfig::default();
    let sites = (1..=d.depth)
        .flat_map(|j| (1..=d.depth - j).map(move |i| [i, j]))
        .collect();
    BackboneConfig {
        base_width: 8,
        ldca_sites: LdcaSites::List(sites),
        ..d
    }
}

impl TrainConfig {
    /// Default hyperparameters on [`desk_model`].
    pub fn desk() -> Self {
        Self {
            model: desk_model(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad(format!(
                "learning_rate must be > 0 and weight_decay >= 0, got {} and {}",
                self.learning_rate, self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if !(self.topo_fraction > 0.0 && self.topo_fraction <= 1.0) {
            return bad(format!("topo_fraction must lie in (0, 1], got {}", self.topo_fraction));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if self.stride == 0 || self.stride > self.model.patch_size {
            return bad(format!(
                "stride must lie in 1..={}, got {}",
                self.model.patch_size, self.stride
            ));
        }
        self.loss_weights().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            skeleton_iters: self.skeleton_iters,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}
