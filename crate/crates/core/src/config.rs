//! Run configuration: every tunable of the pipeline in one TOML document.
//! Unknown keys at any level are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datapipe::{CropSpec, SamplingOptions};
use crate::dhr::DhrConfig;
use crate::error::{Error, Result};
use crate::hazegen::AhgConfig;
use crate::losses::LossWeights;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Paired dataset root with `hazy/` and `clear/` subdirectories.
    pub dataset: Option<PathBuf>,
    /// Held-out pairs used by `ablate`; falls back to `dataset`.
    pub eval_dataset: Option<PathBuf>,
    pub ahg_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    /// Frozen, seeded random convolution stages; needs no external weights.
    #[default]
    Random,
    /// torchvision VGG16 `features` weights in safetensors format.
    Vgg16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    pub widths: Vec<usize>,
    pub seed: u64,
    pub weights: Option<PathBuf>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::Random,
            widths: vec![8, 16, 32],
            seed: 0x5eed,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Caps the run length; the cosine schedule then spans this many steps.
    pub max_steps: Option<u64>,
    /// Use the haze generator for augmentation and generated negatives.
    pub use_ahg: bool,
    /// Write a checkpoint every this many steps (0 disables intermediate ones).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 4,
            lr_max: 1e-4,
            lr_min: 1e-6,
            max_steps: None,
            use_ahg: true,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AhgTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub crop: CropSpec,
    pub checkpoint_every: u64,
}

impl Default for AhgTrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 4,
            crop: CropSpec::default(),
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenHazeConfig {
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub modulation: bool,
}

impl Default for GenHazeConfig {
    fn default() -> Self {
        Self {
            alphas: vec![-0.2, -0.1, 0.0, 0.1, 0.2, 0.3],
            seeds: vec![0],
            modulation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// DHR training steps per grid row.
    pub steps: u64,
    /// Haze generator training steps when no checkpoint is supplied.
    pub ahg_steps: u64,
    pub patch_sizes: Vec<usize>,
    pub lambda3: Vec<f64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            ahg_steps: 2000,
            patch_sizes: vec![8, 16, 32, 64, 128],
            lambda3: vec![1.0, 0.5, 0.05, 0.01, 0.005],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub dhr: DhrConfig,
    pub ahg: AhgConfig,
    pub loss: LossWeights,
    pub extractor: ExtractorConfig,
    pub train: TrainConfig,
    pub ahg_train: AhgTrainConfig,
    pub sampling: SamplingOptions,
    pub gen_haze: GenHazeConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            dhr: DhrConfig::default(),
            ahg: AhgConfig::default(),
            loss: LossWeights::default(),
            extractor: ExtractorConfig::default(),
            train: TrainConfig::default(),
            ahg_train: AhgTrainConfig::default(),
            sampling: SamplingOptions::default(),
            gen_haze: GenHazeConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

fn config_err(what: impl std::fmt::Display) -> Error {
    Error::Config(what.to_string())
}

fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidParameter(msg) => Error::Config(msg),
        other => other,
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| config_err(e.message()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(config_err)
    }

    pub fn validate(&self) -> Result<()> {
        self.dhr.validate().map_err(as_config)?;
        self.sampling.schedule.validate()?;
        self.sampling.perlin.validate().map_err(as_config)?;
        let t = &self.train;
        if t.batch_size == 0 || self.ahg_train.batch_size == 0 {
            return Err(config_err("batch sizes must be positive"));
        }
        if t.epochs == 0 {
            return Err(config_err("train.epochs must be positive"));
        }
        if !(t.lr_max > 0.0 && t.lr_min >= 0.0 && t.lr_min <= t.lr_max) {
            return Err(config_err(format!(
                "learning rates need 0 <= lr_min <= lr_max and lr_max > 0, got {} and {}",
                t.lr_min, t.lr_max
            )));
        }
        for (name, crop) in [("sampling.crop", self.sampling.crop), ("ahg_train.crop", self.ahg_train.crop)] {
            if crop.unit == 0 || crop.output == 0 {
                return Err(config_err(format!("{name} sides must be positive")));
            }
        }
        let l = &self.loss;
        if [l.smooth_l1, l.ms_ssim, l.mncd].iter().any(|w| !(w.is_finite() && *w >= 0.0)) || l.smooth_l1_beta <= 0.0 {
            return Err(config_err("loss weights must be finite and nonnegative, with a positive beta"));
        }
        if self.sampling.negatives == 0 {
            return Err(config_err("sampling.negatives must be at least 1"));
        }
        if self.extractor.kind == ExtractorKind::Vgg16 && self.extractor.weights.is_none() {
            return Err(config_err("extractor kind `vgg16` needs `extractor.weights`"));
        }
        if self.ablate.patch_sizes.contains(&0) {
            return Err(config_err("ablate.patch_sizes must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes to JSON");
        hex::encode(Sha256::digest(bytes))
    }
}
