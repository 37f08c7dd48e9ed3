//! Experiment configuration, read from a sectioned `key = value` (TOML) file.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, CorruptionKind};
use crate::data::{SplitMode, SynthSpec};
use crate::decoder::{DecoderConfig, TrainOptions};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_ECE_BINS;
use crate::uncertainty::{UncertaintyConfig, DEFAULT_NOISE_GRID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// UEEG file; when absent a synthetic set is generated from `[synth]`.
    pub dataset: Option<PathBuf>,
    pub window: usize,
    pub stride: usize,
    pub split: SplitMode,
    pub holdout_subject: Option<usize>,
    /// Share of trials per (subject, class) kept for training in intra mode.
    pub train_fraction: f64,
    /// Share of the training trials held back for validation.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dataset: None, window: 64, stride: 16, split: SplitMode::Intra, holdout_subject: None, train_fraction: 0.8, val_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub noise_grid: Vec<f64>,
    pub dropout_grid_points: usize,
    pub ece_bins: usize,
    pub corruptions: Vec<CorruptionKind>,
    pub attribution_runs: usize,
    /// Electrode layout (`name,x,y` rows); the bundled 22-channel montage otherwise.
    pub layout: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            noise_grid: DEFAULT_NOISE_GRID.to_vec(),
            dropout_grid_points: 40,
            ece_bins: DEFAULT_ECE_BINS,
            corruptions: CorruptionKind::ALL.to_vec(),
            attribution_runs: 20,
            layout: None,
        }
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        let mut s = SynthSpec::new(3, 60, 12, 128, 4, 0.1);
        s.mixing_strength = 0.3;
        s
    }
}

/// Everything one CLI run needs besides the seed and input files. The
/// decoder's `n_channels`, `n_samples` and `n_classes` are taken from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthSpec,
    pub decoder: DecoderConfig,
    pub train: TrainOptions,
    pub uncertainty: UncertaintyConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            synth: SynthSpec::default(),
            decoder: DecoderConfig { temporal_filters: 4, pointwise_filters: 8, temporal_kernel: 16, ..DecoderConfig::default() },
            train: TrainOptions::default(),
            uncertainty: UncertaintyConfig { n_passes: 50, ..UncertaintyConfig::default() },
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a file; relative paths inside resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.dataset, &mut cfg.eval.layout].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.window == 0 || d.stride == 0 {
            return Err(Error::Config("data.window and data.stride must be >= 1".into()));
        }
        if !(0.0 < d.train_fraction && d.train_fraction < 1.0) && d.split == SplitMode::Intra {
            return Err(Error::Config("data.train_fraction must lie in (0, 1)".into()));
        }
        if !(0.0 < d.val_fraction && d.val_fraction < 1.0) {
            return Err(Error::Config("data.val_fraction must lie in (0, 1)".into()));
        }
        if d.split == SplitMode::Cross && d.holdout_subject.is_none() {
            return Err(Error::Config("cross split needs data.holdout_subject".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.eval.noise_grid.is_empty() || self.eval.noise_grid.iter().any(|u| !(*u >= 0.0)) {
            return Err(Error::Config("eval.noise_grid must be non-empty and non-negative".into()));
        }
        if self.eval.dropout_grid_points < 2 || self.eval.ece_bins == 0 || self.eval.attribution_runs == 0 {
            return Err(Error::Config("eval.dropout_grid_points >= 2, ece_bins >= 1, attribution_runs >= 1".into()));
        }
        self.uncertainty.validate().map_err(|e| Error::Config(format!("uncertainty: {e}")))?;
        self.augment.validate().map_err(|e| Error::Config(format!("augment: {e}")))?;
        Ok(())
    }

    /// Decoder config completed with the data's dimensions.
    pub fn decoder_for(&self, n_channels: usize, window: usize, n_classes: usize) -> Result<DecoderConfig> {
        let c = DecoderConfig { n_channels, n_samples: window, n_classes, ..self.decoder.clone() };
        c.validate().map_err(|e| Error::Config(format!("decoder: {e}")))?;
        Ok(c)
    }
}
