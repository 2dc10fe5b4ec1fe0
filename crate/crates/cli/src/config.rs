//! Run configuration: one TOML file with `[model]`, `[data]`, `[train]` and
//! `[analysis]` sections plus `output_dir`.
//!
//! Precedence, highest first: command-line flags, the `SCALEFUSION_OUT_DIR`
//! environment variable (output directory only), the file, built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scalefusion::analysis::RedundancySettings;
use scalefusion::data::{DataFormat, DatasetManifest, SplitSpec, SubsampleMode, SynthKind, SynthSpec};
use scalefusion::heads::Task;
use scalefusion::model::{ModelConfig, PretrainConfig};
use scalefusion::patching::schedule;

use crate::error::{CliError, CliResult};

pub const OUT_DIR_ENV: &str = "SCALEFUSION_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub analysis: RedundancySettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            analysis: RedundancySettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: DatasetManifest,
    /// Generator settings, used when `manifest.format` is `synthetic`.
    pub synthetic: SynthSpec,
    pub split: SplitSpec,
    pub min_len: usize,
    pub max_len: usize,
    /// Distance between consecutive forecasting window anchors.
    pub stride: usize,
    /// Forecast horizons; one fine-tuning run per entry.
    pub horizons: Vec<usize>,
    pub subsample: SubsampleMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: DatasetManifest {
                format: DataFormat::Synthetic,
                path: PathBuf::new(),
                test_path: None,
                columns: Vec::new(),
                num_classes: None,
            },
            synthetic: SynthSpec::default(),
            split: SplitSpec::default(),
            min_len: 512,
            max_len: 2048,
            stride: 96,
            horizons: vec![96],
            subsample: SubsampleMode::Index,
        }
    }
}

impl DataConfig {
    /// Classification for UCR files and synthetic class templates,
    /// forecasting otherwise.
    pub fn is_classification(&self) -> bool {
        match self.manifest.format {
            DataFormat::Ucr => true,
            DataFormat::Synthetic => self.synthetic.kind == SynthKind::Classes,
            DataFormat::EttCsv => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Root seed; initialization, sampling, pair sampling and batch order
    /// each draw from their own stream of it.
    pub seed: u64,
    pub lr: f64,
    /// Pretraining optimizer steps.
    pub steps: usize,
    /// Fine-tuning epochs.
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 1e-4,
            steps: 500,
            epochs: 10,
            batch_size: 8,
            weight_decay: 0.01,
            freeze_backbone: false,
        }
    }
}

impl TrainConfig {
    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    pub fn finetune(&self, task: Task) -> scalefusion::heads::FinetuneConfig {
        scalefusion::heads::FinetuneConfig {
            task,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            freeze_backbone: self.freeze_backbone,
            weight_decay: self.weight_decay,
        }
    }
}

/// Values given on the command line; `None` leaves the file value alone.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::ConfigFile {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Reads `path`, applies the environment and `overrides`, and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::ConfigFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let env = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from);
        let mut cfg = Self::from_toml(&text, path)?;
        cfg.apply(env, overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, env_out_dir: Option<PathBuf>, overrides: &Overrides) {
        if let Some(dir) = env_out_dir {
            self.output_dir = dir;
        }
        if let Some(dir) = &overrides.output_dir {
            self.output_dir = dir.clone();
        }
        if let Some(seed) = overrides.seed {
            self.train.seed = seed;
        }
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.pretrain().validate()?;
        if self.train.epochs == 0 {
            return Err(config("train.epochs", "must be positive"));
        }
        let d = &self.data;
        d.split.validate()?;
        if d.min_len == 0 || d.min_len > d.max_len {
            return Err(config("data.min_len", "must satisfy 1 <= min_len <= max_len"));
        }
        if d.max_len > self.model.max_len {
            return Err(config(
                "data.max_len",
                format!("{} exceeds model.max_len {}", d.max_len, self.model.max_len),
            ));
        }
        let activates = schedule(d.min_len, &self.model.patch()).map_or(false, |s| s.activated_layers > 0);
        if !activates {
            return Err(config("data.min_len", "too short to activate any layer"));
        }
        if d.stride == 0 {
            return Err(config("data.stride", "must be positive"));
        }
        match d.manifest.format {
            DataFormat::Synthetic => d.synthetic.validate()?,
            _ if d.manifest.path.as_os_str().is_empty() => {
                return Err(config("data.manifest.path", "required for file datasets"));
            }
            _ => {}
        }
        if d.is_classification() {
            if matches!(d.manifest.num_classes, Some(c) if c < 2) {
                return Err(config("data.manifest.num_classes", "must be at least 2"));
            }
        } else if d.horizons.is_empty() || d.horizons.contains(&0) {
            return Err(config("data.horizons", "need at least one positive horizon"));
        }
        if self.analysis.bins < 2 {
            return Err(config("analysis.bins", "must be at least 2"));
        }
        if !(self.analysis.variance_target > 0.0 && self.analysis.variance_target <= 1.0) {
            return Err(config("analysis.variance_target", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

fn config(field: &str, message: impl Into<String>) -> CliError {
    scalefusion::Error::config(field, message).into()
}
