//! Run configuration: one JSON document naming the dataset, the window
//! layout, every hyperparameter, the seeds and the output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Modality, TimeseriesOptions, SKELETON_JOINTS};
use crate::model::{Architecture, ModelConfig};
use crate::race::RaceConfig;
use crate::spatiotemporal::WindowLayout;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        windows_per_class: usize,
        noise_sigma: f64,
        /// Generator seed; the shuffle seed when absent.
        #[serde(default)]
        seed: Option<u64>,
    },
    Timeseries {
        manifest: PathBuf,
        #[serde(default)]
        stride: Option<usize>,
        #[serde(default = "yes")]
        skip_timestamp: bool,
    },
    Skeleton {
        manifest: PathBuf,
    },
    Image {
        manifest: PathBuf,
    },
}

fn yes() -> bool {
    true
}

impl DatasetConfig {
    pub fn modality(&self) -> Modality {
        match self {
            Self::Synthetic { .. } | Self::Timeseries { .. } => Modality::Timeseries,
            Self::Skeleton { .. } => Modality::Skeleton,
            Self::Image { .. } => Modality::Image,
        }
    }

    pub fn manifest(&self) -> Option<&Path> {
        match self {
            Self::Synthetic { .. } => None,
            Self::Timeseries { manifest, .. } | Self::Skeleton { manifest } | Self::Image { manifest } => {
                Some(manifest)
            }
        }
    }

    pub fn set_manifest(&mut self, path: PathBuf) {
        match self {
            Self::Synthetic { .. } => {}
            Self::Timeseries { manifest, .. } | Self::Skeleton { manifest } | Self::Image { manifest } => {
                *manifest = path
            }
        }
    }

    pub fn timeseries_options(&self) -> TimeseriesOptions {
        match self {
            Self::Timeseries {
                stride, skip_timestamp, ..
            } => TimeseriesOptions {
                stride: *stride,
                skip_timestamp: *skip_timestamp,
            },
            _ => TimeseriesOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Weight initialization and dropout.
    pub init: u64,
    /// Dataset generation, splitting and batch order.
    pub shuffle: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { init: 7, shuffle: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub layout: WindowLayout,
    #[serde(default)]
    pub model: Architecture,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub race: RaceConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_fraction() -> f64 {
    0.8
}

fn default_output() -> PathBuf {
    PathBuf::from("astcaps-out")
}

impl RunConfig {
    /// Reads and validates a config file. Relative dataset and output paths
    /// resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(m) = cfg.dataset.manifest() {
            let resolved = base.join(m);
            cfg.dataset.set_manifest(resolved);
        }
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Model configuration for a dataset with `classes` labels.
    pub fn model_config(&self, classes: usize) -> ModelConfig {
        ModelConfig::new(self.layout, classes, self.model)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        let classes = match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                windows_per_class,
                noise_sigma,
                ..
            } => {
                if *classes < 2 || *windows_per_class < 2 {
                    return bad("synthetic data needs at least 2 classes and 2 windows per class".into());
                }
                if !(*noise_sigma >= 0.0 && noise_sigma.is_finite()) {
                    return bad(format!("noise_sigma must be >= 0, got {noise_sigma}"));
                }
                *classes
            }
            DatasetConfig::Skeleton { .. } => {
                let groups = self.layout.rows / 3;
                if !self.layout.rows.is_multiple_of(3) || groups == 0 || !SKELETON_JOINTS.is_multiple_of(groups) {
                    return bad(format!(
                        "skeleton layout needs rows = 3 x a divisor of {SKELETON_JOINTS}, got {}",
                        self.layout.rows
                    ));
                }
                2
            }
            DatasetConfig::Timeseries { stride: Some(0), .. } => return bad("stride must be positive".into()),
            _ => 2,
        };
        self.model_config(classes)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.race
            .adam
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("race: {e}")))?;
        if self.race.hidden == 0 || self.race.batch_size == 0 || self.race.seeds.is_empty() {
            return bad("race needs positive hidden and batch_size and at least one seed".into());
        }
        Ok(())
    }
}
