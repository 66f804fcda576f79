//! Resolved run configuration: a single JSON document with desk-scale
//! defaults. Unknown keys are rejected; CLI flags override file values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use fpad_core::minutiae::DetectorParams;
use fpad_nn::model::ModelConfig;
use fpad_nn::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("unknown model preset {0:?} (expected \"desk\" or \"paper\")")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    /// "desk" (56x56, 4 blocks, D=64) or "paper" (224x224, MobileNet-v1
    /// widths, D=1024).
    pub preset: String,
    pub lstm_units: Option<usize>,
    pub bidirectional: bool,
    pub frames: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            preset: "desk".to_string(),
            lstm_units: None,
            bidirectional: true,
            frames: 10,
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let mut config = match self.preset.as_str() {
            "desk" => ModelConfig::desk(),
            "paper" => ModelConfig::paper(),
            other => return Err(ConfigError::UnknownPreset(other.to_string())),
        };
        if let Some(units) = self.lstm_units {
            config.lstm_units = units;
        }
        config.bidirectional = self.bidirectional;
        config.frames = self.frames;
        Ok(config)
    }
}

fn default_fdr_target() -> f64 {
    0.002
}

fn default_folds() -> usize {
    5
}

fn default_patch_size() -> usize {
    48
}

/// Desk-scale training profile; the paper-scale values (80 epochs,
/// patience 20) are [`TrainConfig::default`].
fn desk_train_config() -> TrainConfig {
    TrainConfig {
        lr: 0.001,
        batch_size: 4,
        max_epochs: 8,
        patience: 3,
        seed: 0,
        val_fraction: 0.1,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub detector: DetectorParams,
    /// Patch side in native pixels (paper scale: 192).
    pub patch_size: usize,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub fdr_target: f64,
    pub folds: usize,
    /// Master seed: splits, per-fold model init, and training derive from it.
    pub seed: u64,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            detector: DetectorParams::default(),
            patch_size: default_patch_size(),
            model: ModelSettings::default(),
            train: desk_train_config(),
            fdr_target: default_fdr_target(),
            folds: default_folds(),
            seed: 0,
        }
    }
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            source: e,
        })
    }

    /// Deterministic per-purpose seed derivation (splitmix64 over the
    /// master seed xor a salt).
    pub fn derived_seed(&self, salt: u64) -> u64 {
        let mut z = self
            .seed
            .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}
