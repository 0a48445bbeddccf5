//! Experiment configuration files.
//!
//! A config is a TOML document with a top-level `seed` and the sections
//! `[scene]`, `[features]`, `[data]`, `[model]`, `[train]` and `[eval]`.
//! Every section is optional and every key has a default; unknown keys are
//! rejected with the offending key named.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::SceneConfig;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::model::{Activation, ModelConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub utterances: usize,
    /// Train / valid / test fractions.
    pub split: [f64; 3],
    /// Store train-split magnitude mean/std so loading standardises features.
    pub normalize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            utterances: 6000,
            split: [0.8, 0.1, 0.1],
            normalize: true,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.split.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.split.iter().any(|r| *r < 0.0) {
            return Err(Error::Config(format!(
                "data.split {:?} must be non-negative and sum to 1",
                self.split
            )));
        }
        if self.utterances == 0 {
            return Err(Error::Config("data.utterances must be positive".into()));
        }
        Ok(())
    }

    /// Utterance counts per split; the test split takes the rounding remainder.
    pub fn counts(&self) -> [usize; 3] {
        let n = self.utterances;
        let train = (self.split[0] * n as f64).floor() as usize;
        let valid = ((self.split[1] * n as f64).floor() as usize).min(n - train);
        [train, valid, n - train - valid]
    }
}

/// `[model]` as written in a file; data-dependent sizes may be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub channels: Option<usize>,
    pub vocab_size: Option<usize>,
    pub mag_dim: Option<usize>,
    pub pha_dim: Option<usize>,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub label_smoothing: f64,
    pub use_csa: bool,
    pub use_cca: bool,
    pub dropout: f64,
    pub qkv_activation: Activation,
    pub ln_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            channels: None,
            vocab_size: None,
            mag_dim: None,
            pha_dim: None,
            d_model: m.d_model,
            d_ff: m.d_ff,
            heads: m.heads,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            label_smoothing: m.label_smoothing,
            use_csa: m.use_csa,
            use_cca: m.use_cca,
            dropout: m.dropout,
            qkv_activation: m.qkv_activation,
            ln_eps: m.ln_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub beam: usize,
    pub length_norm: bool,
    pub max_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            beam: 4,
            length_norm: true,
            max_len: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub features: FeatureConfig,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.features.validate(self.scene.sample_rate)?;
        self.data.validate()?;
        self.train.validate()?;
        let hop = self.features.hop_len(self.scene.sample_rate);
        if let Some(&d) = self.scene.delays.iter().find(|&&d| d >= hop) {
            return Err(Error::Config(format!(
                "scene delay of {d} samples is not below the {hop}-sample hop"
            )));
        }
        self.model_config()?.validate()
    }

    /// Resolves `[model]` against the scene and feature settings.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        Ok(ModelConfig {
            channels: m.channels.unwrap_or(self.scene.channels),
            vocab_size: m.vocab_size.unwrap_or(self.scene.model_vocab()),
            mag_dim: m.mag_dim.unwrap_or(self.features.mag_dim()),
            pha_dim: m.pha_dim.unwrap_or(self.features.pha_dim()),
            d_model: m.d_model,
            d_ff: m.d_ff,
            heads: m.heads,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            label_smoothing: m.label_smoothing,
            use_csa: m.use_csa,
            use_cca: m.use_cca,
            dropout: m.dropout,
            qkv_activation: m.qkv_activation,
            ln_eps: m.ln_eps,
        })
    }
}
