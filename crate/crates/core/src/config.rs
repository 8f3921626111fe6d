//! TOML run configuration.
//!
//! Sections: `[data]`, `[model]`, `[sgd]`, `[mc]`, `[gate]`, `[loss]`,
//! `[threshold]`, `[train]`, `[sweep]`. Every key is optional and unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::nn::SgdConfig;
use crate::selector::GateConfig;
use crate::sweep::DEFAULT_PASSES;
use crate::threshold::ThresholdConfig;
use crate::trainer::{Mode, ModelConfig, TrainConfig};
use crate::uncertainty::McConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub epochs: usize,
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub mode: Mode,
    pub fixed_confidence_threshold: f64,
    pub feature_jitter: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            steps_per_epoch: t.steps_per_epoch,
            seed: t.seed,
            mode: t.mode,
            fixed_confidence_threshold: t.fixed_confidence_threshold,
            feature_jitter: t.feature_jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub passes: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            passes: DEFAULT_PASSES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub sgd: SgdConfig,
    pub mc: McConfig,
    pub gate: GateConfig,
    pub loss: LossConfig,
    pub threshold: ThresholdConfig,
    pub train: RunSection,
    pub sweep: SweepSection,
}

impl Config {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            steps_per_epoch: self.train.steps_per_epoch,
            seed: self.train.seed,
            mode: self.train.mode,
            fixed_confidence_threshold: self.train.fixed_confidence_threshold,
            feature_jitter: self.train.feature_jitter,
            model: self.model.clone(),
            sgd: self.sgd.clone(),
            mc: self.mc.clone(),
            gate: self.gate.clone(),
            loss: self.loss.clone(),
            threshold: self.threshold.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train_config().validate()?;
        if self.sweep.passes.is_empty() || self.sweep.passes.contains(&0) {
            return Err(Error::Config("sweep.passes must be a non-empty list of positive integers".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Parse and validate a configuration document.
pub fn parse_config(text: &str) -> Result<Config> {
    let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}
