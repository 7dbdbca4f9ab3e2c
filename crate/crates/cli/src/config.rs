//! The run configuration: every module's settings in one TOML file.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use pean::data::DatasetConfig;
use pean::recognizer::{CrnnConfig, RecognizerTrainConfig};
use pean::srnet::ModelConfig;
use pean::tpem::DiffusionConfig;
use pean::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognizerSection {
    /// Channels of the first conv layer.
    pub width: usize,
    pub hidden: usize,
    pub train: RecognizerTrainConfig,
}

impl Default for RecognizerSection {
    fn default() -> Self {
        Self {
            width: 16,
            hidden: 64,
            train: RecognizerTrainConfig::default(),
        }
    }
}

impl RecognizerSection {
    pub fn crnn(&self) -> CrnnConfig {
        CrnnConfig::image(self.width, self.hidden)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub batch: usize,
    /// Seed of the terminal diffusion noise.
    pub seed: u64,
    /// Upper bound on samples used for CKA.
    pub cka_samples: usize,
    /// Comparison grids written per evaluation.
    pub grids: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            batch: 50,
            seed: 0,
            cka_samples: 256,
            grids: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub recognizer: RecognizerSection,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.diffusion.schedule()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        anyhow::ensure!(self.eval.batch > 0, "eval.batch must be positive");
        Ok(())
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is serialisable")
    }
}
