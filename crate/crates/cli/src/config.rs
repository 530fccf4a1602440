use std::path::Path;

use multiclip::finetune::FinetuneConfig;
use multiclip::pretrain::{ModelConfig, PretrainConfig};
use multiclip::scene_data::generator::GeneratorConfig;
use multiclip::scene_data::io::{synthetic_split, Dataset, Split};
use multiclip::sqa_model::SqaConfig;
use multiclip::vqa_model::VqaConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Synthetic dataset settings used by `gen-data` and whenever a command runs
/// without `--data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train_scenes: 16,
            val_scenes: 0,
            test_scenes: 16,
            generator: GeneratorConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn scenes(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_scenes,
            Split::Val => self.val_scenes,
            Split::Test => self.test_scenes,
        }
    }

    pub fn synthesize(&self, split: Split) -> multiclip::Result<Dataset> {
        synthetic_split(self.seed, split, self.scenes(split), &self.generator)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Split that fine-tuned models are evaluated on.
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { split: Split::Test }
    }
}

/// Everything one experiment needs, read from a single TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune_vqa: FinetuneConfig,
    pub finetune_sqa: FinetuneConfig,
    pub vqa: VqaConfig,
    pub sqa: SqaConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune_vqa: FinetuneConfig::default(),
            finetune_sqa: FinetuneConfig::sqa_default(),
            vqa: VqaConfig::default(),
            sqa: SqaConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| match e {
                    CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: multiclip::Error| CliError::Config(e.to_string());
        self.data.generator.validate().map_err(cfg)?;
        self.model.validate().map_err(cfg)?;
        self.pretrain.validate().map_err(cfg)?;
        self.finetune_vqa.validate().map_err(cfg)?;
        self.finetune_sqa.validate().map_err(cfg)?;
        self.vqa.validate().map_err(cfg)?;
        self.sqa.validate().map_err(cfg)?;
        let classes = self.data.generator.num_classes();
        if classes != self.model.scene.num_classes {
            return Err(CliError::Config(format!(
                "model.scene.num_classes is {} but the generator defines {classes} classes",
                self.model.scene.num_classes
            )));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }
}
