//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationConfig;
use crate::byol::PretrainConfig;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::model::NetworkSpec;
use crate::pipeline::FinetuneConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Fills any section seed left unset.
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub data: SynthConfig,
    pub model: NetworkSpec,
    pub augment: AugmentationConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub grid: GridSpec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replaces the global seed and pushes it into every section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self.data.seed = Some(seed);
        self.pretrain.seed = Some(seed);
        self.finetune.seed = Some(seed);
        self
    }

    fn resolved(mut self) -> Self {
        if let Some(seed) = self.seed {
            self.data.seed.get_or_insert(seed);
            self.pretrain.seed.get_or_insert(seed);
            self.finetune.seed.get_or_insert(seed);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.augment.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.grid.validate()?;
        if self.model.input_dim != self.data.input_dim() {
            return Err(Error::Config(format!(
                "model.input_dim {} does not match data image_size² = {}",
                self.model.input_dim,
                self.data.input_dim()
            )));
        }
        if self.model.num_classes != self.data.num_classes {
            return Err(Error::Config(format!(
                "model.num_classes {} does not match data.num_classes {}",
                self.model.num_classes, self.data.num_classes
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn global_seed_fills_only_absent_sections() {
        let cfg = ExperimentConfig::from_toml("seed = 7\n[pretrain]\nseed = 3\n").unwrap();
        assert_eq!(cfg.data.seed, Some(7));
        assert_eq!(cfg.pretrain.seed, Some(3));
        assert_eq!(cfg.finetune.seed, Some(7));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml(
            "[data]\nper_class = 20\n[augment]\ncontrast_range = [0.9, 1.1]\n[model]\nhead_input = \"projection\"\n[grid]\neta_list = [0.1]\n",
        )
        .unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.augment.contrast_range, (0.9, 1.1));
    }

    #[test]
    fn unknown_keys_and_mismatches_are_config_errors() {
        assert!(matches!(
            ExperimentConfig::from_toml("[pretrain]\nepochz = 3\n"),
            Err(Error::Config(_))
        ));
        let cfg = ExperimentConfig::from_toml("[data]\nimage_size = 8\n").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
