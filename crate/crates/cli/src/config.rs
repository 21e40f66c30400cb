//! Run configuration: one TOML document with a section per module config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sscdl_core::dataset::LoadOptions;
use sscdl_core::eval::ExperimentSpec;
use sscdl_core::model::ModelConfig;
use sscdl_core::report;
use sscdl_core::train::TrainConfig;
use sscdl_core::{Error, Result};

pub const DATA_ROOT_ENV: &str = "SSCDL_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    pub load: LoadOptions,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            load: LoadOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub experiment: ExperimentSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
}

/// The parts of a [`RunConfig`] that determine results. Locations and the
/// fold subset are left out so that workers running different folds of one
/// experiment share a run directory.
#[derive(Serialize)]
struct Identity<'a> {
    dataset: &'a str,
    load: &'a LoadOptions,
    experiment: ExperimentSpec,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    pub fn fingerprint(&self) -> Result<String> {
        let id = Identity {
            dataset: &self.experiment.dataset,
            load: &self.data.load,
            experiment: ExperimentSpec {
                folds: Vec::new(),
                ..self.experiment.clone()
            },
            model: &self.model,
            train: &self.train,
        };
        report::fingerprint(&id)
    }

    /// Short form used as the run directory name.
    pub fn short_fingerprint(&self) -> Result<String> {
        Ok(self.fingerprint()?[..16].to_string())
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.output.dir.join(self.short_fingerprint()?))
    }

    /// Directory holding the dataset files: `<root>/<name>` when it exists,
    /// otherwise `<root>` itself.
    pub fn dataset_dir(&self) -> PathBuf {
        dataset_dir(&self.data.root, &self.experiment.dataset)
    }
}

pub fn dataset_dir(root: &Path, name: &str) -> PathBuf {
    let nested = root.join(name);
    if nested.join(format!("{name}_A.txt")).is_file() {
        nested
    } else {
        root.to_path_buf()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sscdl_core::eval::Variant;
    use sscdl_core::losses::NegativeCount;

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.experiment.variants = vec![Variant::Sscdl, Variant::SscdlCl];
        cfg.experiment.label_ratios = vec![0.3, 0.5, 0.7];
        cfg.train.cond_dist.negatives = NegativeCount::Fixed(8);
        cfg.train.early_stopping_patience = Some(30);
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("[train]\nlearning_rate = 0.01\n[experiment]\nvariants = [\"SSCDL_ft\"]\n").unwrap();
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.epochs_finetune, TrainConfig::default().epochs_finetune);
        assert_eq!(cfg.experiment.variants, vec![Variant::SscdlFt]);
        assert!(RunConfig::from_toml("[train]\nunknown = 1\n").is_err());
    }

    #[test]
    fn fingerprint_ignores_locations_and_fold_subset() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output.dir = "elsewhere".into();
        b.data.root = "/tmp".into();
        b.experiment.folds = vec![3];
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        b.train.seed = 1;
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
    }
}
