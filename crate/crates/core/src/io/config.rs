//! Experiment configuration file (TOML). Every key has a default, so an
//! empty file is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::EvalSetting;
use crate::metrics::SinkhornConfig;
use crate::models::{ClassifierConfig, GeneratorConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n: usize,
    pub d: usize,
    pub horizon: usize,
    pub epsilon: f64,
    pub cluster_separation: f64,
    /// Optional initial cohort (`t = 1` rows with labels) replacing the synthetic one.
    pub csv: Option<PathBuf>,
    /// Epochs used to fit the ground-truth classifier on the first step.
    pub ground_truth_epochs: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n: 10_000,
            d: 6,
            horizon: 10,
            epsilon: crate::simulator::DEFAULT_EPSILON,
            cluster_separation: 2.0,
            csv: None,
            ground_truth_epochs: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub classifier_hidden: Vec<usize>,
    pub generator_hidden: [usize; 2],
    /// Noise width per step; defaults to the feature dimension.
    pub noise_dim: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classifier_hidden: vec![32, 64],
            generator_hidden: [64, 64],
            noise_dim: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub sinkhorn: SinkhornConfig,
    pub evaluation: EvalSetting,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::invalid("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid("config", e.to_string()))
    }

    /// Checks every downstream precondition that does not need data.
    pub fn validate(&self) -> Result<()> {
        let ds = &self.dataset;
        if ds.csv.is_none() && ds.n < 10 {
            return Err(Error::invalid("dataset.n", "need at least 10 individuals"));
        }
        if ds.d == 0 {
            return Err(Error::invalid("dataset.d", "must be at least 1"));
        }
        if ds.horizon < 2 {
            return Err(Error::invalid("dataset.horizon", "must be at least 2"));
        }
        if !(ds.epsilon >= 0.0) || !ds.epsilon.is_finite() {
            return Err(Error::invalid("dataset.epsilon", "must be finite and >= 0"));
        }
        if !ds.cluster_separation.is_finite() {
            return Err(Error::invalid("dataset.cluster_separation", "must be finite"));
        }
        if self.model.classifier_hidden.contains(&0) || self.model.generator_hidden.contains(&0) {
            return Err(Error::invalid("model", "layer widths must be positive"));
        }
        if self.model.noise_dim == Some(0) {
            return Err(Error::invalid("model.noise_dim", "must be positive"));
        }
        self.training.validate().map_err(|e| prefix(e, "training"))?;
        self.sinkhorn.validate()?;
        self.evaluation.validate().map_err(|e| prefix(e, "evaluation"))?;
        let generated = ds.horizon;
        if self.training.target_t > generated {
            return Err(Error::invalid(
                "training.target_T",
                format!("{} exceeds the generated horizon {generated}", self.training.target_t),
            ));
        }
        Ok(())
    }

    pub fn classifier_config(&self, d: usize) -> ClassifierConfig {
        ClassifierConfig {
            feature_dim: d,
            hidden: self.model.classifier_hidden.clone(),
        }
    }

    pub fn generator_config(&self, d: usize) -> GeneratorConfig {
        GeneratorConfig {
            feature_dim: d,
            noise_dim: self.model.noise_dim.unwrap_or(d),
            hidden: self.model.generator_hidden,
        }
    }

    /// Training options with the master seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.training.clone()
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn prefix(err: Error, section: &str) -> Error {
    match err {
        Error::Validation { field, reason } if !field.contains('.') => Error::Validation {
            field: format!("{section}.{field}"),
            reason,
        },
        other => other,
    }
}
