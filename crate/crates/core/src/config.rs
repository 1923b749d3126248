//! Experiment configuration: one TOML file fully determines a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dal::DalConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::proto::LossWeights;
use crate::search::StrategyKind;
use crate::train::{LearningRates, TrainConfig};

/// Environment variable naming the artifact root.
pub const ARTIFACT_ROOT_ENV: &str = "PROTOLAB_ARTIFACTS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Generated on the fly; `per_class` images of each class.
    Synthetic,
    /// CSV manifest (`path,grade[,source]`), relative to the config file.
    Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub image_size: usize,
    /// Grades at or above this are the positive class.
    #[serde(default = "default_threshold")]
    pub grade_threshold: i64,
    /// `[train, val, test]` sizes.
    pub split: [usize; 3],
    /// Seeds image generation and the split, independently of
    /// `experiment.seed`, so runs with different seeds share one dataset.
    #[serde(default)]
    pub seed: u64,
}

fn default_threshold() -> i64 {
    1
}

/// Trunk pretraining on the synthetic source task before any target
/// training, standing in for weights pretrained on a large generic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "default_pretrain_per_class")]
    pub per_class: usize,
    #[serde(default = "default_pretrain_epochs")]
    pub epochs: usize,
    #[serde(default = "default_pretrain_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_pretrain_per_class() -> usize {
    300
}
fn default_pretrain_epochs() -> usize {
    10
}
fn default_pretrain_lr() -> f64 {
    1e-2
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            per_class: default_pretrain_per_class(),
            epochs: default_pretrain_epochs(),
            lr: default_pretrain_lr(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 || self.epochs == 0 {
            return Err(Error::Config("pretrain.per_class and pretrain.epochs must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("pretrain.lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    #[default]
    Simulated,
    Human,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default)]
    pub mode: OracleMode,
    /// Suggested console polling interval.
    #[serde(default = "default_poll")]
    pub poll_interval_ms: u64,
}

fn default_poll() -> u64 {
    2000
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            mode: OracleMode::Simulated,
            poll_interval_ms: default_poll(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub dal: DalConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a file; a relative manifest path is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(manifest) = &mut cfg.data.manifest {
            if manifest.is_relative() {
                *manifest = path.parent().unwrap_or(Path::new(".")).join(&*manifest);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let name = &self.experiment.name;
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(Error::Config(format!(
                "experiment.name {name:?} must be non-empty and use only [A-Za-z0-9._-]"
            )));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.dal.validate()?;
        if let Some(p) = &self.pretrain {
            p.validate()?;
        }
        let d = &self.data;
        if d.image_size != self.model.backbone.input_size {
            return Err(Error::Config(format!(
                "data.image_size {} differs from model.backbone.input_size {}",
                d.image_size, self.model.backbone.input_size
            )));
        }
        let [train, val, _] = d.split;
        if train == 0 || val == 0 {
            return Err(Error::Config("data.split needs nonempty train and val parts".into()));
        }
        match (d.kind, d.per_class, &d.manifest) {
            (DataKind::Synthetic, Some(_), None) | (DataKind::Manifest, None, Some(_)) => {}
            (DataKind::Synthetic, _, _) => {
                return Err(Error::Config("data.kind = \"synthetic\" needs data.per_class and no data.manifest".into()))
            }
            (DataKind::Manifest, _, _) => {
                return Err(Error::Config("data.kind = \"manifest\" needs data.manifest and no data.per_class".into()))
            }
        }
        if let Some(per_class) = d.per_class {
            let total: usize = d.split.iter().sum();
            if 2 * per_class < total {
                return Err(Error::Config(format!(
                    "data.per_class {per_class} gives {} images, fewer than the split total {total}",
                    2 * per_class
                )));
            }
        }
        if self.dal.init_size > train {
            return Err(Error::Config(format!(
                "dal.init_size {} exceeds the train split {train}",
                self.dal.init_size
            )));
        }
        if self.dal.budget.is_some_and(|b| b > train) {
            return Err(Error::Config("dal.budget exceeds the train split".into()));
        }
        if self.dal.strategy == StrategyKind::McDropout && self.model.backbone.dropout_sites.is_empty() {
            return Err(Error::Config(
                "dal.strategy = \"mc_dropout\" needs at least one model.backbone.dropout_sites entry".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// `<name>-<first 8 hex of hash>`.
    pub fn run_id(&self) -> String {
        format!("{}-{}", self.experiment.name, &self.hash()[..8])
    }

    /// The toy setting: 400/100/100 synthetic 32×32 images, three-block
    /// backbone, six prototypes per class.
    pub fn toy(name: &str) -> Self {
        ExperimentConfig {
            experiment: ExperimentSection {
                name: name.into(),
                seed: 0,
            },
            data: DataConfig {
                kind: DataKind::Synthetic,
                per_class: Some(300),
                manifest: None,
                image_size: 32,
                grade_threshold: 1,
                split: [400, 100, 100],
                seed: 0,
            },
            model: ModelConfig::toy(),
            loss: LossWeights::default(),
            train: TrainConfig {
                // Rates for a trunk pretrained on the small source task
                // rather than a large corpus; the last layer needs a much
                // larger step to recover from push in 15 steps.
                lr: LearningRates {
                    backbone: 3e-3,
                    add_on: 3e-3,
                    prototypes: 3e-3,
                    last_layer: 0.1,
                    head: 3e-3,
                },
                ..TrainConfig::default()
            },
            dal: DalConfig::default(),
            oracle: OracleConfig::default(),
            pretrain: Some(PretrainConfig::default()),
        }
    }
}

/// Artifact root from the environment, defaulting to `./artifacts`.
pub fn artifact_root() -> PathBuf {
    std::env::var_os(ARTIFACT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("artifacts"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[experiment]
name = "toy"
seed = 3

[data]
kind = "synthetic"
per_class = 300
image_size = 32
split = [400, 100, 100]

[model.backbone]
blocks = [{ out_channels = 16, stride = 2 }, { out_channels = 32, stride = 2 }, { out_channels = 64, stride = 2 }]
input_size = 32
latent_channels = 64
dropout_sites = [0, 1, 2]

[model.prototypes]
per_class = 6
"#;

    #[test]
    fn minimal_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.experiment.seed, 3);
        assert_eq!(cfg.dal.init_size, 100);
        assert_eq!(cfg.dal.partition, 0.875);
        assert_eq!(cfg.train.joint_epochs, 10);
        assert_eq!(cfg.model.prototypes.total(), 12);
        assert_eq!(cfg.loss, LossWeights::default());
    }

    #[test]
    fn toml_round_trip_keeps_the_hash() {
        let cfg = ExperimentConfig::toy("roundtrip");
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.run_id().len(), "roundtrip-".len() + 8);
        let mut other = cfg.clone();
        other.experiment.seed = 1;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn diagnostics_name_the_field() {
        let bad = MINIMAL.replace("per_class = 6", "per_class = 6\nbogus = 1");
        let e = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");

        let bad = MINIMAL.replace("seed = 3", "seed = 3\n[dal]\npartition = 2.0");
        let e = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(e.contains("dal.partition"), "{e}");

        let bad = MINIMAL.replace("image_size = 32", "image_size = 64");
        let e = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(e.contains("data.image_size"), "{e}");

        let mut cfg = ExperimentConfig::toy("x");
        cfg.model.backbone.dropout_sites.clear();
        assert!(cfg.validate().unwrap_err().to_string().contains("dropout_sites"));
        cfg.experiment.name = "has space".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn relative_manifest_resolves_next_to_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let text = MINIMAL.replace("kind = \"synthetic\"\nper_class = 300", "kind = \"manifest\"\nmanifest = \"data/m.csv\"");
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, text).unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.data.manifest, Some(dir.path().join("data/m.csv")));
    }
}
