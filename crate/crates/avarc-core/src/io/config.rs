//! Run configuration: one JSON file drives the whole pipeline. Unknown keys
//! are rejected so typos fail before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::StagePlan;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::fnv1a64;
use crate::tokenizer::{ScaleSchedule, TokenizerTrainConfig};
use crate::training::{CCAConfig, TrainConfig};

pub const DATA_DIR_ENV: &str = "AVARC_DATA_DIR";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Built-in jittered digit corpus.
    Synthetic {
        #[serde(default = "default_train_n")]
        train: usize,
        #[serde(default = "default_test_n")]
        test: usize,
    },
    /// IDX files (train/t10k pairs) under `dir`, or $AVARC_DATA_DIR.
    MnistIdx {
        #[serde(default)]
        dir: Option<PathBuf>,
    },
    /// `root/<class>/<image>` trees.
    ImageFolder {
        train_dir: PathBuf,
        test_dir: PathBuf,
        #[serde(default)]
        resize: Option<(usize, usize)>,
    },
}

fn default_train_n() -> usize {
    10_000
}

fn default_test_n() -> usize {
    1_000
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub vocab: usize,
    pub feat_dim: usize,
    pub width1: usize,
    pub width2: usize,
    pub schedule: Vec<(usize, usize)>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub commitment_weight: f64,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        let d = TokenizerTrainConfig::default();
        Self {
            vocab: d.vocab,
            feat_dim: d.feat_dim,
            width1: d.width1,
            width2: d.width2,
            schedule: d.schedule.sides().to_vec(),
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            commitment_weight: d.commitment_weight,
        }
    }
}

impl TokenizerSection {
    pub fn to_train_config(&self, seed: u64) -> Result<TokenizerTrainConfig> {
        Ok(TokenizerTrainConfig {
            vocab: self.vocab,
            feat_dim: self.feat_dim,
            width1: self.width1,
            width2: self.width2,
            schedule: ScaleSchedule::new(self.schedule.clone())?,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            commitment_weight: self.commitment_weight,
            seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            dim: 64,
            blocks: 2,
            heads: 4,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(
        &self,
        vocab: usize,
        n_classes: usize,
        schedule: ScaleSchedule,
        seed: u64,
    ) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            blocks: self.blocks,
            heads: self.heads,
            vocab,
            n_classes,
            schedule,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub label_dropout: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            label_dropout: d.label_dropout,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            label_dropout: self.label_dropout,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CcaSection {
    pub beta: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for CcaSection {
    fn default() -> Self {
        let d = CCAConfig::default();
        Self {
            beta: d.beta,
            lambda: d.lambda,
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
        }
    }
}

impl CcaSection {
    pub fn to_cca_config(&self, seed: u64) -> CCAConfig {
        CCAConfig {
            beta: self.beta,
            lambda: self.lambda,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub out_dir: PathBuf,
    #[serde(default)]
    pub tokenizer_ckpt: Option<PathBuf>,
    #[serde(default)]
    pub model_ckpt: Option<PathBuf>,
    #[serde(default)]
    pub cca_ckpt: Option<PathBuf>,
}

impl PathsSection {
    pub fn tokenizer_ckpt(&self) -> PathBuf {
        self.tokenizer_ckpt
            .clone()
            .unwrap_or_else(|| self.out_dir.join("tokenizer.avt"))
    }

    pub fn model_ckpt(&self) -> PathBuf {
        self.model_ckpt
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.avn"))
    }

    pub fn cca_ckpt(&self) -> PathBuf {
        self.cca_ckpt
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model-cca.avn"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub tokenizer: TokenizerSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub cca: CcaSection,
    #[serde(default)]
    pub plan: Option<StagePlan>,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ScaleSchedule::new(self.tokenizer.schedule.clone())
            .map_err(|e| Error::Config(format!("tokenizer.schedule: {e}")))?;
        if self.model.dim == 0 || self.model.dim % self.model.heads != 0 {
            return Err(Error::Config(
                "model.dim must be positive and divisible by model.heads".into(),
            ));
        }
        if let DataConfig::Synthetic { train, test } = &self.data {
            if *train == 0 || *test == 0 {
                return Err(Error::Config("synthetic sizes must be positive".into()));
            }
        }
        Ok(())
    }

    /// Stable hash of the canonical JSON form; recorded in output artifacts.
    pub fn hash(&self) -> u64 {
        fnv1a64(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Resolve train/test datasets from the data section; `MnistIdx` without a
/// dir falls back to $AVARC_DATA_DIR.
pub fn load_datasets(cfg: &DataConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    match cfg {
        DataConfig::Synthetic { train, test } => {
            let tr = data::synth::synthetic_digits(*train, seed);
            // disjoint stream for the test split
            let te = data::synth::synthetic_digits(*test, seed ^ 0x7465_7374);
            Ok((tr, te))
        }
        DataConfig::MnistIdx { dir } => {
            let dir = dir
                .clone()
                .or_else(|| std::env::var(DATA_DIR_ENV).ok().map(PathBuf::from))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "mnist_idx needs a dir (or set {DATA_DIR_ENV})"
                    ))
                })?;
            data::idx::load_mnist_dir(&dir)
        }
        DataConfig::ImageFolder {
            train_dir,
            test_dir,
            resize,
        } => {
            let tr = data::load_image_folder(train_dir, *resize)?;
            let te = data::load_image_folder(test_dir, *resize)?;
            if tr.n_classes != te.n_classes {
                return Err(Error::Data(format!(
                    "train has {} classes but test has {}",
                    tr.n_classes, te.n_classes
                )));
            }
            Ok((tr, te))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "data": {"kind": "synthetic", "train": 50, "test": 10},
            "paths": {"out_dir": "/tmp/avarc-test"}
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: RunConfig = serde_json::from_str(&minimal_json()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.tokenizer.vocab, 512);
        assert_eq!(cfg.model.dim, 64);
        assert_eq!(cfg.seed, 0);
        assert!(cfg.plan.is_none());
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = r#"{
            "data": {"kind": "synthetic"},
            "paths": {"out_dir": "/tmp/x"},
            "bogus_key": 1
        }"#;
        assert!(serde_json::from_str::<RunConfig>(bad).is_err());

        let bad_nested = r#"{
            "data": {"kind": "synthetic", "typo": 3},
            "paths": {"out_dir": "/tmp/x"}
        }"#;
        assert!(serde_json::from_str::<RunConfig>(bad_nested).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a: RunConfig = serde_json::from_str(&minimal_json()).unwrap();
        let b: RunConfig = serde_json::from_str(&minimal_json()).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seed = 99;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn synthetic_datasets_resolve() {
        let cfg = DataConfig::Synthetic { train: 30, test: 10 };
        let (tr, te) = load_datasets(&cfg, 4).unwrap();
        assert_eq!(tr.len(), 30);
        assert_eq!(te.len(), 10);
        // train and test streams differ
        assert_ne!(tr.images[0], te.images[0]);
    }
}
