//! Run configuration, read from TOML. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::init::{InitKind, InitSpec};
use crate::model::{ArchName, ArchSpec, Rational, Selection};
use crate::optim::{AdamConfig, Optimizer, SgdConfig};
use crate::popup::AbsMode;
use crate::tensor::DType;
use crate::zhou::ZhouEval;

pub const DATA_DIR_ENV: &str = "EDGEPOP_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    EdgePopup,
    Zhou,
    DenseSgd,
    DenseAdam,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::EdgePopup,
        Algorithm::Zhou,
        Algorithm::DenseSgd,
        Algorithm::DenseAdam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::EdgePopup => "edge_popup",
            Algorithm::Zhou => "zhou",
            Algorithm::DenseSgd => "dense_sgd",
            Algorithm::DenseAdam => "dense_adam",
        }
    }

    pub fn is_dense(self) -> bool {
        matches!(self, Algorithm::DenseSgd | Algorithm::DenseAdam)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub name: ArchName,
    #[serde(default = "Rational::one")]
    pub width_multiplier: Rational,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub kind: InitKind,
    #[serde(default)]
    pub scaled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Defaults to Adam for `dense_adam`, SGD otherwise.
    #[serde(default)]
    pub kind: Option<OptimizerKind>,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Defaults to cosine for SGD and constant for Adam.
    #[serde(default)]
    pub schedule: Option<Schedule>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Cifar10,
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: DatasetName,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    pub batch_size: usize,
    #[serde(default)]
    pub augment: bool,
    #[serde(default)]
    pub drop_last: bool,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_spread")]
    pub spread: f64,
    /// Seed of the synthetic data; independent of the run seed.
    #[serde(default)]
    pub data_seed: u64,
}

fn default_classes() -> usize {
    10
}
fn default_dim() -> usize {
    64
}
fn default_per_class() -> usize {
    100
}
fn default_spread() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// Keep fraction; values above 1 are read as a percentage.
    #[serde(default = "default_k")]
    pub k: f64,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Where artifacts go; not part of the run's identity, so never serialized.
    #[serde(default, skip_serializing)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default)]
    pub abs_mode: AbsMode,
    #[serde(default)]
    pub zhou_eval: ZhouEval,
    pub arch: ArchConfig,
    pub init: InitConfig,
    pub optimizer: OptimizerConfig,
    pub dataset: DatasetConfig,
}

fn default_k() -> f64 {
    0.5
}
fn default_precision() -> Precision {
    Precision::F32
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validated()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Normalizes `k` and checks cross-field constraints.
    pub fn validated(mut self) -> Result<Self> {
        if self.k > 1.0 && self.k <= 100.0 {
            self.k /= 100.0;
        }
        if self.algorithm.is_dense() {
            self.k = 1.0;
        }
        if !(self.k > 0.0 && self.k <= 1.0) {
            return Err(Error::Config(format!("k={} outside (0, 1]", self.k)));
        }
        let kind = self.optimizer_kind();
        match (self.algorithm, kind) {
            (Algorithm::DenseAdam, OptimizerKind::Sgd) => {
                return Err(Error::Config("dense_adam needs the adam optimizer".into()))
            }
            (Algorithm::DenseSgd, OptimizerKind::Adam) => {
                return Err(Error::Config("dense_sgd needs the sgd optimizer".into()))
            }
            _ => {}
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", o.lr)));
        }
        if !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay ≥ 0".into()));
        }
        if self.dataset.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.dataset.name == DatasetName::Blobs && self.dataset.classes < 2 {
            return Err(Error::Config("blobs need at least 2 classes".into()));
        }
        if self.arch.name != ArchName::Mlp && self.dataset.name == DatasetName::Blobs {
            return Err(Error::Config("conv architectures need image data (cifar10)".into()));
        }
        self.arch_spec().conv_widths().map_err(|e| Error::Config(e.to_string()))?;
        self.arch_spec().fc_widths().map_err(|e| Error::Config(e.to_string()))?;
        Ok(self)
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        self.optimizer.kind.unwrap_or(match self.algorithm {
            Algorithm::DenseAdam => OptimizerKind::Adam,
            _ => OptimizerKind::Sgd,
        })
    }

    pub fn schedule(&self) -> Schedule {
        self.optimizer.schedule.unwrap_or(match self.optimizer_kind() {
            OptimizerKind::Sgd => Schedule::Cosine,
            OptimizerKind::Adam => Schedule::Constant,
        })
    }

    pub fn optimizer(&self) -> Optimizer {
        let o = &self.optimizer;
        match self.optimizer_kind() {
            OptimizerKind::Sgd => Optimizer::Sgd(SgdConfig {
                lr: o.lr,
                momentum: o.momentum,
                weight_decay: o.weight_decay,
            }),
            OptimizerKind::Adam => Optimizer::Adam(AdamConfig {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
            }),
        }
    }

    pub fn classes(&self) -> usize {
        match self.dataset.name {
            DatasetName::Cifar10 => crate::data::CIFAR_CLASSES,
            DatasetName::Blobs => self.dataset.classes,
        }
    }

    pub fn arch_spec(&self) -> ArchSpec {
        ArchSpec::new(self.arch.name, self.arch.width_multiplier, self.classes())
    }

    pub fn init_spec(&self) -> Result<InitSpec> {
        if self.init.scaled {
            InitSpec::scaled(self.init.kind, self.k)
        } else {
            Ok(InitSpec::new(self.init.kind))
        }
    }

    pub fn selection(&self) -> Selection {
        match self.algorithm {
            Algorithm::EdgePopup => Selection::EdgePopup {
                abs_mode: self.abs_mode,
            },
            Algorithm::Zhou => Selection::Zhou {
                eval: self.zhou_eval,
            },
            Algorithm::DenseSgd | Algorithm::DenseAdam => Selection::Dense,
        }
    }

    /// Dataset root: the config value, else `$EDGEPOP_DATA_DIR`.
    pub fn data_dir(&self) -> Option<PathBuf> {
        self.dataset
            .data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
