//! Experiment configuration: one sectioned document holding every knob.
//!
//! A single top-level `seed` drives every random stream; per-stage seeds are
//! derived from it.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, SyntheticParams};
use crate::error::{Error, Result};
use crate::ot::{DistConfig, DlotConfig, SampleAxis};
use crate::recommender::TrainConfig;
use crate::trainer::{derive_seed, AttackConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Tsv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Interaction log for `tsv` sources.
    pub path: Option<PathBuf>,
    pub min_core: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub avg_len: usize,
    /// Keep only the most recent interactions of each user.
    pub max_len: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            min_core: 5,
            n_users: 200,
            n_items: 50,
            n_clusters: 5,
            avg_len: 20,
            max_len: Some(50),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecConfig {
    pub dim: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for RecConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            dim: 32,
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OtConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub eps: f64,
    pub p: u32,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub tol: f64,
    pub k: usize,
    pub sample_axis: SampleAxis,
}

impl Default for OtConfig {
    fn default() -> Self {
        let d = DistConfig::default();
        Self {
            lambda1: d.dlot.lambda1,
            lambda2: d.dlot.lambda2,
            eps: d.dlot.eps,
            p: d.dlot.p,
            outer_iters: d.dlot.outer_iters,
            inner_iters: d.dlot.inner_iters,
            tol: d.dlot.tol,
            k: d.k,
            sample_axis: d.sample_axis,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub rec: RecConfig,
    pub ot: OtConfig,
    pub attack: AttackConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match d.source {
            DataSource::Tsv if d.path.is_none() => {
                return Err(Error::config("data.path", "required when data.source = \"tsv\""));
            }
            DataSource::Synthetic => {
                for (key, v) in [
                    ("data.n_users", d.n_users),
                    ("data.n_items", d.n_items),
                    ("data.n_clusters", d.n_clusters),
                    ("data.avg_len", d.avg_len),
                ] {
                    if v == 0 {
                        return Err(Error::config(key, "must be positive"));
                    }
                }
                if d.n_clusters > d.n_items {
                    return Err(Error::config("data.n_clusters", "cannot exceed data.n_items"));
                }
            }
            DataSource::Tsv => {}
        }
        if d.min_core == 0 {
            return Err(Error::config("data.min_core", "must be positive"));
        }
        if matches!(d.max_len, Some(n) if n < 3) {
            return Err(Error::config("data.max_len", "must keep at least 3 items"));
        }
        if self.rec.dim == 0 {
            return Err(Error::config("rec.dim", "must be positive"));
        }
        self.train_config().validate()?;
        self.dist_config().dlot.validate()?;
        if self.ot.k == 0 {
            return Err(Error::config("ot.k", "must be positive"));
        }
        self.attack.validate()
    }

    pub fn synthetic_params(&self) -> SyntheticParams {
        SyntheticParams {
            n_users: self.data.n_users,
            n_items: self.data.n_items,
            n_clusters: self.data.n_clusters,
            avg_len: self.data.avg_len,
            seed: derive_seed(self.seed, &[100]),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.rec.lr,
            weight_decay: self.rec.weight_decay,
            batch_size: self.rec.batch_size,
            epochs: self.rec.epochs,
            seed: derive_seed(self.seed, &[101]),
        }
    }

    pub fn dist_config(&self) -> DistConfig {
        let o = &self.ot;
        DistConfig {
            dlot: DlotConfig {
                lambda1: o.lambda1,
                lambda2: o.lambda2,
                eps: o.eps,
                p: o.p,
                outer_iters: o.outer_iters,
                inner_iters: o.inner_iters,
                tol: o.tol,
            },
            k: o.k,
            sample_axis: o.sample_axis,
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            seed: derive_seed(self.seed, &[102]),
            ..self.attack.clone()
        }
    }

    /// Raw dataset before the leave-two-out split.
    pub fn load_raw(&self) -> Result<Dataset> {
        let raw = match self.data.source {
            DataSource::Synthetic => data::SyntheticGenerator::new(self.synthetic_params())?.generate()?,
            DataSource::Tsv => {
                let path = self.data.path.as_ref().expect("validated");
                data::load_tsv(path, self.data.min_core)?
            }
        };
        Ok(match self.data.max_len {
            Some(n) => raw.truncate(n),
            None => raw,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
