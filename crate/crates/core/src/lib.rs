//! Profile-pollution attack laboratory for sequential recommenders.
//!
//! The crate trains a small GRU next-item recommender, learns a step-wise
//! perturbation policy that replaces a handful of interactions with a target
//! item, and measures how much exposure the target gains after the
//! recommender is retrained on the polluted data.
//!
//! Module map:
//!
//! * [`data`]: sequence datasets, k-core filtering, splits, synthetic generation
//! * [`diff`]: tape-based reverse-mode differentiation and Adam
//! * [`recommender`]: GRU encoder, next-item training, ranking
//! * [`rewards`]: directionality and diversity rewards
//! * [`ot`]: unbalanced Sinkhorn and dual-level co-optimal transport
//! * [`policy`]: the perturbation masker and rollouts
//! * [`trainer`]: two-stage constrained group-relative training
//! * [`eval`]: attack pipeline, exposure metrics, baselines
//! * [`config`]: experiment configuration and validation

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod diff;
pub mod error;
pub mod eval;
pub mod ot;
pub mod policy;
pub mod recommender;
pub mod rewards;
pub mod trainer;

pub use error::{Error, Result};
