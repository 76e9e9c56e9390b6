//! Pattern inversion rewards on a sequence under attack.
//!
//! `R_dir` measures how far the target item sits from the context around each
//! perturbed position; `R_div` is the log-determinant of the Gram matrix of
//! unit-norm prototypes of the target-free segments.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{kgrams, InteractionSequence};
use crate::error::{Error, Result};
use crate::recommender::{RecModel, TargetEmbedMode};

/// A training prefix being rewritten toward a target item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationState {
    pub original: InteractionSequence,
    pub current: Vec<usize>,
    /// Perturbed indices in the order they were applied.
    pub perturbed_positions: Vec<usize>,
    pub budget: usize,
    pub target: usize,
    pub step: usize,
}

impl PerturbationState {
    pub fn new(original: InteractionSequence, budget: usize, target: usize) -> Result<Self> {
        if original.items.is_empty() {
            return Err(Error::contract("cannot attack an empty sequence"));
        }
        if target == crate::data::PAD {
            return Err(Error::contract("target item cannot be the padding slot"));
        }
        Ok(Self {
            current: original.items.clone(),
            original,
            perturbed_positions: Vec::new(),
            budget,
            target,
            step: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    pub fn remaining_budget(&self) -> usize {
        self.budget - self.step
    }

    pub fn is_perturbed(&self, position: usize) -> bool {
        self.perturbed_positions.contains(&position)
    }

    /// Positions that may still be replaced by the target.
    pub fn valid_positions(&self) -> Vec<usize> {
        if self.step >= self.budget {
            return Vec::new();
        }
        (0..self.current.len())
            .filter(|&t| self.current[t] != self.target && !self.is_perturbed(t))
            .collect()
    }

    /// Replaces `position` with the target.
    pub fn perturb(&self, position: usize) -> Result<Self> {
        if self.step >= self.budget {
            return Err(Error::contract(format!("perturbation budget {} exhausted", self.budget)));
        }
        if position >= self.current.len() {
            return Err(Error::contract(format!(
                "position {position} outside a prefix of length {}",
                self.current.len()
            )));
        }
        if self.is_perturbed(position) {
            return Err(Error::contract(format!("position {position} is already perturbed")));
        }
        if self.current[position] == self.target {
            return Err(Error::contract(format!("position {position} already holds the target")));
        }
        let mut next = self.clone();
        next.current[position] = self.target;
        next.perturbed_positions.push(position);
        next.step += 1;
        Ok(next)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let n = self.original.items.len();
        let ok = self.current.len() == n
            && self.perturbed_positions.len() == self.step
            && self.step <= self.budget
            && (0..n).all(|t| {
                if self.is_perturbed(t) {
                    self.current[t] == self.target
                } else {
                    self.current[t] == self.original.items[t]
                }
            })
            && self.perturbed_positions.iter().all(|&t| t < n);
        let mut sorted = self.perturbed_positions.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if ok && sorted.len() == self.perturbed_positions.len() {
            Ok(())
        } else {
            Err(Error::contract(format!("perturbation state invariants violated: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBundle {
    pub r_dir: f64,
    pub r_div: f64,
    pub r_dist: f64,
    pub step: usize,
    pub div_degenerate: bool,
    pub dist_degenerate: bool,
}

impl RewardBundle {
    pub fn is_finite(&self) -> bool {
        self.r_dir.is_finite() && self.r_div.is_finite() && self.r_dist.is_finite()
    }
}

/// Whether `R_dir` sums over every perturbed position or only the newest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirMode {
    #[default]
    Cumulative,
    Delta,
}

/// How target-free material is cut into prototypes for `R_div`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivSegments {
    #[default]
    Contiguous,
    Kgram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub dir_mode: DirMode,
    pub div_segments: DivSegments,
    pub jitter: f64,
    pub target_embed: TargetEmbedMode,
    /// Window size for k-gram prototypes.
    pub k: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            dir_mode: DirMode::Cumulative,
            div_segments: DivSegments::Contiguous,
            jitter: 1e-6,
            target_embed: TargetEmbedMode::Encode,
            k: 3,
        }
    }
}

/// What the rewards need from a recommender.
pub trait SeqEncoder {
    fn encode(&self, items: &[usize]) -> Result<Vec<f64>>;
    fn embed_target(&self, item: usize) -> Result<Vec<f64>>;
}

pub struct ModelEncoder<'a> {
    pub model: &'a RecModel,
    pub mode: TargetEmbedMode,
}

impl SeqEncoder for ModelEncoder<'_> {
    fn encode(&self, items: &[usize]) -> Result<Vec<f64>> {
        self.model.encode(items)
    }

    fn embed_target(&self, item: usize) -> Result<Vec<f64>> {
        self.model.embed_item(item, self.mode)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `Σ_t D(φ(prefix before t), φ(v*)) + D(φ(v*), φ(suffix after t))`; an empty
/// side contributes 0.
pub fn reward_dir(enc: &impl SeqEncoder, state: &PerturbationState, mode: DirMode) -> Result<f64> {
    let target = enc.embed_target(state.target)?;
    let positions: &[usize] = match mode {
        DirMode::Cumulative => &state.perturbed_positions,
        DirMode::Delta => match state.perturbed_positions.last() {
            Some(last) => std::slice::from_ref(last),
            None => &[],
        },
    };
    let mut total = 0.0;
    for &t in positions {
        let (before, rest) = state.current.split_at(t);
        let after = &rest[1..];
        if !before.is_empty() {
            total += euclidean(&enc.encode(before)?, &target);
        }
        if !after.is_empty() {
            total += euclidean(&target, &enc.encode(after)?);
        }
    }
    Ok(total)
}

/// Maximal runs of the sequence not containing `target`.
pub fn target_free_segments(items: &[usize], target: usize) -> Vec<&[usize]> {
    items.split(|&v| v == target).filter(|s| !s.is_empty()).collect()
}

/// `log det(G + jitter·I)` over the given vectors after normalising each to
/// unit length. Eigenvalues below `jitter` are clamped to it.
pub fn log_det_gram(vectors: &[Vec<f64>], jitter: f64) -> Result<f64> {
    let n = vectors.len();
    let units: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter().map(|x| x / norm).collect()
            } else {
                v.clone()
            }
        })
        .collect();
    let gram = DMatrix::from_fn(n, n, |i, j| {
        let dot: f64 = units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum();
        if i == j {
            dot + jitter
        } else {
            dot
        }
    });
    if gram.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("reward_div: Gram matrix", 0));
    }
    let eig = SymmetricEigen::new(gram);
    Ok(eig.eigenvalues.iter().map(|&l| l.max(jitter).ln()).sum())
}

/// Returns `(value, degenerate)`. With no target-free material the value is
/// 0 and the flag is set.
pub fn reward_div(enc: &impl SeqEncoder, state: &PerturbationState, cfg: &RewardConfig) -> Result<(f64, bool)> {
    let segments = target_free_segments(&state.current, state.target);
    let pieces: Vec<Vec<usize>> = match cfg.div_segments {
        DivSegments::Contiguous => segments.iter().map(|s| s.to_vec()).collect(),
        DivSegments::Kgram => segments
            .iter()
            .flat_map(|s| {
                let windows = kgrams(s, cfg.k).windows;
                if windows.is_empty() {
                    vec![s.to_vec()]
                } else {
                    windows.into_iter().map(|(_, w)| w).collect()
                }
            })
            .collect(),
    };
    if pieces.is_empty() {
        return Ok((0.0, true));
    }
    let protos = pieces.iter().map(|p| enc.encode(p)).collect::<Result<Vec<_>>>()?;
    Ok((log_det_gram(&protos, cfg.jitter)?, false))
}

/// `R_dir` and `R_div` for a state; `r_dist` is left at 0.
pub fn inversion_rewards(model: &RecModel, state: &PerturbationState, cfg: &RewardConfig) -> Result<RewardBundle> {
    let enc = ModelEncoder {
        model,
        mode: cfg.target_embed,
    };
    let r_dir = reward_dir(&enc, state, cfg.dir_mode)?;
    let (r_div, div_degenerate) = reward_div(&enc, state, cfg)?;
    Ok(RewardBundle {
        r_dir,
        r_div,
        r_dist: 0.0,
        step: state.step,
        div_degenerate,
        dist_degenerate: false,
    })
}
