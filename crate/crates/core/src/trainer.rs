//! Two-stage masker training.
//!
//! Stage 1 (localization) runs REINFORCE on the inversion rewards and fills a
//! replay buffer. Stage 2 (constrained) freezes the stage-1 policy as the
//! reference, draws groups of trajectories, prices each step with the DLOT
//! cost, and ascends a clipped group-relative surrogate whose advantages
//! subtract the cost channel scaled by the dynamic barrier `δ`.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::InteractionSequence;
use crate::diff::{Adam, Tape, Tensor};
use crate::error::{Error, Result};
use crate::ot::{reward_dist, DistConfig};
use crate::policy::{rollout, MaskerPolicy, RolloutConfig, Sampling, StepAction, Trajectory};
use crate::recommender::RecModel;
use crate::recommender::TargetEmbedMode;
use crate::rewards::{DirMode, DivSegments, PerturbationState, RewardBundle, RewardConfig};

/// Suffix-discounted sums `G_t = Σ_{u≥t} γ^{u−t} r_u`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Per-step returns-to-go of one trajectory. `cost` is the DLOT cost, the
/// negated consistency reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelReturns {
    pub dir: Vec<f64>,
    pub div: Vec<f64>,
    pub cost: Vec<f64>,
}

impl ChannelReturns {
    pub fn of(traj: &Trajectory, gamma: f64) -> Self {
        let channel = |f: fn(&RewardBundle) -> f64| {
            discounted_returns(&traj.rewards.iter().map(f).collect::<Vec<_>>(), gamma)
        };
        Self {
            dir: channel(|r| r.r_dir),
            div: channel(|r| r.r_div),
            cost: channel(|r| -r.r_dist),
        }
    }

    fn total(values: &[f64]) -> f64 {
        values.first().copied().unwrap_or(0.0)
    }
}

/// Per-step statistics over a group; trajectories may differ in length, and
/// a step seen by fewer than two trajectories gets zero advantages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub advantages: Vec<Vec<f64>>,
}

/// `Â_{i,t} = (r_{i,t} − μ_t) / (σ_t + ε_adv)` with the sample (G−1) std.
pub fn group_stats(values: &[Vec<f64>], eps_adv: f64) -> GroupStats {
    let steps = values.iter().map(|v| v.len()).max().unwrap_or(0);
    let mut mean = vec![0.0; steps];
    let mut std = vec![0.0; steps];
    for t in 0..steps {
        let col: Vec<f64> = values.iter().filter_map(|v| v.get(t).copied()).collect();
        let (m, s) = mean_std(&col);
        mean[t] = m;
        std[t] = s;
    }
    let advantages = values
        .iter()
        .map(|v| {
            v.iter()
                .enumerate()
                .map(|(t, &r)| {
                    let count = values.iter().filter(|w| w.len() > t).count();
                    if count < 2 {
                        0.0
                    } else {
                        (r - mean[t]) / (std[t] + eps_adv)
                    }
                })
                .collect()
        })
        .collect();
    GroupStats { mean, std, advantages }
}

/// Mean and sample standard deviation; the std of fewer than two values is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `ρ_st = μ + λ_st·σ` over trajectory-level cost returns.
pub fn stealth_threshold(costs: &[f64], lambda_st: f64) -> f64 {
    let (m, s) = mean_std(costs);
    m + lambda_st * s
}

/// Sign of the gradient inner product in the barrier numerator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    #[default]
    MainText,
    AppendixB4,
}

/// `δ = [(J − ρ ∓ g_costᵀ g_att) / (‖g_cost‖² + κ)]₊`, minus in `MainText`
/// mode and plus in `AppendixB4` mode.
pub fn barrier_delta(j_cost: f64, rho_st: f64, g_cost: &[f64], g_att: &[f64], kappa: f64, mode: SignMode) -> Result<f64> {
    if g_cost.len() != g_att.len() {
        return Err(Error::Dimension {
            op: "barrier_delta",
            left: vec![g_cost.len()],
            right: vec![g_att.len()],
        });
    }
    let inner: f64 = g_cost.iter().zip(g_att).map(|(a, b)| a * b).sum();
    let norm2: f64 = g_cost.iter().map(|a| a * a).sum();
    let numerator = match mode {
        SignMode::MainText => j_cost - rho_st - inner,
        SignMode::AppendixB4 => j_cost - rho_st + inner,
    };
    let delta = (numerator / (norm2 + kappa)).max(0.0);
    if delta.is_nan() {
        return Err(Error::numerical("barrier_delta", 0));
    }
    Ok(delta)
}

/// Policy inputs and validity masks for every step of every trajectory.
pub type StepInputs = Vec<Vec<(Tensor, Vec<bool>)>>;

pub fn step_inputs(policy: &MaskerPolicy, model: &RecModel, trajs: &[Trajectory]) -> Result<StepInputs> {
    trajs
        .par_iter()
        .map(|traj| {
            traj.states[..traj.actions.len()]
                .iter()
                .map(|s| policy.step_inputs(model, s))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

fn check_weights(trajs: &[Trajectory], weights: &[Vec<f64>]) -> Result<()> {
    let ok = trajs.len() == weights.len() && trajs.iter().zip(weights).all(|(t, w)| t.len() == w.len());
    if ok {
        Ok(())
    } else {
        Err(Error::contract("per-step weights must match the trajectories"))
    }
}

/// `(1/N) Σ_i Σ_t w_{i,t} ∇ log π(a_{i,t} | s_{i,t})` as a flat vector in
/// parameter order.
pub fn score_gradient(
    policy: &MaskerPolicy,
    inputs: &StepInputs,
    trajs: &[Trajectory],
    weights: &[Vec<f64>],
) -> Result<Vec<f64>> {
    check_weights(trajs, weights)?;
    if trajs.is_empty() {
        return Ok(vec![0.0; policy.num_params()]);
    }
    let mut tape = Tape::new();
    let vars = policy.record(&mut tape);
    let mut terms = Vec::new();
    for ((traj, steps), w) in trajs.iter().zip(inputs).zip(weights) {
        for ((action, (x, mask)), &wt) in traj.actions.iter().zip(steps).zip(w) {
            let lp = policy.tape_log_prob(&mut tape, &vars, x, mask, action.position)?;
            terms.push(tape.scale(lp, wt));
        }
    }
    let total = sum_vars(&mut tape, &terms)?;
    let Some(total) = total else {
        return Ok(vec![0.0; policy.num_params()]);
    };
    let loss = tape.scale(total, 1.0 / trajs.len() as f64);
    let grads = tape.backward(loss)?;
    let flat: Vec<f64> = vars.all().iter().flat_map(|&v| grads.get(v).to_vec()).collect();
    if flat.iter().any(|g| !g.is_finite()) {
        return Err(Error::numerical("policy gradient", 0));
    }
    Ok(flat)
}

fn sum_vars(tape: &mut Tape, terms: &[crate::diff::Var]) -> Result<Option<crate::diff::Var>> {
    let mut iter = terms.iter();
    let Some(&first) = iter.next() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in iter {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(acc))
}

/// Channel advantages of a group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryGroup {
    pub trajectories: Vec<Trajectory>,
    pub returns: Vec<ChannelReturns>,
    pub dir: GroupStats,
    pub div: GroupStats,
    pub cost: GroupStats,
}

impl TrajectoryGroup {
    pub fn new(trajectories: Vec<Trajectory>, gamma: f64, eps_adv: f64) -> Result<Self> {
        if trajectories.len() < 2 {
            return Err(Error::contract(format!(
                "a group needs at least two trajectories, got {}",
                trajectories.len()
            )));
        }
        let returns: Vec<ChannelReturns> = trajectories.iter().map(|t| ChannelReturns::of(t, gamma)).collect();
        let stats = |f: fn(&ChannelReturns) -> &Vec<f64>| {
            group_stats(&returns.iter().map(|r| f(r).clone()).collect::<Vec<_>>(), eps_adv)
        };
        Ok(Self {
            dir: stats(|r| &r.dir),
            div: stats(|r| &r.div),
            cost: stats(|r| &r.cost),
            returns,
            trajectories,
        })
    }

    /// Trajectory-level cost returns.
    pub fn cost_totals(&self) -> Vec<f64> {
        self.returns.iter().map(|r| ChannelReturns::total(&r.cost)).collect()
    }

    pub fn mean_total(&self, f: fn(&ChannelReturns) -> &Vec<f64>) -> f64 {
        mean_std(&self.returns.iter().map(|r| ChannelReturns::total(f(r))).collect::<Vec<_>>()).0
    }

    /// `Â_dir + Â_div − δ·Â_cost` per step.
    pub fn combined_advantages(&self, delta: f64) -> Vec<Vec<f64>> {
        (0..self.trajectories.len())
            .map(|i| {
                let (a, b, c) = (&self.dir.advantages[i], &self.div.advantages[i], &self.cost.advantages[i]);
                (0..a.len()).map(|t| a[t] + b[t] - delta * c[t]).collect()
            })
            .collect()
    }
}

/// REINFORCE with the constrained advantage `Â_dir + Â_div − δ·Â_cost`.
pub fn policy_gradient(policy: &MaskerPolicy, inputs: &StepInputs, group: &TrajectoryGroup, delta: f64) -> Result<Vec<f64>> {
    score_gradient(policy, inputs, &group.trajectories, &group.combined_advantages(delta))
}

/// Clipped surrogate `mean_{i,t} min(ρÂ, clip(ρ, 1−ε, 1+ε)Â)` with
/// `ρ = π_ψ(a)/π_ref(a)`, returned with its gradient.
pub fn grpo_surrogate(
    policy: &MaskerPolicy,
    inputs: &StepInputs,
    trajs: &[Trajectory],
    advantages: &[Vec<f64>],
    eps_clip: f64,
) -> Result<(f64, Vec<f64>)> {
    check_weights(trajs, advantages)?;
    let mut tape = Tape::new();
    let vars = policy.record(&mut tape);
    let mut terms = Vec::new();
    for ((traj, steps), adv) in trajs.iter().zip(inputs).zip(advantages) {
        for ((action, (x, mask)), &a) in traj.actions.iter().zip(steps).zip(adv) {
            if !action.log_prob_ref.is_finite() {
                return Err(Error::contract(format!(
                    "reference probability of action {} is zero",
                    action.position
                )));
            }
            let lp = policy.tape_log_prob(&mut tape, &vars, x, mask, action.position)?;
            let shifted = tape.add_scalar(lp, -action.log_prob_ref);
            let ratio = tape.exp(shifted);
            let clipped = tape.clamp(ratio, 1.0 - eps_clip, 1.0 + eps_clip);
            let plain = tape.scale(ratio, a);
            let clipped = tape.scale(clipped, a);
            terms.push(tape.minimum(plain, clipped)?);
        }
    }
    let count = terms.len();
    let Some(total) = sum_vars(&mut tape, &terms)? else {
        return Ok((0.0, vec![0.0; policy.num_params()]));
    };
    let objective = tape.scale(total, 1.0 / count as f64);
    let value = tape.value(objective).item();
    let grads = tape.backward(objective)?;
    let flat: Vec<f64> = vars.all().iter().flat_map(|&v| grads.get(v).to_vec()).collect();
    if !value.is_finite() || flat.iter().any(|g| !g.is_finite()) {
        return Err(Error::numerical("grpo surrogate", 0));
    }
    Ok((value, flat))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub trajectory: u64,
    pub state: PerturbationState,
    pub action: StepAction,
    pub rewards: RewardBundle,
    pub next_state: PerturbationState,
}

/// FIFO experience buffer shared by all groups.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    next_id: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            next_id: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn push_trajectory(&mut self, traj: &Trajectory) {
        let id = self.next_id;
        self.next_id += 1;
        for (i, (action, rewards)) in traj.actions.iter().zip(&traj.rewards).enumerate() {
            self.push(Transition {
                trajectory: id,
                state: traj.states[i].clone(),
                action: *action,
                rewards: *rewards,
                next_state: traj.states[i + 1].clone(),
            });
        }
    }

    /// Trajectories whose first transition is still stored, oldest first.
    pub fn trajectories(&self) -> Vec<Trajectory> {
        let mut by_id: BTreeMap<u64, Vec<&Transition>> = BTreeMap::new();
        for t in &self.items {
            by_id.entry(t.trajectory).or_default().push(t);
        }
        by_id
            .into_values()
            .filter(|ts| ts[0].state.step == 0)
            .map(|ts| Trajectory {
                states: std::iter::once(ts[0].state.clone())
                    .chain(ts.iter().map(|t| t.next_state.clone()))
                    .collect(),
                actions: ts.iter().map(|t| t.action).collect(),
                rewards: ts.iter().map(|t| t.rewards).collect(),
            })
            .collect()
    }

    /// `g` stored trajectories, without replacement when enough exist.
    pub fn sample_group(&self, g: usize, rng: &mut impl Rng) -> Vec<Trajectory> {
        let all = self.trajectories();
        if all.is_empty() {
            return Vec::new();
        }
        if all.len() >= g {
            sample_indices(rng, all.len(), g).into_iter().map(|i| all[i].clone()).collect()
        } else {
            (0..g).map(|_| all[rng.gen_range(0..all.len())].clone()).collect()
        }
    }
}

/// Where stage-2 groups come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSource {
    Fresh,
    #[default]
    Buffer,
}

/// Popularity tertile used to pick a target when none is given.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Head,
    #[default]
    Medium,
    Tail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Target item; `None` picks one from `target_tier`.
    pub target: Option<usize>,
    pub target_tier: Tier,
    /// Share of sequences that get polluted.
    pub fraction: f64,
    #[serde(rename = "K")]
    pub budget: usize,
    pub gamma: f64,
    pub policy_lr: f64,
    pub policy_hidden: usize,
    pub temperature: f64,
    pub stage1_epochs: usize,
    /// Rollouts per sequence per stage-1 epoch; they form one group.
    pub stage1_rollouts: usize,
    #[serde(rename = "G")]
    pub group_size: usize,
    pub updates_per_round: usize,
    pub max_rounds: usize,
    pub plateau_patience: usize,
    pub plateau_tol: f64,
    pub eps_clip: f64,
    pub eps_adv: f64,
    pub kappa: f64,
    pub lambda_st: f64,
    pub sign_mode: SignMode,
    pub stage2_source: GroupSource,
    pub buffer_capacity: usize,
    pub dir_mode: DirMode,
    pub div_segments: DivSegments,
    pub jitter: f64,
    pub target_embed: TargetEmbedMode,
    /// Derived from the experiment seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            target: None,
            target_tier: Tier::Medium,
            fraction: 0.10,
            budget: 2,
            gamma: 0.99,
            policy_lr: 1e-5,
            policy_hidden: 64,
            temperature: 1.0,
            stage1_epochs: 30,
            stage1_rollouts: 4,
            group_size: 32,
            updates_per_round: 20,
            max_rounds: 20,
            plateau_patience: 3,
            plateau_tol: 1e-3,
            eps_clip: 0.2,
            eps_adv: 1e-8,
            kappa: 1e-8,
            lambda_st: 1.0,
            sign_mode: SignMode::MainText,
            stage2_source: GroupSource::Buffer,
            buffer_capacity: 10_000,
            dir_mode: DirMode::Cumulative,
            div_segments: DivSegments::Contiguous,
            jitter: 1e-6,
            target_embed: TargetEmbedMode::Encode,
            seed: 0,
        }
    }
}

impl AttackConfig {
    /// Reward settings; `k` is the k-gram size shared with the OT features.
    pub fn reward_config(&self, k: usize) -> RewardConfig {
        RewardConfig {
            dir_mode: self.dir_mode,
            div_segments: self.div_segments,
            jitter: self.jitter,
            target_embed: self.target_embed,
            k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("attack.policy_lr", self.policy_lr),
            ("attack.temperature", self.temperature),
            ("attack.eps_clip", self.eps_clip),
            ("attack.eps_adv", self.eps_adv),
            ("attack.kappa", self.kappa),
            ("attack.jitter", self.jitter),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be positive and finite, got {v}")));
            }
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::config("attack.fraction", format!("must lie in (0, 1], got {}", self.fraction)));
        }
        if self.target == Some(crate::data::PAD) {
            return Err(Error::config("attack.target", "item 0 is the padding slot"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("attack.gamma", format!("must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.lambda_st >= 0.0 && self.lambda_st.is_finite()) {
            return Err(Error::config("attack.lambda_st", "must be non-negative"));
        }
        if !(self.plateau_tol >= 0.0) {
            return Err(Error::config("attack.plateau_tol", "must be non-negative"));
        }
        for (key, v) in [
            ("attack.K", self.budget),
            ("attack.policy_hidden", self.policy_hidden),
            ("attack.stage1_rollouts", self.stage1_rollouts),
            ("attack.updates_per_round", self.updates_per_round),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.group_size < 2 {
            return Err(Error::config("attack.G", "must be at least 2"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub round: usize,
    pub stage: u8,
    pub mean_return_dir: f64,
    pub mean_return_div: f64,
    /// Mean consistency-reward return (negated DLOT cost).
    pub mean_return_dist: f64,
    pub delta: f64,
    pub rho_st: Option<f64>,
    pub constraint_ok_rate: Option<f64>,
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub policy: MaskerPolicy,
    /// The frozen stage-1 policy.
    pub reference: MaskerPolicy,
    pub log: Vec<LogRecord>,
}

/// Derives a stream seed from a base seed and indices (splitmix64 mixing).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x = x.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

fn norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Adam ascent step on the policy from a flat gradient.
fn ascend(policy: &mut MaskerPolicy, adam: &mut Adam, grad: &[f64]) -> Result<()> {
    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
    let sizes: Vec<usize> = policy.params().iter().map(|t| t.len()).collect();
    let mut slices = Vec::with_capacity(4);
    let mut offset = 0;
    for n in sizes {
        slices.push(&neg[offset..offset + n]);
        offset += n;
    }
    adam.step(&mut policy.params_mut(), &slices)
}

/// Fills `r_dist` of every step.
fn price_consistency(model: &RecModel, trajs: &mut [Trajectory], dist: &DistConfig) -> Result<()> {
    trajs.par_iter_mut().try_for_each(|traj| {
        for (i, bundle) in traj.rewards.iter_mut().enumerate() {
            let d = reward_dist(model, &traj.states[i + 1], dist)?;
            bundle.r_dist = d.value;
            bundle.dist_degenerate = d.degenerate;
        }
        Ok(())
    })
}

/// Trains the masker on `sequences` (training prefixes of the attacked
/// subset). `on_round` sees every log record with the policy after that
/// round, so callers can keep a last-good checkpoint.
pub fn train_creat(
    model: &RecModel,
    sequences: &[InteractionSequence],
    target: usize,
    cfg: &AttackConfig,
    dist: &DistConfig,
    on_round: &mut dyn FnMut(&LogRecord, &MaskerPolicy) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    dist.dlot.validate()?;
    if dist.k == 0 {
        return Err(Error::config("ot.k", "must be positive"));
    }
    let sequences: Vec<&InteractionSequence> = sequences.iter().filter(|s| s.items.len() >= 2).collect();
    if sequences.is_empty() {
        return Err(Error::contract("no attacked sequence has a prefix of two or more items"));
    }
    let mut policy = MaskerPolicy::new(model.dim, cfg.policy_hidden, cfg.temperature, derive_seed(cfg.seed, &[0]))?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut log = Vec::new();
    let inv_cfg = RolloutConfig {
        budget: cfg.budget,
        sampling: Sampling::Sample,
        rewards: cfg.reward_config(dist.k),
        dist: None,
    };

    // stage 1: localization
    let mut adam = Adam::new(cfg.policy_lr, 0.0);
    for epoch in 0..cfg.stage1_epochs {
        let groups: Vec<Vec<Trajectory>> = sequences
            .par_iter()
            .enumerate()
            .map(|(s, seq)| {
                (0..cfg.stage1_rollouts)
                    .map(|g| {
                        let seed = derive_seed(cfg.seed, &[1, epoch as u64, s as u64, g as u64]);
                        rollout(&policy, None, model, seq, target, &inv_cfg, seed)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let mut trajs = Vec::new();
        let mut weights = Vec::new();
        let (mut dir_sum, mut div_sum) = (0.0, 0.0);
        for group in groups {
            let returns: Vec<ChannelReturns> = group.iter().map(|t| ChannelReturns::of(t, cfg.gamma)).collect();
            dir_sum += returns.iter().map(|r| ChannelReturns::total(&r.dir)).sum::<f64>();
            div_sum += returns.iter().map(|r| ChannelReturns::total(&r.div)).sum::<f64>();
            let a_dir = group_stats(&returns.iter().map(|r| r.dir.clone()).collect::<Vec<_>>(), cfg.eps_adv);
            let a_div = group_stats(&returns.iter().map(|r| r.div.clone()).collect::<Vec<_>>(), cfg.eps_adv);
            for (i, traj) in group.into_iter().enumerate() {
                buffer.push_trajectory(&traj);
                weights.push(
                    a_dir.advantages[i]
                        .iter()
                        .zip(&a_div.advantages[i])
                        .map(|(a, b)| a + b)
                        .collect(),
                );
                trajs.push(traj);
            }
        }
        let inputs = step_inputs(&policy, model, &trajs)?;
        let grad = score_gradient(&policy, &inputs, &trajs, &weights)?;
        ascend(&mut policy, &mut adam, &grad)?;
        let n = trajs.len() as f64;
        let record = LogRecord {
            round: epoch,
            stage: 1,
            mean_return_dir: dir_sum / n,
            mean_return_div: div_sum / n,
            mean_return_dist: 0.0,
            delta: 0.0,
            rho_st: None,
            constraint_ok_rate: None,
            grad_norm: norm(&grad),
        };
        on_round(&record, &policy)?;
        log.push(record);
    }
    let reference = policy.clone();

    // stage 2: constrained fine-tuning
    let mut adam = Adam::new(cfg.policy_lr, 0.0);
    let fresh_cfg = RolloutConfig { ..inv_cfg.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2]));
    let mut previous: Option<f64> = None;
    let mut flat_rounds = 0;
    for round in 0..cfg.max_rounds {
        let mut trajs = match cfg.stage2_source {
            GroupSource::Buffer if !buffer.is_empty() => buffer.sample_group(cfg.group_size, &mut rng),
            _ => {
                let picks: Vec<usize> = (0..cfg.group_size).map(|_| rng.gen_range(0..sequences.len())).collect();
                let fresh = picks
                    .par_iter()
                    .enumerate()
                    .map(|(g, &s)| {
                        let seed = derive_seed(cfg.seed, &[3, round as u64, g as u64]);
                        rollout(&policy, Some(&reference), model, sequences[s], target, &fresh_cfg, seed)
                    })
                    .collect::<Result<Vec<_>>>()?;
                for t in &fresh {
                    buffer.push_trajectory(t);
                }
                fresh
            }
        };
        price_consistency(model, &mut trajs, dist)?;
        let group = TrajectoryGroup::new(trajs, cfg.gamma, cfg.eps_adv)?;
        let costs = group.cost_totals();
        let rho_st = stealth_threshold(&costs, cfg.lambda_st);
        let j_cost = mean_std(&costs).0;
        let inputs = step_inputs(&policy, model, &group.trajectories)?;
        let g_cost = score_gradient(&policy, &inputs, &group.trajectories, &group.cost.advantages)?;
        let att: Vec<Vec<f64>> = group.combined_advantages(0.0);
        let g_att = score_gradient(&policy, &inputs, &group.trajectories, &att)?;
        let delta = barrier_delta(j_cost, rho_st, &g_cost, &g_att, cfg.kappa, cfg.sign_mode)?;
        let advantages = group.combined_advantages(delta);
        let mut grad_norm = 0.0;
        for _ in 0..cfg.updates_per_round {
            let (_, grad) = grpo_surrogate(&policy, &inputs, &group.trajectories, &advantages, cfg.eps_clip)?;
            grad_norm = norm(&grad);
            ascend(&mut policy, &mut adam, &grad)?;
        }
        let ok = costs.iter().filter(|&&c| c <= rho_st).count() as f64 / costs.len() as f64;
        let record = LogRecord {
            round,
            stage: 2,
            mean_return_dir: group.mean_total(|r| &r.dir),
            mean_return_div: group.mean_total(|r| &r.div),
            mean_return_dist: -j_cost,
            delta,
            rho_st: Some(rho_st),
            constraint_ok_rate: Some(ok),
            grad_norm,
        };
        on_round(&record, &policy)?;
        let inversion = record.mean_return_dir + record.mean_return_div;
        log.push(record);
        if let Some(prev) = previous {
            if (inversion - prev).abs() <= cfg.plateau_tol * prev.abs().max(1.0) {
                flat_rounds += 1;
            } else {
                flat_rounds = 0;
            }
        }
        previous = Some(inversion);
        if flat_rounds >= cfg.plateau_patience {
            log::info!("stage 2 plateaued after {} rounds", round + 1);
            break;
        }
    }
    Ok(TrainOutcome { policy, reference, log })
}
