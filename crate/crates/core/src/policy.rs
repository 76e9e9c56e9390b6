//! The perturbation masker: a small MLP scoring each position of the current
//! sequence, a masked softmax over valid positions, and step-wise rollouts
//! that replace one position with the target per step.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, Uniform, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::InteractionSequence;
use crate::diff::{Checkpoint, Tape, Tensor, Var, CHECKPOINT_VERSION};
use crate::error::{Error, Result};
use crate::ot::{reward_dist, DistConfig};
use crate::recommender::RecModel;
use crate::rewards::{inversion_rewards, PerturbationState, RewardBundle, RewardConfig};

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskerPolicy {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub temperature: f64,
}

/// Tape handles of the policy parameters.
#[derive(Clone, Copy, Debug)]
pub struct PolicyVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl PolicyVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

impl MaskerPolicy {
    /// `input_dim` is the recommender's hidden size; two extra inputs carry
    /// the position fraction and the perturbed flag.
    pub fn new(input_dim: usize, hidden: usize, temperature: f64, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::config("attack.policy_hidden", "policy sizes must be positive"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::config("attack.temperature", format!("must be positive, got {temperature}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_in = input_dim + 2;
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a);
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(&mut rng)).collect())
        };
        Ok(Self {
            w1: uniform(n_in, hidden, n_in)?,
            b1: Tensor::zeros(1, hidden),
            w2: uniform(hidden, 1, hidden)?,
            b2: Tensor::zeros(1, 1),
            temperature,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows() - 2
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.values.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension {
                op: "set_flat_params",
                left: vec![self.num_params()],
                right: vec![flat.len()],
            });
        }
        let mut offset = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Per-position inputs `[h_t, (t+1)/L, perturbed]` and the validity mask.
    pub fn step_inputs(&self, model: &RecModel, state: &PerturbationState) -> Result<(Tensor, Vec<bool>)> {
        if model.dim != self.input_dim() {
            return Err(Error::Dimension {
                op: "policy inputs",
                left: vec![model.dim],
                right: vec![self.input_dim()],
            });
        }
        let hidden = model.hidden_states(&state.current)?;
        let len = hidden.len();
        let mut values = Vec::with_capacity(len * (model.dim + 2));
        for (t, h) in hidden.iter().enumerate() {
            values.extend_from_slice(h);
            values.push((t + 1) as f64 / len as f64);
            values.push(if state.is_perturbed(t) { 1.0 } else { 0.0 });
        }
        let mut mask = vec![false; len];
        for t in state.valid_positions() {
            mask[t] = true;
        }
        Ok((Tensor::matrix(len, model.dim + 2, values)?, mask))
    }

    /// Temperature-scaled logit per position.
    pub fn logits(&self, inputs: &Tensor) -> Vec<f64> {
        let hidden = self.b1.cols();
        (0..inputs.rows())
            .map(|t| {
                let x = inputs.row_slice(t);
                let mut out = self.b2.values[0];
                for j in 0..hidden {
                    let mut a = self.b1.values[j];
                    for (p, xp) in x.iter().enumerate() {
                        a += xp * self.w1.at(p, j);
                    }
                    out += a.tanh() * self.w2.values[j];
                }
                out / self.temperature
            })
            .collect()
    }

    /// Probability of each position; invalid positions get 0. `None` when
    /// no position is valid.
    pub fn action_dist(&self, model: &RecModel, state: &PerturbationState) -> Result<Option<Vec<f64>>> {
        let (inputs, mask) = self.step_inputs(model, state)?;
        masked_softmax(&self.logits(&inputs), &mask)
    }

    pub fn record(&self, tape: &mut Tape) -> PolicyVars {
        PolicyVars {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }

    /// `log π(position | state)` on the tape.
    pub fn tape_log_prob(
        &self,
        tape: &mut Tape,
        vars: &PolicyVars,
        inputs: &Tensor,
        mask: &[bool],
        position: usize,
    ) -> Result<Var> {
        let x = tape.leaf(inputs.clone());
        let pre = tape.matmul(x, vars.w1)?;
        let pre = tape.add_row(pre, vars.b1)?;
        let act = tape.tanh(pre);
        let out = tape.matmul(act, vars.w2)?;
        let out = tape.add_row(out, vars.b2)?;
        let logits = tape.scale(out, 1.0 / self.temperature);
        let logp = tape.log_softmax_masked(logits, mask)?;
        tape.select(logp, position)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert("policy.w1".to_string(), self.w1.clone());
        tensors.insert("policy.b1".to_string(), self.b1.clone());
        tensors.insert("policy.w2".to_string(), self.w2.clone());
        tensors.insert("policy.b2".to_string(), self.b2.clone());
        tensors.insert("policy.temperature".to_string(), Tensor::scalar(self.temperature));
        Checkpoint {
            version: CHECKPOINT_VERSION,
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let w1 = ck.get("policy.w1")?.clone();
        let b1 = ck.get("policy.b1")?.clone();
        let w2 = ck.get("policy.w2")?.clone();
        let b2 = ck.get("policy.b2")?.clone();
        let temperature = ck.get("policy.temperature")?.item();
        let hidden = w1.cols();
        let consistent = w1.rows() > 2
            && b1.shape == [1, hidden]
            && w2.shape == [hidden, 1]
            && b2.shape == [1, 1]
            && temperature > 0.0;
        if !consistent {
            return Err(Error::contract("policy checkpoint has inconsistent shapes"));
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            temperature,
        })
    }
}

pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Option<Vec<f64>>> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(None);
    }
    if !max.is_finite() {
        return Err(Error::numerical("policy logits", 0));
    }
    let exps: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&x, &m)| if m { (x - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(Some(exps.into_iter().map(|e| e / total).collect()))
}

/// Replaces `position` with the target; errors on an invalid position or an
/// exhausted budget.
pub fn apply_mask(state: &PerturbationState, position: usize) -> Result<PerturbationState> {
    state.perturb(position)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepAction {
    pub position: usize,
    pub log_prob: f64,
    /// Log-probability under the reference policy; equals `log_prob` when
    /// there is none.
    pub log_prob_ref: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Sample,
    Greedy,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub budget: usize,
    pub sampling: Sampling,
    pub rewards: RewardConfig,
    /// Consistency reward settings; `None` skips `R_dist`.
    pub dist: Option<DistConfig>,
}

/// `states[i]` is the state before `actions[i]`; `rewards[i]` is computed on
/// the state after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<PerturbationState>,
    pub actions: Vec<StepAction>,
    pub rewards: Vec<RewardBundle>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn final_state(&self) -> &PerturbationState {
        self.states.last().expect("trajectory holds its initial state")
    }
}

pub fn step_rewards(model: &RecModel, state: &PerturbationState, cfg: &RolloutConfig) -> Result<RewardBundle> {
    let mut bundle = inversion_rewards(model, state, &cfg.rewards)?;
    if let Some(dist) = &cfg.dist {
        let d = reward_dist(model, state, dist)?;
        bundle.r_dist = d.value;
        bundle.dist_degenerate = d.degenerate;
    }
    if !bundle.is_finite() {
        return Err(Error::numerical("step rewards", state.step));
    }
    Ok(bundle)
}

/// Up to `budget` single-position replacements of `sequence` by `target`,
/// stopping early when no valid position remains.
pub fn rollout(
    policy: &MaskerPolicy,
    reference: Option<&MaskerPolicy>,
    model: &RecModel,
    sequence: &InteractionSequence,
    target: usize,
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<Trajectory> {
    if sequence.items.len() < 2 {
        return Err(Error::contract("rollout needs a prefix of at least two items"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = PerturbationState::new(sequence.clone(), cfg.budget, target)?;
    let mut traj = Trajectory {
        states: vec![state.clone()],
        actions: Vec::new(),
        rewards: Vec::new(),
    };
    while state.step < cfg.budget {
        let (inputs, mask) = policy.step_inputs(model, &state)?;
        let Some(probs) = masked_softmax(&policy.logits(&inputs), &mask)? else {
            break;
        };
        let position = match cfg.sampling {
            Sampling::Sample => WeightedIndex::new(&probs)
                .map_err(|e| Error::numerical(format!("action sampling: {e}"), state.step))?
                .sample(&mut rng),
            Sampling::Greedy => argmax(&probs),
        };
        let log_prob = probs[position].ln();
        let log_prob_ref = match reference {
            Some(r) => {
                let p = masked_softmax(&r.logits(&inputs), &mask)?.expect("same mask as the policy");
                p[position].ln()
            }
            None => log_prob,
        };
        state = apply_mask(&state, position)?;
        traj.rewards.push(step_rewards(model, &state, cfg)?);
        traj.actions.push(StepAction {
            position,
            log_prob,
            log_prob_ref,
        });
        traj.states.push(state.clone());
    }
    Ok(traj)
}

/// First index of the largest entry.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::testing::{assert_grads_close, numeric_grad};
    use proptest::prelude::*;

    fn seq(items: &[usize]) -> InteractionSequence {
        InteractionSequence {
            user: "u".into(),
            items: items.to_vec(),
        }
    }

    fn setup() -> (RecModel, MaskerPolicy) {
        (RecModel::new(10, 6, 1).unwrap(), MaskerPolicy::new(6, 16, 1.0, 2).unwrap())
    }

    fn cfg(budget: usize) -> RolloutConfig {
        RolloutConfig {
            budget,
            ..Default::default()
        }
    }

    #[test]
    fn equal_logits_give_uniform_valid_probs() {
        let p = masked_softmax(&[0.3; 5], &[true, true, false, true, true]).unwrap().unwrap();
        assert_eq!(p, vec![0.25, 0.25, 0.0, 0.25, 0.25]);
        let one = masked_softmax(&[5.0, -1.0], &[false, true]).unwrap().unwrap();
        assert_eq!(one, vec![0.0, 1.0]);
        assert!(masked_softmax(&[1.0], &[false]).unwrap().is_none());
    }

    #[test]
    fn apply_mask_examples() {
        let s = PerturbationState::new(seq(&[1, 2, 3]), 2, 9).unwrap();
        let s1 = apply_mask(&s, 1).unwrap();
        assert_eq!(s1.current, vec![1, 9, 3]);
        assert_eq!(s1.perturbed_positions, vec![1]);
        assert!(apply_mask(&s1, 1).is_err());
        let s2 = apply_mask(&s1, 0).unwrap();
        assert_eq!(s2.perturbed_positions.len(), 2);
        assert!(apply_mask(&s2, 2).is_err());
    }

    #[test]
    fn single_step_rollout() {
        let (model, policy) = setup();
        let t = rollout(&policy, None, &model, &seq(&[1, 2, 3, 4]), 7, &cfg(1), 0).unwrap();
        assert_eq!(t.actions.len(), 1);
        assert_eq!(t.rewards.len(), 1);
        assert_eq!(t.states.len(), 2);
    }

    #[test]
    fn rollout_stops_when_nothing_is_valid() {
        let (model, policy) = setup();
        let t = rollout(&policy, None, &model, &seq(&[7, 2, 7]), 7, &cfg(3), 0).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.final_state().current, vec![7, 7, 7]);
    }

    #[test]
    fn greedy_rollout_picks_enumerated_argmax() {
        let (model, policy) = setup();
        let c = RolloutConfig {
            sampling: Sampling::Greedy,
            ..cfg(1)
        };
        let s = seq(&[1, 2, 3, 4, 5]);
        let t = rollout(&policy, None, &model, &s, 8, &c, 0).unwrap();
        let probs = policy
            .action_dist(&model, &PerturbationState::new(s, 1, 8).unwrap())
            .unwrap()
            .unwrap();
        let best = (0..probs.len())
            .max_by(|&a, &b| probs[a].partial_cmp(&probs[b]).unwrap())
            .unwrap();
        assert_eq!(t.actions[0].position, best);
    }

    #[test]
    fn rollouts_are_seed_deterministic_and_log_probs_recompute() {
        let (model, policy) = setup();
        let c = RolloutConfig {
            dist: Some(DistConfig::default()),
            ..cfg(3)
        };
        let s = seq(&[1, 2, 3, 4, 5, 6]);
        let a = rollout(&policy, None, &model, &s, 8, &c, 42).unwrap();
        let b = rollout(&policy, None, &model, &s, 8, &c, 42).unwrap();
        assert_eq!(a, b);
        for (state, action) in a.states.iter().zip(&a.actions) {
            let probs = policy.action_dist(&model, state).unwrap().unwrap();
            assert!((probs[action.position].ln() - action.log_prob).abs() < 1e-12);
            assert_eq!(action.log_prob, action.log_prob_ref);
        }
        let last = a.final_state();
        last.check_invariants().unwrap();
        let changed = last.original.items.iter().zip(&last.current).filter(|(x, y)| x != y).count();
        assert_eq!(changed, 3);
    }

    #[test]
    fn reference_log_probs_come_from_the_reference() {
        let (model, policy) = setup();
        let reference = MaskerPolicy::new(6, 16, 1.0, 99).unwrap();
        let t = rollout(&policy, Some(&reference), &model, &seq(&[1, 2, 3, 4]), 8, &cfg(2), 5).unwrap();
        for (state, action) in t.states.iter().zip(&t.actions) {
            let p = reference.action_dist(&model, state).unwrap().unwrap();
            assert!((p[action.position].ln() - action.log_prob_ref).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_log_prob_matches_plain_forward_and_finite_differences() {
        let (model, policy) = setup();
        let state = PerturbationState::new(seq(&[1, 2, 3, 4, 5]), 2, 8).unwrap().perturb(2).unwrap();
        let (inputs, mask) = policy.step_inputs(&model, &state).unwrap();
        let position = 4;
        let mut tape = Tape::new();
        let vars = policy.record(&mut tape);
        let lp = policy.tape_log_prob(&mut tape, &vars, &inputs, &mask, position).unwrap();
        let plain = policy.action_dist(&model, &state).unwrap().unwrap()[position].ln();
        assert!((tape.value(lp).item() - plain).abs() < 1e-12);
        let grads = tape.backward(lp).unwrap();
        let analytic: Vec<f64> = vars.all().iter().flat_map(|&v| grads.get(v).to_vec()).collect();
        let numeric = numeric_grad(&policy.flat_params(), 1e-6, |x| {
            let mut p = policy.clone();
            p.set_flat_params(x).unwrap();
            masked_softmax(&p.logits(&inputs), &mask).unwrap().unwrap()[position].ln()
        });
        assert_grads_close(&analytic, &numeric, 1e-3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (_, policy) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        policy.to_checkpoint().save(&path).unwrap();
        let back = MaskerPolicy::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(back, policy);
    }

    #[test]
    fn bad_policy_sizes_are_config_errors() {
        assert!(matches!(MaskerPolicy::new(0, 4, 1.0, 0), Err(Error::Config { .. })));
        assert!(matches!(MaskerPolicy::new(4, 4, 0.0, 0), Err(Error::Config { .. })));
    }

    proptest! {
        #[test]
        fn action_probs_sum_to_one(
            items in proptest::collection::vec(1usize..10, 2..12),
            perturb in 0usize..12,
        ) {
            let (model, policy) = setup();
            let mut state = PerturbationState::new(seq(&items), 2, 9).unwrap();
            let valid = state.valid_positions();
            if !valid.is_empty() {
                state = state.perturb(valid[perturb % valid.len()]).unwrap();
            }
            if let Some(p) = policy.action_dist(&model, &state).unwrap() {
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (t, &x) in p.iter().enumerate() {
                    if !state.valid_positions().contains(&t) {
                        prop_assert_eq!(x, 0.0);
                    }
                }
            }
        }
    }
}
