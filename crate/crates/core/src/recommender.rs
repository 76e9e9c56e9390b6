//! GRU next-item recommender with tied input/output item embeddings.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PAD};
use crate::diff::{sigmoid, Adam, Checkpoint, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// How a lone item is mapped into the encoder space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetEmbedMode {
    /// One GRU step from the zero state.
    #[default]
    Encode,
    /// The raw embedding row.
    Row,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            weight_decay: 0.01,
            batch_size: 64,
            epochs: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("rec.lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("rec.weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("rec.batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("rec.epochs", "must be positive"));
        }
        Ok(())
    }
}

/// Item embeddings (`V×d`, row 0 is padding) plus a single GRU layer.
/// Gate columns are laid out as `[reset | update | candidate]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecModel {
    pub dim: usize,
    pub item_emb: Tensor,
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub b_x: Tensor,
    pub b_h: Tensor,
}

const PARAM_NAMES: [&str; 5] = ["item_emb", "w_x", "w_h", "b_x", "b_h"];

impl RecModel {
    pub fn new(vocab_size: usize, dim: usize, seed: u64) -> Result<Self> {
        if vocab_size < 2 || dim == 0 {
            return Err(Error::config("rec.dim", "vocabulary and dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        let mut emb: Vec<f64> = (0..vocab_size * dim).map(|_| normal.sample(&mut rng)).collect();
        emb[..dim].iter_mut().for_each(|x| *x = 0.0);
        let bound = 1.0 / (dim as f64).sqrt();
        let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() };
        Ok(Self {
            dim,
            item_emb: Tensor::matrix(vocab_size, dim, emb)?,
            w_x: Tensor::matrix(dim, 3 * dim, uniform(3 * dim * dim))?,
            w_h: Tensor::matrix(dim, 3 * dim, uniform(3 * dim * dim))?,
            b_x: Tensor::row(uniform(3 * dim)),
            b_h: Tensor::row(uniform(3 * dim)),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.item_emb.rows()
    }

    fn params_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.item_emb,
            &mut self.w_x,
            &mut self.w_h,
            &mut self.b_x,
            &mut self.b_h,
        ]
    }

    fn params(&self) -> [&Tensor; 5] {
        [&self.item_emb, &self.w_x, &self.w_h, &self.b_x, &self.b_h]
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let tensors: BTreeMap<String, Tensor> = PARAM_NAMES
            .iter()
            .zip(self.params())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        Checkpoint::new(tensors)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let emb = ck.get("item_emb")?.clone();
        let dim = emb.cols();
        let model = Self {
            dim,
            item_emb: emb,
            w_x: ck.get("w_x")?.clone(),
            w_h: ck.get("w_h")?.clone(),
            b_x: ck.get("b_x")?.clone(),
            b_h: ck.get("b_h")?.clone(),
        };
        let expect = [
            vec![model.vocab_size(), dim],
            vec![dim, 3 * dim],
            vec![dim, 3 * dim],
            vec![1, 3 * dim],
            vec![1, 3 * dim],
        ];
        for ((name, t), shape) in PARAM_NAMES.iter().zip(model.params()).zip(expect) {
            if t.shape != shape {
                return Err(Error::contract(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
        }
        Ok(model)
    }

    fn check_item(&self, v: usize) -> Result<()> {
        if v >= self.vocab_size() {
            return Err(Error::contract(format!(
                "item {v} outside vocabulary of size {}",
                self.vocab_size()
            )));
        }
        Ok(())
    }

    /// One GRU step on plain vectors.
    pub fn gru_step(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut gx = self.b_x.values.clone();
        let mut gh = self.b_h.values.clone();
        for p in 0..d {
            let (xp, hp) = (x[p], h[p]);
            let wx = self.w_x.row_slice(p);
            let wh = self.w_h.row_slice(p);
            for j in 0..3 * d {
                gx[j] += xp * wx[j];
                gh[j] += hp * wh[j];
            }
        }
        (0..d)
            .map(|j| {
                let r = sigmoid(gx[j] + gh[j]);
                let z = sigmoid(gx[d + j] + gh[d + j]);
                let n = (gx[2 * d + j] + r * gh[2 * d + j]).tanh();
                (1.0 - z) * n + z * h[j]
            })
            .collect()
    }

    /// Hidden state after each position.
    pub fn hidden_states(&self, items: &[usize]) -> Result<Vec<Vec<f64>>> {
        if items.is_empty() {
            return Err(Error::contract("cannot encode an empty sequence"));
        }
        let mut h = vec![0.0; self.dim];
        let mut out = Vec::with_capacity(items.len());
        for &v in items {
            self.check_item(v)?;
            h = self.gru_step(self.item_emb.row_slice(v), &h);
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Final hidden state of the encoder.
    pub fn encode(&self, items: &[usize]) -> Result<Vec<f64>> {
        Ok(self.hidden_states(items)?.pop().expect("non-empty"))
    }

    pub fn embed_item(&self, v: usize, mode: TargetEmbedMode) -> Result<Vec<f64>> {
        self.check_item(v)?;
        match mode {
            TargetEmbedMode::Encode => self.encode(&[v]),
            TargetEmbedMode::Row => Ok(self.item_emb.row_slice(v).to_vec()),
        }
    }

    /// Dot-product score of every vocabulary slot (padding included).
    pub fn scores(&self, hidden: &[f64]) -> Vec<f64> {
        (0..self.vocab_size())
            .map(|v| self.item_emb.row_slice(v).iter().zip(hidden).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn rank(&self, prefix: &[usize]) -> Result<Ranking> {
        let h = self.encode(prefix)?;
        Ok(Ranking::from_scores(&self.scores(&h)))
    }

    /// Records the GRU over a padded batch; returns the hidden state per step.
    fn tape_forward(
        &self,
        tape: &mut Tape,
        leaves: &[Var; 5],
        batch: &[&[usize]],
        steps: usize,
    ) -> Result<Vec<Var>> {
        let d = self.dim;
        let [emb, w_x, w_h, b_x, b_h] = *leaves;
        let mut h = tape.leaf(Tensor::zeros(batch.len(), d));
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let idx: Vec<usize> = batch.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
            let x = tape.gather_rows(emb, &idx)?;
            let gx = tape.matmul(x, w_x)?;
            let gx = tape.add_row(gx, b_x)?;
            let gh = tape.matmul(h, w_h)?;
            let gh = tape.add_row(gh, b_h)?;
            let (gx_rz, gh_rz) = (tape.slice_cols(gx, 0, 2 * d)?, tape.slice_cols(gh, 0, 2 * d)?);
            let rz = tape.add(gx_rz, gh_rz)?;
            let rz = tape.sigmoid(rz);
            let r = tape.slice_cols(rz, 0, d)?;
            let z = tape.slice_cols(rz, d, 2 * d)?;
            let gx_n = tape.slice_cols(gx, 2 * d, 3 * d)?;
            let gh_n = tape.slice_cols(gh, 2 * d, 3 * d)?;
            let rn = tape.mul(r, gh_n)?;
            let n = tape.add(gx_n, rn)?;
            let n = tape.tanh(n);
            let keep = tape.one_minus(z);
            let a = tape.mul(keep, n)?;
            let b = tape.mul(z, h)?;
            h = tape.add(a, b)?;
            states.push(h);
        }
        Ok(states)
    }

    /// Mean next-item cross-entropy over a batch of sequences, recorded on
    /// `tape`. Position `t + 1` is predicted from the prefix ending at `t`.
    fn batch_loss(&self, tape: &mut Tape, leaves: &[Var; 5], batch: &[&[usize]]) -> Result<Option<Var>> {
        let steps = batch.iter().map(|s| s.len()).max().unwrap_or(0);
        if steps < 2 {
            return Ok(None);
        }
        let states = self.tape_forward(tape, leaves, batch, steps - 1)?;
        let total: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
        let mut loss: Option<Var> = None;
        for (t, &h) in states.iter().enumerate() {
            let targets: Vec<Option<usize>> = batch.iter().map(|s| s.get(t + 1).copied()).collect();
            let count = targets.iter().flatten().count();
            if count == 0 {
                continue;
            }
            let logits = tape.matmul_nt(h, leaves[0])?;
            let ce = tape.softmax_cross_entropy(logits, &targets)?;
            let weighted = tape.scale(ce, count as f64 / total as f64);
            loss = Some(match loss {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
        }
        Ok(loss)
    }

    fn record_leaves(&self, tape: &mut Tape) -> [Var; 5] {
        self.params().map(|t| tape.leaf(t.clone()))
    }

    /// Loss and parameter gradients for one batch (gradients in parameter order).
    pub fn loss_and_grads(&self, batch: &[&[usize]]) -> Result<Option<(f64, Vec<Vec<f64>>)>> {
        let mut tape = Tape::new();
        let leaves = self.record_leaves(&mut tape);
        let Some(loss) = self.batch_loss(&mut tape, &leaves, batch)? else {
            return Ok(None);
        };
        let grads = tape.backward(loss)?;
        let value = tape.value(loss).item();
        Ok(Some((value, leaves.iter().map(|&v| grads.get(v).to_vec()).collect())))
    }

    /// Mean next-item loss over the train prefixes of a split dataset.
    pub fn mean_loss(&self, dataset: &Dataset) -> Result<f64> {
        let seqs = train_sequences(dataset)?;
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in seqs.chunks(64) {
            let n: usize = chunk.iter().map(|s| s.len().saturating_sub(1)).sum();
            let mut tape = Tape::new();
            let leaves = self.record_leaves(&mut tape);
            if let Some(loss) = self.batch_loss(&mut tape, &leaves, chunk)? {
                sum += tape.value(loss).item() * n as f64;
                count += n;
            }
        }
        if count == 0 {
            return Err(Error::EmptyDataset("no trainable transitions".into()));
        }
        Ok(sum / count as f64)
    }
}

fn train_sequences(dataset: &Dataset) -> Result<Vec<&[usize]>> {
    if !dataset.is_split() {
        return Err(Error::contract("dataset must be split before training"));
    }
    Ok(dataset
        .splits
        .iter()
        .map(|s| s.train.as_slice())
        .filter(|s| s.len() >= 2)
        .collect())
}

/// Trains in place with Adam; returns the mean training loss of each epoch.
pub fn train(model: &mut RecModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if dataset.vocab_size != model.vocab_size() {
        return Err(Error::contract(format!(
            "dataset vocabulary {} does not match model vocabulary {}",
            dataset.vocab_size,
            model.vocab_size()
        )));
    }
    let seqs = train_sequences(dataset)?;
    if seqs.is_empty() {
        return Err(Error::EmptyDataset("no train prefix has two or more items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| seqs[i]).collect();
            let Some((loss, grads)) = model.loss_and_grads(&batch)? else { continue };
            let finite = loss.is_finite() && grads.iter().flatten().all(|g| g.is_finite());
            if !finite {
                log::error!("recommender training diverged: epoch {epoch}, loss {loss}");
                return Err(Error::numerical(
                    format!("recommender training (epoch {epoch}, loss {loss})"),
                    adam.steps() as usize,
                ));
            }
            let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            adam.step(&mut model.params_mut(), &refs)?;
            // padding row stays at zero
            model.item_emb.values[..model.dim].iter_mut().for_each(|x| *x = 0.0);
            let n: usize = batch.iter().map(|s| s.len() - 1).sum();
            sum += loss * n as f64;
            count += n;
        }
        curve.push(sum / count.max(1) as f64);
        log::debug!("rec epoch {epoch}: loss {:.5}", curve[epoch]);
    }
    Ok(curve)
}

/// Full ordering of the real items (padding excluded) by descending score,
/// ties broken by ascending item index.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    order: Vec<usize>,
    rank_of: Vec<usize>,
}

impl Ranking {
    /// `scores[v]` is the score of item `v`; slot 0 (padding) is ignored.
    pub fn from_scores(scores: &[f64]) -> Self {
        let mut order: Vec<usize> = (1..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut rank_of = vec![0; scores.len()];
        for (pos, &v) in order.iter().enumerate() {
            rank_of[v] = pos + 1;
        }
        Self { order, rank_of }
    }

    pub fn top_k(&self, k: usize) -> &[usize] {
        &self.order[..k.min(self.order.len())]
    }

    /// 1-based rank; `None` for padding or out-of-range items.
    pub fn rank_of(&self, item: usize) -> Option<usize> {
        self.rank_of.get(item).copied().filter(|&r| r > 0)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, InteractionSequence};
    use crate::diff::testing::{assert_grads_close, numeric_grad};
    use proptest::prelude::*;

    fn alternating(n: usize, len: usize) -> Dataset {
        let sequences = (0..n)
            .map(|i| InteractionSequence {
                user: format!("u{i}"),
                items: (0..len).map(|t| 1 + (t + i) % 2).collect(),
            })
            .collect();
        Dataset::new(3, sequences).unwrap().split().0
    }

    #[test]
    fn single_item_encode_is_one_gru_step() {
        let m = RecModel::new(6, 4, 1).unwrap();
        let step = m.gru_step(m.item_emb.row_slice(3), &[0.0; 4]);
        assert_eq!(m.encode(&[3]).unwrap(), step);
        assert_eq!(m.embed_item(3, TargetEmbedMode::Encode).unwrap(), step);
        assert_eq!(m.embed_item(3, TargetEmbedMode::Row).unwrap(), m.item_emb.row_slice(3));
        assert!(m.embed_item(6, TargetEmbedMode::Encode).is_err());
        assert!(m.encode(&[]).is_err());
    }

    #[test]
    fn encode_is_deterministic_and_order_sensitive() {
        let m = RecModel::new(10, 8, 4).unwrap();
        assert_eq!(m.encode(&[2, 5]).unwrap(), m.encode(&[2, 5]).unwrap());
        let a = m.encode(&[2, 5]).unwrap();
        let b = m.encode(&[5, 2]).unwrap();
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(diff > 1e-9);
    }

    #[test]
    fn tape_gru_matches_plain_forward() {
        let m = RecModel::new(7, 5, 2).unwrap();
        let seqs: [&[usize]; 2] = [&[1, 2, 3, 4], &[6, 5]];
        let mut tape = Tape::new();
        let leaves = m.record_leaves(&mut tape);
        let states = m.tape_forward(&mut tape, &leaves, &seqs, 4).unwrap();
        for (r, seq) in seqs.iter().enumerate() {
            let plain = m.hidden_states(seq).unwrap();
            for (t, h) in plain.iter().enumerate() {
                let row = tape.value(states[t]).row_slice(r);
                for (a, b) in row.iter().zip(h) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let m = RecModel::new(5, 3, 8).unwrap();
        let batch: [&[usize]; 2] = [&[1, 2, 3, 4], &[4, 3]];
        let (_, grads) = m.loss_and_grads(&batch).unwrap().unwrap();
        let flat: Vec<f64> = m.params().iter().flat_map(|t| t.values.clone()).collect();
        let numeric = numeric_grad(&flat, 1e-4, |p| {
            let mut probe = m.clone();
            let mut it = p.iter().cloned();
            for t in probe.params_mut() {
                for x in t.values.iter_mut() {
                    *x = it.next().unwrap();
                }
            }
            let (l, _) = probe.loss_and_grads(&batch).unwrap().unwrap();
            l
        });
        let analytic: Vec<f64> = grads.into_iter().flatten().collect();
        assert_grads_close(&analytic, &numeric, 1e-3);
    }

    #[test]
    fn learns_alternating_pattern() {
        let ds = alternating(2048, 8);
        let mut m = RecModel::new(3, 8, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        };
        train(&mut m, &ds, &cfg).unwrap();
        let correct = ds
            .splits
            .iter()
            .filter(|s| m.rank(&s.train).unwrap().top_k(1)[0] == s.val)
            .count();
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc > 0.95, "val accuracy {acc}");
    }

    #[test]
    fn one_epoch_on_constant_items_beats_uniform() {
        let sequences = (0..128)
            .map(|i| InteractionSequence {
                user: format!("u{i}"),
                items: vec![2; 10],
            })
            .collect();
        let ds = Dataset::new(6, sequences).unwrap().split().0;
        let mut m = RecModel::new(6, 8, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        train(&mut m, &ds, &cfg).unwrap();
        assert!(m.mean_loss(&ds).unwrap() < 6f64.ln());
    }

    #[test]
    fn training_is_reproducible_and_finite() {
        let ds = gen_synthetic(40, 12, 2, 8, 3).unwrap().split().0;
        let cfg = TrainConfig {
            epochs: 3,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut a = RecModel::new(ds.vocab_size, 8, 1).unwrap();
        let mut b = RecModel::new(ds.vocab_size, 8, 1).unwrap();
        let ca = train(&mut a, &ds, &cfg).unwrap();
        let cb = train(&mut b, &ds, &cfg).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a, b);
        assert!(ca.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn unsplit_dataset_is_rejected() {
        let ds = gen_synthetic(5, 6, 2, 5, 1).unwrap();
        let mut m = RecModel::new(ds.vocab_size, 4, 0).unwrap();
        assert!(train(&mut m, &ds, &TrainConfig::default()).is_err());
    }

    #[test]
    fn ties_break_by_item_index() {
        let r = Ranking::from_scores(&[9.0, 0.5, 0.5, 0.1]);
        assert_eq!(r.rank_of(1), Some(1));
        assert_eq!(r.rank_of(2), Some(2));
        assert_eq!(r.rank_of(3), Some(3));
        assert_eq!(r.rank_of(0), None);
        assert_eq!(r.top_k(2), &[1, 2]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = RecModel::new(9, 4, 3).unwrap();
        let back = RecModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        /// rank = 1 + #strictly greater + #equal with a lower index.
        #[test]
        fn rank_matches_counting_oracle(scores in proptest::collection::vec(-3i32..3, 2..30)) {
            let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 * 0.5).collect();
            let r = Ranking::from_scores(&scores);
            let mut seen = vec![false; scores.len()];
            for v in 1..scores.len() {
                let greater = (1..scores.len()).filter(|&u| scores[u] > scores[v]).count();
                let tied_lower = (1..v).filter(|&u| scores[u] == scores[v]).count();
                let rank = r.rank_of(v).unwrap();
                prop_assert_eq!(rank, 1 + greater + tied_lower);
                prop_assert!(!seen[rank]);
                seen[rank] = true;
            }
        }

        #[test]
        fn random_model_rank_is_a_permutation(seed in 0u64..50) {
            let m = RecModel::new(12, 4, seed).unwrap();
            let r = m.rank(&[1, 2, 3]).unwrap();
            let mut ranks: Vec<usize> = (1..12).map(|v| r.rank_of(v).unwrap()).collect();
            ranks.sort();
            prop_assert_eq!(ranks, (1..12).collect::<Vec<_>>());
        }
    }
}
