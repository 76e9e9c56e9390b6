//! Pollute, retrain, measure.
//!
//! Exposure of the target is the HR/NDCG/MRR of the target item at every
//! user's test step; overall accuracy is the same metrics for the true test
//! items. Both are measured on the clean histories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, InteractionSequence};
use crate::error::{Error, Result};
use crate::ot::DistConfig;
use crate::policy::{rollout, MaskerPolicy, RolloutConfig, Sampling};
use crate::recommender::{train, RecModel, TrainConfig};
use crate::trainer::{derive_seed, train_creat, AttackConfig, LogRecord, Tier};

pub const HR_CUTOFFS: [usize; 3] = [1, 5, 10];
pub const NDCG_CUTOFFS: [usize; 2] = [5, 10];

fn check_ranks(ranks: &[usize]) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::EmptyDataset("no users to evaluate".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::contract("ranks start at 1"));
    }
    Ok(())
}

pub fn hr_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// With one relevant item the ideal DCG is 1.
pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks)?;
    let total: f64 = ranks
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / ((r + 1) as f64).log2())
        .fold(0.0, |a, b| a + b);
    Ok(total / ranks.len() as f64)
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    check_ranks(ranks)?;
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub mrr: f64,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        Ok(Self {
            hr: HR_CUTOFFS.iter().map(|&k| Ok((k, hr_at_k(ranks, k)?))).collect::<Result<_>>()?,
            ndcg: NDCG_CUTOFFS.iter().map(|&k| Ok((k, ndcg_at_k(ranks, k)?))).collect::<Result<_>>()?,
            mrr: mrr(ranks)?,
        })
    }

    pub fn hr10(&self) -> f64 {
        self.hr[&10]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Creat,
    Random,
    Popular,
    Pure,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Pure, Method::Random, Method::Popular, Method::Creat];

    pub fn name(self) -> &'static str {
        match self {
            Method::Creat => "creat",
            Method::Random => "random",
            Method::Popular => "popular",
            Method::Pure => "pure",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}

/// Serialized flat: exposure metrics sit at the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "ReportFile", into = "ReportFile")]
pub struct MetricsReport {
    pub method: Method,
    pub target: usize,
    pub exposure: Metrics,
    pub overall: Metrics,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    method: Method,
    target: usize,
    hr: BTreeMap<usize, f64>,
    ndcg: BTreeMap<usize, f64>,
    mrr: f64,
    overall: Metrics,
    config_hash: String,
}

impl From<ReportFile> for MetricsReport {
    fn from(f: ReportFile) -> Self {
        Self {
            method: f.method,
            target: f.target,
            exposure: Metrics {
                hr: f.hr,
                ndcg: f.ndcg,
                mrr: f.mrr,
            },
            overall: f.overall,
            config_hash: f.config_hash,
        }
    }
}

impl From<MetricsReport> for ReportFile {
    fn from(r: MetricsReport) -> Self {
        Self {
            method: r.method,
            target: r.target,
            hr: r.exposure.hr,
            ndcg: r.exposure.ndcg,
            mrr: r.exposure.mrr,
            overall: r.overall,
            config_hash: r.config_hash,
        }
    }
}

/// Test-step ranks of the target and of the true test items, using each
/// user's clean training prefix plus validation item as input.
pub fn evaluate(model: &RecModel, clean: &Dataset, target: usize) -> Result<(Metrics, Metrics)> {
    if !clean.is_split() {
        return Err(Error::contract("evaluation needs a split dataset"));
    }
    let ranks: Vec<(usize, usize)> = clean
        .splits
        .par_iter()
        .map(|s| {
            let mut prefix = s.train.clone();
            prefix.push(s.val);
            let ranking = model.rank(&prefix)?;
            let of = |v: usize| {
                ranking
                    .rank_of(v)
                    .ok_or_else(|| Error::contract(format!("item {v} missing from the ranking")))
            };
            Ok((of(target)?, of(s.test)?))
        })
        .collect::<Result<_>>()?;
    let target_ranks: Vec<usize> = ranks.iter().map(|r| r.0).collect();
    let test_ranks: Vec<usize> = ranks.iter().map(|r| r.1).collect();
    Ok((Metrics::from_ranks(&target_ranks)?, Metrics::from_ranks(&test_ranks)?))
}

/// Items split into head/medium/tail thirds by interaction count (ties by
/// index); each tier is sorted most popular first.
pub fn popularity_tiers(dataset: &Dataset) -> [Vec<usize>; 3] {
    let counts = dataset.item_counts();
    let mut items: Vec<usize> = (1..dataset.vocab_size).collect();
    items.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let n = items.len();
    let (a, b) = (n.div_ceil(3), (2 * n).div_ceil(3));
    [items[..a].to_vec(), items[a..b].to_vec(), items[b..].to_vec()]
}

/// The middle item of a tier.
pub fn pick_target(dataset: &Dataset, tier: Tier) -> Result<usize> {
    let tiers = popularity_tiers(dataset);
    let list = match tier {
        Tier::Head => &tiers[0],
        Tier::Medium => &tiers[1],
        Tier::Tail => &tiers[2],
    };
    list.get(list.len() / 2)
        .copied()
        .ok_or_else(|| Error::EmptyDataset(format!("no items in the {tier:?} tier")))
}

pub fn resolve_target(dataset: &Dataset, cfg: &AttackConfig) -> Result<usize> {
    match cfg.target {
        Some(t) if t == 0 || t >= dataset.vocab_size => Err(Error::config(
            "attack.target",
            format!("item {t} outside 1..{}", dataset.vocab_size),
        )),
        Some(t) => Ok(t),
        None => pick_target(dataset, cfg.target_tier),
    }
}

/// Sorted indices of the attacked sequences: `round(fraction·|D|)`, at least one.
pub fn select_subset(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let size = ((fraction * n as f64).round() as usize).clamp(1, n.max(1)).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample_indices(&mut rng, n, size).into_vec();
    idx.sort_unstable();
    idx
}

fn valid_positions(prefix: &[usize], target: usize) -> Vec<usize> {
    (0..prefix.len()).filter(|&t| prefix[t] != target).collect()
}

/// `budget` uniformly chosen positions set to the target.
pub fn random_pollution(prefix: &[usize], target: usize, budget: usize, seed: u64) -> Vec<usize> {
    let valid = valid_positions(prefix, target);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = prefix.to_vec();
    for i in sample_indices(&mut rng, valid.len(), budget.min(valid.len())) {
        out[valid[i]] = target;
    }
    out
}

/// Sets the positions right after the most popular items to the target.
/// A position's score is the interaction count of its predecessor; ties go
/// to the earlier position.
pub fn popular_pollution(prefix: &[usize], target: usize, budget: usize, counts: &[usize]) -> Vec<usize> {
    let mut valid = valid_positions(prefix, target);
    let score = |t: usize| if t == 0 { 0 } else { counts[prefix[t - 1]] };
    valid.sort_by(|&a, &b| score(b).cmp(&score(a)).then(a.cmp(&b)));
    let mut out = prefix.to_vec();
    for &t in valid.iter().take(budget) {
        out[t] = target;
    }
    out
}

/// Replaces the training prefixes of `subset` with `prefixes`, keeping the
/// validation and test items.
pub fn apply_pollution(clean: &Dataset, subset: &[usize], prefixes: &[Vec<usize>]) -> Result<Dataset> {
    let mut sequences = clean.sequences.clone();
    for (&i, prefix) in subset.iter().zip(prefixes) {
        let s = &clean.splits[i];
        let mut items = prefix.clone();
        items.push(s.val);
        items.push(s.test);
        sequences[i] = InteractionSequence {
            user: clean.sequences[i].user.clone(),
            items,
        };
    }
    let (polluted, excluded) = Dataset::new(clean.vocab_size, sequences)?.split();
    debug_assert_eq!(excluded, 0);
    Ok(polluted)
}

/// Polluted data may differ from clean data only inside `subset`, only in
/// training prefixes, in at most `budget` positions per sequence, each set
/// to the target.
pub fn check_pollution(clean: &Dataset, polluted: &Dataset, subset: &[usize], budget: usize, target: usize) -> Result<()> {
    if clean.sequences.len() != polluted.sequences.len() {
        return Err(Error::contract("polluted dataset has a different number of sequences"));
    }
    for (i, (c, p)) in clean.sequences.iter().zip(&polluted.sequences).enumerate() {
        if c.items.len() != p.items.len() || c.user != p.user {
            return Err(Error::contract(format!("sequence {i} changed shape")));
        }
        let changed: Vec<usize> = (0..c.items.len()).filter(|&t| c.items[t] != p.items[t]).collect();
        if changed.is_empty() {
            continue;
        }
        if subset.binary_search(&i).is_err() {
            return Err(Error::contract(format!("sequence {i} changed outside the attacked subset")));
        }
        let prefix_len = c.items.len() - 2;
        if changed.len() > budget {
            return Err(Error::contract(format!("sequence {i} has {} changes, budget {budget}", changed.len())));
        }
        if let Some(&t) = changed.iter().find(|&&t| t >= prefix_len || p.items[t] != target) {
            return Err(Error::contract(format!("sequence {i} position {t} is not a train-prefix target write")));
        }
    }
    Ok(())
}

pub struct AttackOutcome {
    pub report: MetricsReport,
    pub subset: Vec<usize>,
    pub polluted: Dataset,
    pub model: RecModel,
    pub training_log: Vec<LogRecord>,
    pub policy: Option<MaskerPolicy>,
}

/// Everything a run needs besides the data.
#[derive(Clone, Debug)]
pub struct RunSettings {
    pub dim: usize,
    pub rec: TrainConfig,
    pub attack: AttackConfig,
    pub dist: DistConfig,
    pub config_hash: String,
}

/// Target, attacked subset and the train prefixes of that subset.
pub fn attack_sequences(clean: &Dataset, cfg: &AttackConfig) -> Result<(usize, Vec<usize>, Vec<InteractionSequence>)> {
    cfg.validate()?;
    if !clean.is_split() {
        return Err(Error::contract("attack needs a split dataset"));
    }
    let target = resolve_target(clean, cfg)?;
    let subset = select_subset(clean.len(), cfg.fraction, derive_seed(cfg.seed, &[10]));
    let seqs = subset
        .iter()
        .map(|&i| InteractionSequence {
            user: clean.sequences[i].user.clone(),
            items: clean.splits[i].train.clone(),
        })
        .collect();
    Ok((target, subset, seqs))
}

/// Runs one attack method against a clean model already trained on `clean`
/// with `settings.rec`. `policy` skips masker training when given.
pub fn run_attack(
    clean: &Dataset,
    clean_model: &RecModel,
    settings: &RunSettings,
    method: Method,
    policy: Option<MaskerPolicy>,
    on_round: &mut dyn FnMut(&LogRecord, &MaskerPolicy) -> Result<()>,
) -> Result<AttackOutcome> {
    let cfg = &settings.attack;
    let (target, subset, seqs) = attack_sequences(clean, cfg)?;
    let prefixes: Vec<&Vec<usize>> = seqs.iter().map(|s| &s.items).collect();
    let mut training_log = Vec::new();
    let mut trained = None;
    let polluted_prefixes: Vec<Vec<usize>> = match method {
        Method::Pure => prefixes.iter().map(|p| p.to_vec()).collect(),
        Method::Random => prefixes
            .iter()
            .enumerate()
            .map(|(j, p)| random_pollution(p, target, cfg.budget, derive_seed(cfg.seed, &[11, j as u64])))
            .collect(),
        Method::Popular => {
            let counts = clean.item_counts();
            prefixes.iter().map(|p| popular_pollution(p, target, cfg.budget, &counts)).collect()
        }
        Method::Creat => {
            let masker = match policy {
                Some(p) => p,
                None => {
                    let outcome = train_creat(clean_model, &seqs, target, cfg, &settings.dist, on_round)?;
                    training_log = outcome.log;
                    outcome.policy
                }
            };
            let greedy = RolloutConfig {
                budget: cfg.budget,
                sampling: Sampling::Greedy,
                rewards: cfg.reward_config(settings.dist.k),
                dist: None,
            };
            let out = seqs
                .par_iter()
                .map(|s| {
                    if s.items.len() < 2 {
                        return Ok(s.items.clone());
                    }
                    let traj = rollout(&masker, None, clean_model, s, target, &greedy, 0)?;
                    Ok(traj.final_state().current.clone())
                })
                .collect::<Result<Vec<_>>>()?;
            trained = Some(masker);
            out
        }
    };
    let polluted = apply_pollution(clean, &subset, &polluted_prefixes)?;
    check_pollution(clean, &polluted, &subset, cfg.budget, target)?;
    let model = if method == Method::Pure {
        clean_model.clone()
    } else {
        let mut m = RecModel::new(clean.vocab_size, settings.dim, settings.rec.seed)?;
        train(&mut m, &polluted, &settings.rec)?;
        m
    };
    let (exposure, overall) = evaluate(&model, clean, target)?;
    Ok(AttackOutcome {
        report: MetricsReport {
            method,
            target,
            exposure,
            overall,
            config_hash: settings.config_hash.clone(),
        },
        subset,
        polluted,
        model,
        training_log,
        policy: trained,
    })
}

/// Hex SHA-256 of a resolved configuration snapshot.
pub fn config_hash(resolved_json: &str) -> String {
    hex::encode(Sha256::digest(resolved_json.as_bytes()))
}

/// One CSV row per report: exposure metrics then overall accuracy.
pub fn table_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("method,target,HR@1,HR@5,HR@10,NDCG@5,NDCG@10,MRR,test_HR@10,test_NDCG@10,test_MRR\n");
    for r in reports {
        let e = &r.exposure;
        let o = &r.overall;
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.method.name(),
            r.target,
            e.hr[&1],
            e.hr[&5],
            e.hr[&10],
            e.ndcg[&5],
            e.ndcg[&10],
            e.mrr,
            o.hr[&10],
            o.ndcg[&10],
            o.mrr
        );
    }
    out
}

/// CSV rows `seq_id,label,h_1..h_d` of final encoder states.
pub fn dump_embeddings(model: &RecModel, rows: &[(String, &str, Vec<usize>)], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (1..=model.dim).map(|i| format!("h_{i}")).collect();
    writeln!(f, "seq_id,label,{}", header.join(","))?;
    for (id, label, items) in rows {
        let h = model.encode(items)?;
        let cols: Vec<String> = h.iter().map(|x| format!("{x:?}")).collect();
        writeln!(f, "{id},{label},{}", cols.join(","))?;
    }
    f.flush()?;
    Ok(())
}
