//! Interaction-sequence datasets.
//!
//! Item index 0 is the padding slot; real items occupy `1..vocab_size`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user: String,
    pub items: Vec<usize>,
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Leave-two-out split of one sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Number of item slots including padding.
    pub vocab_size: usize,
    pub sequences: Vec<InteractionSequence>,
    #[serde(skip)]
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn new(vocab_size: usize, sequences: Vec<InteractionSequence>) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::contract(format!(
                "vocabulary must hold padding plus at least one item, got {vocab_size}"
            )));
        }
        for seq in &sequences {
            if seq.items.is_empty() {
                return Err(Error::contract(format!("sequence for {} is empty", seq.user)));
            }
            if let Some(&bad) = seq.items.iter().find(|&&v| v == PAD || v >= vocab_size) {
                return Err(Error::contract(format!(
                    "sequence for {} holds item {bad} outside 1..{vocab_size}",
                    seq.user
                )));
            }
        }
        Ok(Self {
            vocab_size,
            sequences,
            splits: Vec::new(),
        })
    }

    /// Number of real items (padding excluded).
    pub fn num_items(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn is_split(&self) -> bool {
        !self.sequences.is_empty() && self.splits.len() == self.sequences.len()
    }

    /// Keeps the most recent `max_len` interactions of every sequence.
    pub fn truncate(mut self, max_len: usize) -> Self {
        for seq in &mut self.sequences {
            if seq.items.len() > max_len {
                let cut = seq.items.len() - max_len;
                seq.items.drain(..cut);
            }
        }
        if !self.splits.is_empty() {
            self.splits = self.sequences.iter().map(|s| split_items(&s.items)).collect();
        }
        self
    }

    /// Leave-two-out split. Sequences shorter than three items are dropped;
    /// the second value counts them.
    pub fn split(&self) -> (Dataset, usize) {
        let mut excluded = 0;
        let mut sequences = Vec::with_capacity(self.sequences.len());
        let mut splits = Vec::with_capacity(self.sequences.len());
        for seq in &self.sequences {
            if seq.items.len() < 3 {
                excluded += 1;
                continue;
            }
            splits.push(split_items(&seq.items));
            sequences.push(seq.clone());
        }
        if excluded > 0 {
            log::warn!("split: excluded {excluded} sequences shorter than 3 items");
        }
        (
            Dataset {
                vocab_size: self.vocab_size,
                sequences,
                splits,
            },
            excluded,
        )
    }

    /// Interaction count per item index (padding slot included, always 0).
    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.vocab_size];
        for seq in &self.sequences {
            for &v in &seq.items {
                counts[v] += 1;
            }
        }
        counts
    }

    /// JSON with a `split` flag; splits are rebuilt on load.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&DatasetFile {
            vocab_size: self.vocab_size,
            split: self.is_split(),
            sequences: self.sequences.clone(),
        })?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let raw: DatasetFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        let mut ds = Dataset::new(raw.vocab_size, raw.sequences)?;
        if raw.split {
            if let Some(short) = ds.sequences.iter().find(|s| s.items.len() < 3) {
                return Err(Error::contract(format!("split dataset holds a short sequence for {}", short.user)));
            }
            ds.splits = ds.sequences.iter().map(|s| split_items(&s.items)).collect();
        }
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    vocab_size: usize,
    #[serde(default)]
    split: bool,
    sequences: Vec<InteractionSequence>,
}

fn split_items(items: &[usize]) -> Split {
    let n = items.len();
    Split {
        train: items[..n - 2].to_vec(),
        val: items[n - 2],
        test: items[n - 1],
    }
}

/// Outcome of iterative k-core filtering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoreStats {
    /// Passes that removed at least one user or item.
    pub removal_passes: usize,
    pub users_removed: usize,
    pub items_removed: usize,
}

/// Repeatedly drops users and items with fewer than `min_core` interactions
/// until nothing changes. Works on raw string identifiers.
pub fn kcore_filter(
    sequences: &mut Vec<(String, Vec<String>)>,
    min_core: usize,
) -> CoreStats {
    let mut stats = CoreStats {
        removal_passes: 0,
        users_removed: 0,
        items_removed: 0,
    };
    loop {
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for (_, items) in sequences.iter() {
            for item in items {
                *item_counts.entry(item.as_str()).or_default() += 1;
            }
        }
        let weak_items: std::collections::HashSet<String> = item_counts
            .iter()
            .filter(|(_, &c)| c < min_core)
            .map(|(k, _)| k.to_string())
            .collect();
        let users_before = sequences.len();
        sequences.retain(|(_, items)| items.len() >= min_core);
        let dropped_users = users_before - sequences.len();
        if weak_items.is_empty() && dropped_users == 0 {
            break;
        }
        for (_, items) in sequences.iter_mut() {
            items.retain(|item| !weak_items.contains(item));
        }
        sequences.retain(|(_, items)| !items.is_empty());
        stats.removal_passes += 1;
        stats.users_removed += dropped_users;
        stats.items_removed += weak_items.len();
    }
    stats
}

/// Reads `user<TAB>item<TAB>timestamp` rows, orders each user's items by
/// timestamp, applies k-core filtering and re-maps items densely to `1..V`.
pub fn load_tsv(path: impl AsRef<Path>, min_core: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_tsv(&text, path, min_core).map(|(ds, _)| ds)
}

pub(crate) fn parse_tsv(text: &str, path: &Path, min_core: usize) -> Result<(Dataset, CoreStats)> {
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(i64, usize, String)>> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let (user, item) = (fields[0].trim(), fields[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(parse_err("empty user or item field".into()));
        }
        let ts: i64 = fields[2]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("bad timestamp {:?}: {e}", fields[2])))?;
        let entry = rows.entry(user.to_string()).or_insert_with(|| {
            order.push(user.to_string());
            Vec::new()
        });
        entry.push((ts, line_no, item.to_string()));
    }

    let mut sequences: Vec<(String, Vec<String>)> = order
        .into_iter()
        .map(|user| {
            let mut events = rows.remove(&user).unwrap_or_default();
            events.sort_by_key(|(ts, line, _)| (*ts, *line));
            (user, events.into_iter().map(|(_, _, item)| item).collect())
        })
        .collect();
    let stats = kcore_filter(&mut sequences, min_core);
    if sequences.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no users left in {} after {min_core}-core filtering",
            path.display()
        )));
    }

    let mut index: HashMap<String, usize> = HashMap::new();
    let sequences = sequences
        .into_iter()
        .map(|(user, items)| {
            let items = items
                .into_iter()
                .map(|item| {
                    let next = index.len() + 1;
                    *index.entry(item).or_insert(next)
                })
                .collect();
            InteractionSequence { user, items }
        })
        .collect();
    Ok((Dataset::new(index.len() + 1, sequences)?, stats))
}

/// Parameters of the clustered Markov-chain generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub avg_len: usize,
    pub seed: u64,
}

const DIRICHLET_ALPHA: f64 = 0.3;
const LEAK_MASS: f64 = 0.05;

/// Clustered first-order Markov chains over a partitioned item space.
///
/// Each cluster owns a contiguous block of items. Its chain sends 95% of the
/// transition mass into the block (Dirichlet(0.3) row weights) and leaks the
/// rest uniformly over every other cluster's items.
#[derive(Clone, Debug)]
pub struct SyntheticGenerator {
    params: SyntheticParams,
    blocks: Vec<std::ops::Range<usize>>,
    /// `chains[c][from]` is the next-item distribution over `1..=n_items`
    /// (index 0 unused).
    chains: Vec<Vec<Vec<f64>>>,
    rng: ChaCha8Rng,
}

impl SyntheticGenerator {
    pub fn new(params: SyntheticParams) -> Result<Self> {
        if params.n_users == 0 {
            return Err(Error::EmptyDataset("synthetic generator asked for 0 users".into()));
        }
        if params.n_items == 0 {
            return Err(Error::config("data.n_items", "must be positive"));
        }
        if params.n_clusters == 0 || params.n_clusters > params.n_items {
            return Err(Error::config(
                "data.n_clusters",
                format!("must be in 1..={}, got {}", params.n_items, params.n_clusters),
            ));
        }
        if params.avg_len < 4 {
            return Err(Error::config("data.avg_len", format!("must be >= 4, got {}", params.avg_len)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let (n, c) = (params.n_items, params.n_clusters);
        let blocks: Vec<_> = (0..c)
            .map(|k| (1 + k * n / c)..(1 + (k + 1) * n / c))
            .collect();

        let mut chains = Vec::with_capacity(c);
        for block in &blocks {
            let inside = block.len();
            let outside = n - inside;
            let leak = if outside > 0 { LEAK_MASS } else { 0.0 };
            let mut rows = vec![vec![0.0; n + 1]; n + 1];
            for row in rows.iter_mut().skip(1) {
                let weights: Vec<f64> = if inside == 1 {
                    vec![1.0]
                } else {
                    Dirichlet::new(&vec![DIRICHLET_ALPHA; inside])
                        .expect("alpha > 0")
                        .sample(&mut rng)
                };
                for (offset, w) in weights.iter().enumerate() {
                    row[block.start + offset] = (1.0 - leak) * w;
                }
                if outside > 0 {
                    for (item, cell) in row.iter_mut().enumerate().skip(1) {
                        if !block.contains(&item) {
                            *cell = leak / outside as f64;
                        }
                    }
                }
            }
            chains.push(rows);
        }
        Ok(Self {
            params,
            blocks,
            chains,
            rng,
        })
    }

    pub fn transition_matrix(&self, cluster: usize) -> &[Vec<f64>] {
        &self.chains[cluster]
    }

    pub fn block(&self, cluster: usize) -> std::ops::Range<usize> {
        self.blocks[cluster].clone()
    }

    /// Draws one sequence of `len` items from the chain of `cluster`.
    pub fn sample_chain(&mut self, cluster: usize, len: usize) -> Vec<usize> {
        let block = self.blocks[cluster].clone();
        let mut items = Vec::with_capacity(len);
        let mut current = self.rng.gen_range(block);
        items.push(current);
        while items.len() < len {
            current = sample_categorical(&self.chains[cluster][current], &mut self.rng);
            items.push(current);
        }
        items
    }

    pub fn generate(mut self) -> Result<Dataset> {
        let avg = self.params.avg_len;
        let lo = (avg / 2).max(4);
        let hi = 2 * avg - lo;
        let clusters: Vec<usize> = (0..self.params.n_clusters).collect();
        let mut sequences = Vec::with_capacity(self.params.n_users);
        for u in 0..self.params.n_users {
            let cluster = *clusters.choose(&mut self.rng).expect("n_clusters >= 1");
            let len = self.rng.gen_range(lo..=hi);
            sequences.push(InteractionSequence {
                user: format!("u{u}"),
                items: self.sample_chain(cluster, len),
            });
        }
        Dataset::new(self.params.n_items + 1, sequences)
    }
}

fn sample_categorical(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = i;
        if draw < w {
            return i;
        }
        draw -= w;
    }
    last
}

pub fn gen_synthetic(
    n_users: usize,
    n_items: usize,
    n_clusters: usize,
    avg_len: usize,
    seed: u64,
) -> Result<Dataset> {
    SyntheticGenerator::new(SyntheticParams {
        n_users,
        n_items,
        n_clusters,
        avg_len,
        seed,
    })?
    .generate()
}

/// Sliding windows of width `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KGramSet {
    pub k: usize,
    /// `(start, items[start..start + k])`
    pub windows: Vec<(usize, Vec<usize>)>,
}

/// Windows start at `0..L-k`, giving `max(L-k, 0)` windows. The final
/// full-width window is not produced.
pub fn kgrams(seq: &[usize], k: usize) -> KGramSet {
    let count = if k == 0 { 0 } else { seq.len().saturating_sub(k) };
    KGramSet {
        k,
        windows: (0..count).map(|t| (t, seq[t..t + k].to_vec())).collect(),
    }
}
