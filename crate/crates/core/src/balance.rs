//! SMOTE oversampling and seeded stratified splitting.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::ingest::{FeatureMatrix, IngestError};

#[derive(Debug, Error)]
pub enum BalanceError {
    #[error("class {class} has {count} sample(s); at least 2 are required")]
    ClassTooSmall { class: u8, count: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] IngestError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoteConfig {
    pub k_neighbors: usize,
    /// Per-class target size; `None` balances every class up to the largest.
    pub target_count: Option<usize>,
    pub seed: u64,
}

impl Default for SmoteConfig {
    fn default() -> Self {
        SmoteConfig { k_neighbors: 5, target_count: None, seed: 0 }
    }
}

/// How a synthetic row was made: `parent + lambda * (neighbor - parent)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProvenance {
    pub parent_index: usize,
    pub neighbor_index: usize,
    pub lambda: f64,
}

/// Indices (ascending) of the `k` nearest rows to `of` among `members`,
/// excluding `of` itself. Ties go to the lower row index.
fn nearest_neighbors(rows: &[Vec<f64>], members: &[usize], of: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = members
        .iter()
        .filter(|&&j| j != of)
        .map(|&j| {
            let dist: f64 = rows[of].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            (dist, j)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.truncate(k);
    d.into_iter().map(|(_, j)| j).collect()
}

/// Oversamples every class to the target count with SMOTE interpolation.
///
/// Original rows come first and unchanged; synthetic rows follow, grouped
/// by class in ascending label order, with one provenance entry each.
/// Parents are taken round-robin over the class members.
pub fn smote(m: &FeatureMatrix, cfg: &SmoteConfig) -> Result<(FeatureMatrix, Vec<SyntheticProvenance>), BalanceError> {
    if cfg.k_neighbors == 0 {
        return Err(BalanceError::InvalidConfig("k_neighbors must be at least 1".into()));
    }
    let labels = m.require_labels()?;
    let mut members: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    for (&class, idx) in &members {
        if idx.len() < 2 {
            return Err(BalanceError::ClassTooSmall { class, count: idx.len() });
        }
    }
    let majority = members.values().map(Vec::len).max().unwrap_or(0);
    let target = cfg.target_count.unwrap_or(majority);
    if let Some((&class, idx)) = members.iter().find(|(_, idx)| idx.len() > target) {
        return Err(BalanceError::InvalidConfig(format!(
            "target count {target} is below the {} samples of class {class}",
            idx.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = m.clone();
    let mut provenance = Vec::new();
    for (&class, idx) in &members {
        let needed = target - idx.len();
        if needed == 0 {
            continue;
        }
        let k = cfg.k_neighbors.min(idx.len() - 1);
        if k < cfg.k_neighbors {
            log::warn!("class {class}: k_neighbors clamped from {} to {k}", cfg.k_neighbors);
        }
        let neighbors: Vec<Vec<usize>> = idx.iter().map(|&i| nearest_neighbors(&m.rows, idx, i, k)).collect();
        for s in 0..needed {
            let slot = s % idx.len();
            let parent = idx[slot];
            let neighbor = neighbors[slot][rng.random_range(0..k)];
            let lambda: f64 = rng.random();
            let row = interpolate(&m.rows[parent], &m.rows[neighbor], lambda);
            out.rows.push(row);
            out.labels.push(Some(class));
            out.student_ids.push(format!("synthetic-{}", provenance.len()));
            provenance.push(SyntheticProvenance { parent_index: parent, neighbor_index: neighbor, lambda });
        }
    }
    Ok((out, provenance))
}

/// `a + lambda * (b - a)`, kept inside the segment's bounding box so
/// rounding never leaves `[min(a, b), max(a, b)]`.
pub fn interpolate(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| ((1.0 - lambda) * x + lambda * y).clamp(x.min(y), x.max(y))).collect()
}

/// Row indices of a train/test partition, each ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class shuffled split. Each class contributes `round(n * fraction)`
/// rows to train, but always at least one row to each side.
pub fn stratified_split_indices(labels: &[u8], train_fraction: f64, seed: u64) -> Result<SplitIndices, BalanceError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(BalanceError::InvalidConfig(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let mut members: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (&class, idx) in &mut members {
        let n = idx.len();
        if n < 2 {
            return Err(BalanceError::ClassTooSmall { class, count: n });
        }
        idx.shuffle(&mut rng);
        let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

pub fn stratified_split(
    m: &FeatureMatrix,
    train_fraction: f64,
    seed: u64,
) -> Result<(FeatureMatrix, FeatureMatrix), BalanceError> {
    let s = stratified_split_indices(&m.require_labels()?, train_fraction, seed)?;
    Ok((m.take_rows(&s.train), m.take_rows(&s.test)))
}

/// Whether SMOTE runs before the split (as in the original study, which
/// lets synthetic neighbours of test rows into training) or on the
/// training part only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoteOrder {
    #[default]
    Paper,
    TrainOnly,
}

impl fmt::Display for SmoteOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SmoteOrder::Paper => "paper",
            SmoteOrder::TrainOnly => "train-only",
        })
    }
}

impl FromStr for SmoteOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(SmoteOrder::Paper),
            "train-only" => Ok(SmoteOrder::TrainOnly),
            other => Err(format!("unknown SMOTE order {other:?} (expected paper|train-only)")),
        }
    }
}

/// Balancing and splitting settings shared by every model in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancePlan {
    pub order: SmoteOrder,
    pub k_neighbors: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for BalancePlan {
    fn default() -> Self {
        BalancePlan { order: SmoteOrder::Paper, k_neighbors: 5, train_fraction: 0.8, seed: 42 }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: FeatureMatrix,
    pub test: FeatureMatrix,
    pub order: SmoteOrder,
}

impl BalancePlan {
    fn smote_config(&self) -> SmoteConfig {
        SmoteConfig {
            k_neighbors: self.k_neighbors,
            target_count: None,
            seed: self.seed.wrapping_add(0x9E37_79B9_7F4A_7C15),
        }
    }

    /// Balances and splits `m`. The partition depends only on the labels
    /// and the seed, so column subsets of one matrix get the same rows.
    pub fn prepare(&self, m: &FeatureMatrix) -> Result<PreparedData, BalanceError> {
        match self.order {
            SmoteOrder::Paper => {
                let (balanced, _) = smote(m, &self.smote_config())?;
                let (train, test) = stratified_split(&balanced, self.train_fraction, self.seed)?;
                Ok(PreparedData { train, test, order: self.order })
            }
            SmoteOrder::TrainOnly => {
                let (train, test) = stratified_split(m, self.train_fraction, self.seed)?;
                let (train, _) = smote(&train, &self.smote_config())?;
                Ok(PreparedData { train, test, order: self.order })
            }
        }
    }
}
