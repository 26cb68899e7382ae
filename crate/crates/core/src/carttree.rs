//! CART classification trees with Gini impurity and threshold splits.
//!
//! Samples with `value < threshold` go left and `value >= threshold` go
//! right. Candidate thresholds are midpoints between consecutive distinct
//! values. Split quality is compared in exact integer arithmetic, so tie
//! breaks (lower feature index, then lower threshold) never depend on
//! floating-point rounding.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use thiserror::Error;

use crate::ingest::{FeatureMatrix, IngestError};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("empty class histogram")]
    EmptyHistogram,
    #[error("training set has no rows")]
    EmptyTrainingSet,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} feature values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Data(#[from] IngestError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartConfig {
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub min_impurity_decrease: f64,
    /// Unused; fitting is deterministic.
    #[serde(default)]
    pub seed: u64,
}

impl Default for CartConfig {
    fn default() -> Self {
        CartConfig { max_depth: 5, min_samples_split: 2, min_impurity_decrease: 0.0, seed: 0 }
    }
}

impl CartConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
    pub fn validate(&self) -> Result<(), TreeError> {
        if self.max_depth == 0 {
            return Err(TreeError::InvalidConfig("max_depth must be at least 1".into()));
        }
        if self.min_samples_split < 2 {
            return Err(TreeError::InvalidConfig("min_samples_split must be at least 2".into()));
        }
        if !(self.min_impurity_decrease >= 0.0) {
            return Err(TreeError::InvalidConfig("min_impurity_decrease must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">=")]
    Ge,
}

impl Relation {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Relation::Lt => value < threshold,
            Relation::Ge => value >= threshold,
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::Lt => "<",
            Relation::Ge => "≥",
        })
    }
}

/// One test on a root-to-leaf path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub feature: String,
    pub feature_index: usize,
    pub relation: Relation,
    pub threshold: f64,
}

impl Condition {
    pub fn holds(&self, row: &[f64]) -> bool {
        self.relation.holds(row[self.feature_index], self.threshold)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {:.2}", self.feature, self.relation, self.threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Internal {
        feature: String,
        feature_index: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        #[serde(with = "histogram_keys")]
        histogram: BTreeMap<u8, usize>,
        majority: u8,
        support: usize,
    },
}

// Untagged enums buffer map keys as strings, so parse them back explicitly.
mod histogram_keys {
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(h: &BTreeMap<u8, usize>, s: S) -> Result<S::Ok, S::Error> {
        h.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<u8, usize>, D::Error> {
        BTreeMap::<String, usize>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse::<u8>().map(|k| (k, v)).map_err(D::Error::custom))
            .collect()
    }
}

impl TreeNode {
    fn leaf(histogram: BTreeMap<u8, usize>) -> TreeNode {
        let support = histogram.values().sum();
        TreeNode::Leaf { majority: majority_class(&histogram), histogram, support }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Internal { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Internal { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

/// Most frequent class; ties go to the lower grade label.
pub fn majority_class(histogram: &BTreeMap<u8, usize>) -> u8 {
    let mut best: Option<(u8, usize)> = None;
    for (&class, &count) in histogram {
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((class, count));
        }
    }
    best.map(|(c, _)| c).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartTree {
    pub root: TreeNode,
    pub feature_names: Vec<String>,
    pub classes: Vec<u8>,
    pub config: CartConfig,
}

/// A leaf together with the path that reaches it. Leaves are numbered
/// left-to-right (depth-first, left child first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafInfo {
    pub leaf_id: usize,
    pub conditions: Vec<Condition>,
    pub histogram: BTreeMap<u8, usize>,
    pub majority: u8,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafPrediction {
    pub class: u8,
    pub leaf_id: usize,
    pub conditions: Vec<Condition>,
}

impl CartTree {
    pub fn check_row(&self, row: &[f64]) -> Result<(), TreeError> {
        if row.len() != self.feature_names.len() {
            return Err(TreeError::DimensionMismatch { expected: self.feature_names.len(), got: row.len() });
        }
        Ok(())
    }

    /// Routes `row` to its leaf and returns the leaf's class and path.
    pub fn predict_leaf(&self, row: &[f64]) -> Result<LeafPrediction, TreeError> {
        self.check_row(row)?;
        let mut node = &self.root;
        let mut leaf_id = 0;
        let mut conditions = Vec::new();
        loop {
            match node {
                TreeNode::Leaf { majority, .. } => return Ok(LeafPrediction { class: *majority, leaf_id, conditions }),
                TreeNode::Internal { feature, feature_index, threshold, left, right } => {
                    let relation = if row[*feature_index] < *threshold {
                        node = left;
                        Relation::Lt
                    } else {
                        leaf_id += left.n_leaves();
                        node = right;
                        Relation::Ge
                    };
                    conditions.push(Condition {
                        feature: feature.clone(),
                        feature_index: *feature_index,
                        relation,
                        threshold: *threshold,
                    });
                }
            }
        }
    }

    pub fn predict(&self, row: &[f64]) -> Result<u8, TreeError> {
        Ok(self.predict_leaf(row)?.class)
    }

    pub fn predict_matrix(&self, m: &FeatureMatrix) -> Result<Vec<u8>, TreeError> {
        m.rows.iter().map(|r| self.predict(r)).collect()
    }

    /// All leaves in left-to-right order.
    pub fn leaves(&self) -> Vec<LeafInfo> {
        fn walk(node: &TreeNode, path: &mut Vec<Condition>, out: &mut Vec<LeafInfo>) {
            match node {
                TreeNode::Leaf { histogram, majority, support } => out.push(LeafInfo {
                    leaf_id: out.len(),
                    conditions: path.clone(),
                    histogram: histogram.clone(),
                    majority: *majority,
                    support: *support,
                }),
                TreeNode::Internal { feature, feature_index, threshold, left, right } => {
                    for (relation, child) in [(Relation::Lt, left), (Relation::Ge, right)] {
                        path.push(Condition {
                            feature: feature.clone(),
                            feature_index: *feature_index,
                            relation,
                            threshold: *threshold,
                        });
                        walk(child, path, out);
                        path.pop();
                    }
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut Vec::new(), &mut out);
        out
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    /// Graphviz rendering with one box per node.
    pub fn to_dot(&self) -> String {
        fn walk(node: &TreeNode, next: &mut usize, out: &mut String) -> usize {
            let id = *next;
            *next += 1;
            match node {
                TreeNode::Leaf { histogram, majority, support } => {
                    let hist = histogram.iter().map(|(c, n)| format!("{c}:{n}")).collect::<Vec<_>>().join(" ");
                    let _ = writeln!(
                        out,
                        "  n{id} [shape=box, style=filled, fillcolor=\"#eef5ff\", label=\"grade {majority}\\nsupport {support}\\n[{hist}]\"];"
                    );
                }
                TreeNode::Internal { feature, threshold, left, right, .. } => {
                    let _ = writeln!(out, "  n{id} [shape=box, label=\"{feature} < {threshold:.2}\"];");
                    let l = walk(left, next, out);
                    let r = walk(right, next, out);
                    let _ = writeln!(out, "  n{id} -> n{l} [label=\"yes\"];");
                    let _ = writeln!(out, "  n{id} -> n{r} [label=\"no\"];");
                }
            }
            id
        }
        let mut out = String::from("digraph tree {\n  node [fontname=\"Helvetica\"];\n");
        walk(&self.root, &mut 0, &mut out);
        out.push_str("}\n");
        out
    }
}

/// Gini impurity `1 - sum p_c^2` of a class-count histogram.
pub fn gini(counts: &[usize]) -> Result<f64, TreeError> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(TreeError::EmptyHistogram);
    }
    let n = n as f64;
    Ok(1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>())
}

/// Threshold between two consecutive distinct sorted values `a < b`.
pub fn midpoint(a: f64, b: f64) -> f64 {
    let m = 0.5 * (a + b);
    if m > a {
        m
    } else {
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature_index: usize,
    pub threshold: f64,
    pub impurity_decrease: f64,
}

/// Exact split score `sum cL^2 / nL + sum cR^2 / nR` as a fraction.
/// Larger is better; the weighted child Gini is `1 - score / n`.
#[derive(Debug, Clone, Copy)]
struct Score {
    num: u128,
    den: u128,
}

impl Score {
    fn new(sq_left: u128, n_left: u128, sq_right: u128, n_right: u128) -> Self {
        Score { num: sq_left * n_right + sq_right * n_left, den: n_left * n_right }
    }

    fn cmp(&self, other: &Score) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

fn sum_sq(counts: &[usize]) -> u128 {
    counts.iter().map(|&c| (c as u128) * (c as u128)).sum()
}

fn weighted_child_gini(left: &[usize], right: &[usize]) -> f64 {
    let nl: usize = left.iter().sum();
    let nr: usize = right.iter().sum();
    let n = (nl + nr) as f64;
    nl as f64 / n * gini(left).unwrap() + nr as f64 / n * gini(right).unwrap()
}

/// Best split of the rows at `idx`, with labels given as class indices.
#[allow(clippy::needless_range_loop)] // j walks columns, not rows
fn best_split_at(
    rows: &[Vec<f64>],
    targets: &[usize],
    n_classes: usize,
    idx: &[usize],
    min_impurity_decrease: f64,
) -> Option<Split> {
    if idx.len() < 2 {
        return None;
    }
    let mut parent = vec![0usize; n_classes];
    for &i in idx {
        parent[targets[i]] += 1;
    }
    let n = idx.len() as u128;
    let parent_score = Score { num: sum_sq(&parent), den: n };
    let parent_gini = gini(&parent).unwrap();
    let n_features = rows[idx[0]].len();

    let mut best: Option<(Score, usize, f64, Vec<usize>)> = None;
    let mut order = idx.to_vec();
    for j in 0..n_features {
        order.sort_by(|&a, &b| rows[a][j].total_cmp(&rows[b][j]).then(a.cmp(&b)));
        let mut left = vec![0usize; n_classes];
        for pos in 0..order.len() - 1 {
            left[targets[order[pos]]] += 1;
            let (a, b) = (rows[order[pos]][j], rows[order[pos + 1]][j]);
            if a == b {
                continue;
            }
            let n_left = pos as u128 + 1;
            let right: Vec<usize> = parent.iter().zip(&left).map(|(p, l)| p - l).collect();
            let score = Score::new(sum_sq(&left), n_left, sum_sq(&right), n - n_left);
            if best.as_ref().is_none_or(|(s, ..)| score.cmp(s) == Ordering::Greater) {
                best = Some((score, j, midpoint(a, b), left.clone()));
            }
        }
    }
    let (score, feature_index, threshold, left) = best?;
    if score.cmp(&parent_score) != Ordering::Greater {
        return None;
    }
    let right: Vec<usize> = parent.iter().zip(&left).map(|(p, l)| p - l).collect();
    let impurity_decrease = parent_gini - weighted_child_gini(&left, &right);
    (impurity_decrease > min_impurity_decrease).then_some(Split { feature_index, threshold, impurity_decrease })
}

/// Best Gini split over all features and midpoint thresholds, or `None`
/// when no split decreases impurity by more than `min_impurity_decrease`.
pub fn best_split(rows: &[Vec<f64>], labels: &[u8], min_impurity_decrease: f64) -> Option<Split> {
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let targets: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).unwrap()).collect();
    let idx: Vec<usize> = (0..rows.len()).collect();
    best_split_at(rows, &targets, classes.len(), &idx, min_impurity_decrease)
}

/// Grows a CART tree on all labeled rows of `train`.
pub fn fit_cart(train: &FeatureMatrix, cfg: &CartConfig) -> Result<CartTree, TreeError> {
    cfg.validate()?;
    let labels = train.require_labels()?;
    if labels.is_empty() {
        return Err(TreeError::EmptyTrainingSet);
    }
    let classes = train.classes();
    let targets: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).unwrap()).collect();

    struct Ctx<'a> {
        rows: &'a [Vec<f64>],
        targets: &'a [usize],
        classes: &'a [u8],
        names: &'a [String],
        cfg: &'a CartConfig,
    }

    fn grow(ctx: &Ctx, idx: Vec<usize>, depth: usize) -> TreeNode {
        let mut hist = BTreeMap::new();
        for &i in &idx {
            *hist.entry(ctx.classes[ctx.targets[i]]).or_insert(0) += 1;
        }
        if depth >= ctx.cfg.max_depth || idx.len() < ctx.cfg.min_samples_split || hist.len() == 1 {
            return TreeNode::leaf(hist);
        }
        let Some(split) = best_split_at(ctx.rows, ctx.targets, ctx.classes.len(), &idx, ctx.cfg.min_impurity_decrease)
        else {
            return TreeNode::leaf(hist);
        };
        let (left, right): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| ctx.rows[i][split.feature_index] < split.threshold);
        TreeNode::Internal {
            feature: ctx.names[split.feature_index].clone(),
            feature_index: split.feature_index,
            threshold: split.threshold,
            left: Box::new(grow(ctx, left, depth + 1)),
            right: Box::new(grow(ctx, right, depth + 1)),
        }
    }

    let ctx = Ctx { rows: &train.rows, targets: &targets, classes: &classes, names: &train.feature_names, cfg };
    let root = grow(&ctx, (0..labels.len()).collect(), 0);
    Ok(CartTree { root, feature_names: train.feature_names.clone(), classes, config: cfg.clone() })
}
