//! Brute-force oracles and random instance generators shared by the
//! property tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use olit_core::carttree::{fit_cart, CartConfig, CartTree, Relation};
use olit_core::ingest::FeatureMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRADES: [u8; 5] = [0, 2, 3, 4, 5];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Feature names with weeks spread over a nine-week course.
pub fn feature_names(n: usize) -> Vec<String> {
    (0..n).map(|j| format!("Week{} Stat{}", j % 9 + 1, j / 9)).collect()
}

/// Values on a grid of `levels` points in [0, 1], so duplicate values and
/// tied splits are common.
pub fn grid_value(rng: &mut impl Rng, levels: u32) -> f64 {
    rng.random_range(0..=levels) as f64 / levels as f64
}

pub fn random_rows(rng: &mut impl Rng, n: usize, f: usize, levels: u32) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..f).map(|_| grid_value(rng, levels)).collect()).collect()
}

pub fn random_labels(rng: &mut impl Rng, n: usize, n_classes: usize) -> Vec<u8> {
    (0..n).map(|_| GRADES[rng.random_range(0..n_classes)]).collect()
}

pub fn matrix(rows: Vec<Vec<f64>>, labels: Vec<u8>) -> FeatureMatrix {
    let f = rows.first().map_or(0, Vec::len);
    FeatureMatrix::from_rows(feature_names(f), rows, labels).unwrap()
}

/// A tree fitted on random grid data, together with its training matrix.
pub fn random_tree(rng: &mut impl Rng, max_depth: usize) -> (CartTree, FeatureMatrix) {
    let n = rng.random_range(10..=80);
    let f = rng.random_range(1..=6);
    let levels = rng.random_range(3..=20);
    let n_classes = rng.random_range(2..=5);
    let m = matrix(random_rows(rng, n, f, levels), random_labels(rng, n, n_classes));
    let tree = fit_cart(&m, &CartConfig { max_depth, ..CartConfig::default() }).unwrap();
    (tree, m)
}

/// Threshold between consecutive sorted distinct values.
fn oracle_midpoint(a: f64, b: f64) -> f64 {
    let m = (a + b) / 2.0;
    if a < m {
        m
    } else {
        b
    }
}

/// Exact weighted child Gini as `(numerator, denominator)` of
/// `1 - (sum cL^2/nL + sum cR^2/nR) / n`, compared via the inner score.
fn score(left: &BTreeMap<u8, u128>, right: &BTreeMap<u8, u128>) -> (u128, u128) {
    let nl: u128 = left.values().sum();
    let nr: u128 = right.values().sum();
    let sl: u128 = left.values().map(|c| c * c).sum();
    let sr: u128 = right.values().map(|c| c * c).sum();
    (sl * nr + sr * nl, nl * nr)
}

fn greater(a: (u128, u128), b: (u128, u128)) -> bool {
    a.0 * b.1 > b.0 * a.1
}

/// Exhaustive best split: every feature, every midpoint between distinct
/// observed values, partitions recounted from scratch. Returns the
/// `(feature, threshold)` with the lowest weighted Gini, ties to the lower
/// feature and then the lower threshold, or `None` if nothing beats the
/// parent.
pub fn brute_force_split(rows: &[Vec<f64>], labels: &[u8]) -> Option<(usize, f64)> {
    let n = rows.len() as u128;
    let mut parent: BTreeMap<u8, u128> = BTreeMap::new();
    for &l in labels {
        *parent.entry(l).or_default() += 1;
    }
    let parent_score = (parent.values().map(|c| c * c).sum::<u128>(), n);
    let mut best: Option<((u128, u128), usize, f64)> = None;
    for j in 0..rows.first().map_or(0, Vec::len) {
        let mut values: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for w in values.windows(2) {
            let t = oracle_midpoint(w[0], w[1]);
            let mut left = BTreeMap::new();
            let mut right = BTreeMap::new();
            for (r, &l) in rows.iter().zip(labels) {
                let side = if r[j] < t { &mut left } else { &mut right };
                *side.entry(l).or_default() += 1u128;
            }
            let s = score(&left, &right);
            let take = match &best {
                None => true,
                Some((bs, bj, bt)) => greater(s, *bs) || (!greater(*bs, s) && (j, t) < (*bj, *bt)),
            };
            if take {
                best = Some((s, j, t));
            }
        }
    }
    best.filter(|(s, ..)| greater(*s, parent_score)).map(|(_, j, t)| (j, t))
}

/// Minimal number of feature changes that moves `row` into a leaf with
/// support at least `min_support` predicting a class in `targets`, found by
/// enumerating every leaf and intersecting its raw path conditions. Only
/// actionable features may change and every changed value must stay in
/// [0, 1]. A row already predicted in `targets` needs zero changes.
pub fn brute_force_min_changes(
    tree: &CartTree,
    row: &[f64],
    targets: &BTreeSet<u8>,
    actionable: &dyn Fn(&str) -> bool,
    min_support: usize,
) -> Option<usize> {
    if targets.contains(&tree.predict(row).unwrap()) {
        return Some(0);
    }
    let mut best: Option<usize> = None;
    for leaf in tree.leaves() {
        if leaf.support < min_support || !targets.contains(&leaf.majority) {
            continue;
        }
        let mut lo = vec![0.0_f64; row.len()];
        let mut hi = vec![f64::INFINITY; row.len()];
        let mut constrained = vec![false; row.len()];
        for c in &leaf.conditions {
            constrained[c.feature_index] = true;
            match c.relation {
                Relation::Ge => lo[c.feature_index] = lo[c.feature_index].max(c.threshold),
                Relation::Lt => hi[c.feature_index] = hi[c.feature_index].min(c.threshold),
            }
        }
        let mut changes = 0;
        let mut feasible = true;
        for j in 0..row.len() {
            if !constrained[j] {
                continue;
            }
            let inside = row[j] >= lo[j] && row[j] < hi[j];
            if inside {
                continue;
            }
            // some value in [lo, hi) ∩ [0, 1] must exist
            if !actionable(&tree.feature_names[j]) || lo[j] > 1.0 || lo[j] >= hi[j] {
                feasible = false;
                break;
            }
            changes += 1;
        }
        if feasible {
            best = Some(best.map_or(changes, |b| b.min(changes)));
        }
    }
    best
}

pub fn naive_accuracy(pred: &[u8], labels: &[u8]) -> f64 {
    let mut hits = 0;
    for i in 0..pred.len() {
        if pred[i] == labels[i] {
            hits += 1;
        }
    }
    hits as f64 / pred.len() as f64
}

/// `(precision, recall)` of class `c` from a double loop over the
/// confusion matrix.
pub fn naive_precision_recall(pred: &[u8], labels: &[u8], c: u8) -> (Option<f64>, Option<f64>) {
    let mut tp = 0usize;
    let mut predicted = 0usize;
    let mut actual = 0usize;
    for &p in &GRADES {
        for &a in &GRADES {
            let n = pred.iter().zip(labels).filter(|&(&x, &y)| x == p && y == a).count();
            if p == c && a == c {
                tp += n;
            }
            if p == c {
                predicted += n;
            }
            if a == c {
                actual += n;
            }
        }
    }
    let ratio = |d: usize| (d > 0).then(|| tp as f64 / d as f64);
    (ratio(predicted), ratio(actual))
}

/// Relative error `|g - fd| / max(|g|, |fd|)` between the analytic
/// gradient and central differences, in the Euclidean norm.
pub fn gradient_error(f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) -> f64 {
    let mut fd = vec![0.0; x.len()];
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        fd[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = grad.iter().zip(&fd).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(grad).max(norm(&fd)).max(1e-12)
}

/// Random labeled matrix with every class holding at least two rows.
pub fn random_balance_input(rng: &mut impl Rng) -> FeatureMatrix {
    let n_classes = rng.random_range(1..=5);
    let f = rng.random_range(1..=6);
    let levels = rng.random_range(2..=50);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for &c in &GRADES[..n_classes] {
        for _ in 0..rng.random_range(2..=25) {
            rows.push((0..f).map(|_| grid_value(rng, levels)).collect());
            labels.push(c);
        }
    }
    matrix(rows, labels)
}

/// Runs SMOTE on `m` and checks it against its definition: originals kept
/// verbatim as a prefix, uniform class counts, same-class parents, the
/// neighbor among the parent's k nearest same-class rows, and every
/// synthetic row reproduced from its provenance within 1e-12.
pub fn check_smote(m: &FeatureMatrix, k: usize, seed: u64) -> Result<(), String> {
    use olit_core::balance::{smote, SmoteConfig};
    let (out, prov) = smote(m, &SmoteConfig { k_neighbors: k, target_count: None, seed }).map_err(|e| e.to_string())?;
    let n = m.n_rows();
    if out.rows[..n] != m.rows[..] || out.labels[..n] != m.labels[..] || out.student_ids[..n] != m.student_ids[..] {
        return Err("original rows changed".into());
    }
    if prov.len() != out.n_rows() - n {
        return Err("provenance count differs from synthetic count".into());
    }
    let counts = out.class_counts();
    let max = m.class_counts().values().copied().max().unwrap();
    if counts.values().any(|&c| c != max) {
        return Err(format!("class counts not uniform: {counts:?}"));
    }
    for (s, p) in prov.iter().enumerate() {
        let label = out.labels[n + s];
        if m.labels[p.parent_index] != label || m.labels[p.neighbor_index] != label {
            return Err(format!("synthetic row {s} mixes classes"));
        }
        if !(0.0..=1.0).contains(&p.lambda) {
            return Err(format!("lambda {} outside [0, 1]", p.lambda));
        }
        // k nearest same-class rows by squared distance, ties to lower index
        let dist =
            |j: usize| -> f64 { m.rows[p.parent_index].iter().zip(&m.rows[j]).map(|(a, b)| (a - b) * (a - b)).sum() };
        let mut same: Vec<usize> = (0..n).filter(|&j| j != p.parent_index && m.labels[j] == label).collect();
        same.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
        if !same[..k.min(same.len())].contains(&p.neighbor_index) {
            return Err(format!("synthetic row {s}: neighbor not among the {k} nearest"));
        }
        let (a, b) = (&m.rows[p.parent_index], &m.rows[p.neighbor_index]);
        for (j, &v) in out.rows[n + s].iter().enumerate() {
            let expect = (1.0 - p.lambda) * a[j] + p.lambda * b[j];
            if (v - expect).abs() > 1e-12 || v < a[j].min(b[j]) || v > a[j].max(b[j]) {
                return Err(format!("synthetic row {s} column {j} is {v}, expected {expect}"));
            }
        }
    }
    Ok(())
}

/// Worst gradient error over `points` random parameter vectors of one
/// random softmax objective (shape, data and penalty drawn from `rng`).
pub fn random_gradient_check(rng: &mut impl Rng, points: usize) -> f64 {
    use olit_core::linmodel::SoftmaxObjective;
    let n = rng.random_range(5..=40);
    let f = rng.random_range(1..=8);
    let k = rng.random_range(2..=5);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..f).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let l2 = [0.0, 1e-4, 0.1][rng.random_range(0..3)];
    let obj = SoftmaxObjective::new(rows.iter().map(Vec::as_slice).collect(), targets, k, f, l2);
    let mut worst = 0.0_f64;
    for _ in 0..points {
        let x: Vec<f64> = (0..obj.n_params()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (v, g) = obj.value_and_gradient(&x);
        assert!((v - obj.value(&x)).abs() <= 1e-12 * v.abs().max(1.0));
        worst = worst.max(gradient_error(&|p| obj.value(p), &x, &g));
    }
    worst
}

/// Split instance with at most 200 rows and 6 features on a coarse grid.
pub fn random_split_instance(rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<u8>) {
    let n = rng.random_range(1..=200);
    let f = rng.random_range(1..=6);
    let levels = rng.random_range(1..=12);
    let n_classes = rng.random_range(1..=5);
    (random_rows(rng, n, f, levels), random_labels(rng, n, n_classes))
}

/// One fuzzed (tree, student, target) triple for the counterfactual
/// planner. Returns whether a plan was found, or a description of the
/// first property that failed.
pub fn counterfactual_case(rng: &mut impl Rng) -> Result<bool, String> {
    use olit_core::intervene::{actionable_from_week, counterfactual_plan, PlanOptions, DEFAULT_MIN_SUPPORT};
    let depth = rng.random_range(1..=6);
    let (tree, m) = random_tree(rng, depth);
    let row: Vec<f64> = if rng.random_bool(0.5) {
        m.rows[rng.random_range(0..m.n_rows())].clone()
    } else {
        (0..m.n_features()).map(|_| grid_value(rng, 20)).collect()
    };
    let mut targets: BTreeSet<u8> = tree.classes.iter().copied().filter(|_| rng.random_bool(0.4)).collect();
    if targets.is_empty() {
        targets.insert(tree.classes[rng.random_range(0..tree.classes.len())]);
    }
    let week = rng.random_range(1..=10);
    let actionable = actionable_from_week(week);
    let plan = counterfactual_plan(&tree, "s", &row, &targets, &actionable, PlanOptions::default())
        .map_err(|e| e.to_string())?;
    let oracle = brute_force_min_changes(&tree, &row, &targets, &actionable, DEFAULT_MIN_SUPPORT);
    match (&plan, oracle) {
        (None, None) => Ok(false),
        (Some(p), Some(best)) => {
            let after = tree.predict(&p.apply(&row)).unwrap();
            if !targets.contains(&after) {
                return Err(format!("plan lands on grade {after}, targets {targets:?}"));
            }
            if p.n_changes != best || p.changes.len() != best {
                return Err(format!("plan changes {} features, optimum is {best}", p.n_changes));
            }
            for c in &p.changes {
                if !actionable(&c.feature) || !(0.0..=1.0).contains(&c.suggested_value) {
                    return Err(format!("change to {} is not allowed", c.feature));
                }
            }
            Ok(true)
        }
        (p, o) => Err(format!("planner found {:?}, oracle optimum {o:?}", p.as_ref().map(|p| p.n_changes))),
    }
}
