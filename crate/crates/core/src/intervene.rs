//! Decision paths, counterfactual plans and supervision reports over CART trees.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use thiserror::Error;

use crate::carttree::{CartTree, Condition, Relation, TreeError};
use crate::ingest::{feature_week, FeatureColumn, FeatureKind};

#[derive(Debug, Error)]
pub enum InterveneError {
    #[error("expected {expected} feature values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("target class set is empty")]
    EmptyTargetSet,
    #[error("tracked path does not belong to the tree")]
    PathNotInTree,
    #[error("no glossary entry for feature {0:?}")]
    UnknownFeature(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

pub const DEFAULT_MIN_SUPPORT: usize = 3;
pub const DEFAULT_EPSILON: f64 = 0.01;
pub const DEFAULT_INTERVENTION_WEEK: u32 = 4;

/// Root-to-leaf conjunction of conditions with the leaf's statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRule {
    pub leaf_id: usize,
    pub conditions: Vec<Condition>,
    pub predicted_class: u8,
    pub support: usize,
    pub histogram: BTreeMap<u8, usize>,
}

impl PathRule {
    pub fn matches(&self, row: &[f64]) -> bool {
        self.conditions.iter().all(|c| c.holds(row))
    }
}

/// Keeps only the tightest bound per (feature, relation), in order of first
/// appearance.
pub fn simplify_conditions(conditions: &[Condition]) -> Vec<Condition> {
    let mut out: Vec<Condition> = Vec::new();
    for c in conditions {
        match out.iter_mut().find(|o| o.feature_index == c.feature_index && o.relation == c.relation) {
            Some(o) => {
                o.threshold = match c.relation {
                    Relation::Lt => o.threshold.min(c.threshold),
                    Relation::Ge => o.threshold.max(c.threshold),
                }
            }
            None => out.push(c.clone()),
        }
    }
    out
}

/// One rule per leaf whose support reaches `min_support`.
pub fn extract_paths(tree: &CartTree, min_support: usize) -> Vec<PathRule> {
    tree.leaves()
        .into_iter()
        .filter(|l| l.support >= min_support)
        .map(|l| PathRule {
            leaf_id: l.leaf_id,
            conditions: simplify_conditions(&l.conditions),
            predicted_class: l.majority,
            support: l.support,
            histogram: l.histogram,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanChange {
    pub feature: String,
    pub feature_index: usize,
    pub current_value: f64,
    pub relation: Relation,
    pub threshold: f64,
    pub suggested_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlan {
    pub student_id: String,
    pub current_class: u8,
    pub target_classes: Vec<u8>,
    pub changes: Vec<PlanChange>,
    pub chosen_leaf: usize,
    pub predicted_class: u8,
    pub n_changes: usize,
    pub l1_cost: f64,
}

impl InterventionPlan {
    /// `row` with every suggested value applied.
    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        let mut out = row.to_vec();
        for c in &self.changes {
            out[c.feature_index] = c.suggested_value;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanOptions {
    pub epsilon: f64,
    pub min_support: usize,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions { epsilon: DEFAULT_EPSILON, min_support: DEFAULT_MIN_SUPPORT }
    }
}

/// Features whose week is at or after `week`. Names without a week are
/// never actionable.
pub fn actionable_from_week(week: u32) -> impl Fn(&str) -> bool {
    move |name| feature_week(name).is_some_and(|w| w >= week)
}

/// Changes needed to move `row` onto `rule`, or `None` if the rule needs a
/// non-actionable feature changed or cannot be reached inside [0, 1].
fn required_changes(
    rule: &PathRule,
    row: &[f64],
    actionable: &dyn Fn(&str) -> bool,
    epsilon: f64,
) -> Option<Vec<PlanChange>> {
    // per-feature interval [lo, hi) implied by the rule
    let mut bounds: BTreeMap<usize, (&str, Option<f64>, Option<f64>)> = BTreeMap::new();
    for c in &rule.conditions {
        let e = bounds.entry(c.feature_index).or_insert((c.feature.as_str(), None, None));
        match c.relation {
            Relation::Ge => e.1 = Some(e.1.map_or(c.threshold, |lo: f64| lo.max(c.threshold))),
            Relation::Lt => e.2 = Some(e.2.map_or(c.threshold, |hi: f64| hi.min(c.threshold))),
        }
    }
    let mut changes = Vec::new();
    for (j, (name, lo, hi)) in bounds {
        let v = row[j];
        let ok = |x: f64| lo.is_none_or(|lo| x >= lo) && hi.is_none_or(|hi| x < hi);
        if ok(v) {
            continue;
        }
        if !actionable(name) {
            return None;
        }
        let (relation, threshold, suggested) = match (lo, hi) {
            (Some(lo), _) if v < lo => (Relation::Ge, lo, lo.clamp(0.0, 1.0)),
            (lo, Some(hi)) => {
                let s = (hi - epsilon).clamp(0.0, 1.0);
                // a narrow interval may not fit epsilon below its upper end
                let s = match lo {
                    Some(lo) if s < lo => lo,
                    _ => s,
                };
                (Relation::Lt, hi, s)
            }
            _ => unreachable!("violated condition without a bound"),
        };
        if !ok(suggested) {
            return None;
        }
        changes.push(PlanChange {
            feature: name.to_string(),
            feature_index: j,
            current_value: v,
            relation,
            threshold,
            suggested_value: suggested,
        });
    }
    Some(changes)
}

/// Cheapest move of `row` into a leaf predicting one of `targets`. Plans are
/// ranked by number of changed features, then total absolute change, then
/// leaf order. A student already predicted in `targets` gets an empty plan.
pub fn counterfactual_plan(
    tree: &CartTree,
    student_id: &str,
    row: &[f64],
    targets: &BTreeSet<u8>,
    actionable: &dyn Fn(&str) -> bool,
    opts: PlanOptions,
) -> Result<Option<InterventionPlan>, InterveneError> {
    if row.len() != tree.feature_names.len() {
        return Err(InterveneError::DimensionMismatch { expected: tree.feature_names.len(), got: row.len() });
    }
    if targets.is_empty() {
        return Err(InterveneError::EmptyTargetSet);
    }
    let current = tree.predict_leaf(row)?;
    let plan = |changes: Vec<PlanChange>, leaf: usize, class: u8| {
        let l1_cost = changes.iter().map(|c| (c.suggested_value - c.current_value).abs()).sum();
        InterventionPlan {
            student_id: student_id.to_string(),
            current_class: current.class,
            target_classes: targets.iter().copied().collect(),
            n_changes: changes.len(),
            changes,
            chosen_leaf: leaf,
            predicted_class: class,
            l1_cost,
        }
    };
    if targets.contains(&current.class) {
        return Ok(Some(plan(Vec::new(), current.leaf_id, current.class)));
    }

    let mut best: Option<InterventionPlan> = None;
    for rule in extract_paths(tree, opts.min_support) {
        if !targets.contains(&rule.predicted_class) {
            continue;
        }
        let Some(changes) = required_changes(&rule, row, actionable, opts.epsilon) else {
            continue;
        };
        let candidate = plan(changes, rule.leaf_id, rule.predicted_class);
        let better = best.as_ref().is_none_or(|b| (candidate.n_changes, candidate.l1_cost) < (b.n_changes, b.l1_cost));
        if better {
            best = Some(candidate);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditionStatus {
    Satisfied,
    Violated,
    Pending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedCondition {
    pub condition: Condition,
    pub week: Option<u32>,
    pub value: f64,
    pub status: ConditionStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisionReport {
    pub student_id: String,
    pub tracked_path: PathRule,
    pub observed_upto_week: u32,
    pub conditions: Vec<TrackedCondition>,
    pub on_track: bool,
    /// Plan over the remaining weeks after the first violated condition.
    pub remediation: Option<InterventionPlan>,
}

/// Checks a student's observed weeks against a path of the late tree.
/// Conditions on weeks after `observed_upto_week` are pending.
pub fn supervision_report(
    tree_late: &CartTree,
    tracked_path: &PathRule,
    student_id: &str,
    partial_row: &[f64],
    observed_upto_week: u32,
) -> Result<SupervisionReport, InterveneError> {
    tree_late.check_row(partial_row)?;
    let in_tree = extract_paths(tree_late, 0)
        .iter()
        .any(|r| r.leaf_id == tracked_path.leaf_id && r.conditions == tracked_path.conditions);
    if !in_tree {
        return Err(InterveneError::PathNotInTree);
    }
    let conditions: Vec<TrackedCondition> = tracked_path
        .conditions
        .iter()
        .map(|c| {
            let week = feature_week(&c.feature);
            let value = partial_row[c.feature_index];
            let status = if week.is_some_and(|w| w > observed_upto_week) {
                ConditionStatus::Pending
            } else if c.holds(partial_row) {
                ConditionStatus::Satisfied
            } else {
                ConditionStatus::Violated
            };
            TrackedCondition { condition: c.clone(), week, value, status }
        })
        .collect();
    let on_track = conditions.iter().all(|c| c.status != ConditionStatus::Violated);
    let remediation = if on_track {
        None
    } else {
        let targets = BTreeSet::from([tracked_path.predicted_class]);
        let future = actionable_from_week(observed_upto_week + 1);
        counterfactual_plan(tree_late, student_id, partial_row, &targets, &future, PlanOptions::default())?
    };
    Ok(SupervisionReport {
        student_id: student_id.to_string(),
        tracked_path: tracked_path.clone(),
        observed_upto_week,
        conditions,
        on_track,
        remediation,
    })
}

/// Plain-language description per feature name.
pub type Glossary = BTreeMap<String, String>;

/// Glossary entry for a canonical feature name, e.g. "interaction with
/// week-5 course content".
pub fn describe_feature(col: &FeatureColumn) -> String {
    match col.kind {
        FeatureKind::Activity(cat) => format!("interaction with week-{} {}", col.week, cat.describe()),
        FeatureKind::Grade(kind, j) => format!("score on {} {} (due week {})", kind.describe(), j, col.week),
    }
}

/// Glossary for every canonical name in `names`; other names are skipped.
pub fn default_glossary<S: AsRef<str>>(names: &[S]) -> Glossary {
    names
        .iter()
        .filter_map(|n| {
            let col: FeatureColumn = n.as_ref().parse().ok()?;
            Some((n.as_ref().to_string(), describe_feature(&col)))
        })
        .collect()
}

pub const ON_TRACK_MESSAGE: &str = "Student is on track for target grade.";

/// Deterministic text version of a plan, one bullet per change in week order.
pub fn render_strategy_text(plan: &InterventionPlan, glossary: &Glossary) -> Result<String, InterveneError> {
    if plan.changes.is_empty() {
        return Ok(ON_TRACK_MESSAGE.to_string());
    }
    let mut changes: Vec<&PlanChange> = plan.changes.iter().collect();
    changes.sort_by_key(|c| (feature_week(&c.feature).unwrap_or(u32::MAX), c.feature_index));
    let targets: Vec<String> = plan.target_classes.iter().map(u8::to_string).collect();
    let mut out = format!(
        "Strategy for {}: currently predicted grade {}, target grade {}.\n",
        plan.student_id,
        plan.current_class,
        targets.join(" or ")
    );
    for c in changes {
        let what = glossary.get(&c.feature).ok_or_else(|| InterveneError::UnknownFeature(c.feature.clone()))?;
        let week = feature_week(&c.feature).map(|w| format!("Week {w}: ")).unwrap_or_default();
        let _ = match c.relation {
            Relation::Ge => writeln!(
                out,
                "- {week}raise {what} from {:.2} to at least {:.2} ({}).",
                c.current_value, c.suggested_value, c.feature
            ),
            Relation::Lt => writeln!(
                out,
                "- {week}keep {what} below {:.2}, currently {:.2} ({}).",
                c.threshold, c.current_value, c.feature
            ),
        };
    }
    Ok(out)
}
