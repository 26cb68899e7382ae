//! Evaluation protocol: weekly-window accuracy table, per-grade precision
//! and recall, tree evaluation and cohort interaction statistics.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

use crate::balance::{BalanceError, BalancePlan, PreparedData};
use crate::carttree::{fit_cart, CartConfig, CartTree, TreeError};
use crate::cohortgen::GradeClass;
use crate::ingest::{select_weeks, select_window, FeatureKind, FeatureMatrix, FeatureSubset, IngestError};
use crate::linmodel::{fit_logreg, FitReport, LinModelError, LrConfig, SoftmaxModel};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no predictions to score")]
    Empty,
    #[error(transparent)]
    Data(#[from] IngestError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error(transparent)]
    Model(#[from] LinModelError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

fn check_lengths(predictions: &[u8], labels: &[u8]) -> Result<(), ExperimentError> {
    if predictions.len() != labels.len() {
        return Err(ExperimentError::LengthMismatch { predictions: predictions.len(), labels: labels.len() });
    }
    Ok(())
}

pub fn accuracy(predictions: &[u8], labels: &[u8]) -> Result<f64, ExperimentError> {
    check_lengths(predictions, labels)?;
    if labels.is_empty() {
        return Err(ExperimentError::Empty);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Precision and recall of one grade. `None` marks a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub grade: u8,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub support: usize,
}

pub fn precision_recall(
    predictions: &[u8],
    labels: &[u8],
    classes: &[u8],
) -> Result<Vec<ClassMetrics>, ExperimentError> {
    check_lengths(predictions, labels)?;
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(classes
        .iter()
        .map(|&c| {
            let tp = predictions.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count();
            let predicted = predictions.iter().filter(|&&p| p == c).count();
            let actual = labels.iter().filter(|&&l| l == c).count();
            ClassMetrics { grade: c, precision: ratio(tp, predicted), recall: ratio(tp, actual), support: actual }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Test,
}

impl SplitName {
    pub fn key(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrRow {
    pub split: SplitName,
    #[serde(flatten)]
    pub metrics: ClassMetrics,
}

/// Per-grade precision and recall on the train and test splits.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrTable {
    pub rows: Vec<PrRow>,
}

/// One cell of the weekly-window table. `test_accuracy` is `None` exactly
/// when the window has no features of the requested kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowResult {
    pub upto_week: u32,
    pub subset: FeatureSubset,
    pub n_features: usize,
    pub test_accuracy: Option<f64>,
    pub train_accuracy: Option<f64>,
}

impl WindowResult {
    pub fn no_features(&self) -> bool {
        self.test_accuracy.is_none()
    }
}

/// Model key used in bundles, e.g. `5:both`.
pub fn window_key(upto_week: u32, subset: FeatureSubset) -> String {
    format!("{upto_week}:{}", subset.key())
}

#[derive(Debug, Clone)]
pub struct WindowRun {
    /// Ordered by week, then subset.
    pub results: Vec<WindowResult>,
    pub models: BTreeMap<String, SoftmaxModel>,
    pub reports: BTreeMap<String, FitReport>,
}

type CellOutput = (WindowResult, Option<(SoftmaxModel, FitReport)>);

fn run_cell(
    m: &FeatureMatrix,
    week: u32,
    subset: FeatureSubset,
    plan: &BalancePlan,
    lr: &LrConfig,
) -> Result<CellOutput, ExperimentError> {
    let window = match select_window(m, week, subset) {
        Ok(w) => w,
        Err(IngestError::EmptyFeatureSet { .. }) => {
            let r = WindowResult { upto_week: week, subset, n_features: 0, test_accuracy: None, train_accuracy: None };
            return Ok((r, None));
        }
        Err(e) => return Err(e.into()),
    };
    let data = plan.prepare(&window)?;
    let (model, report) = fit_logreg(&data.train, lr)?;
    let train_accuracy = accuracy(&model.predict_matrix(&data.train)?, &data.train.require_labels()?)?;
    let test_accuracy = accuracy(&model.predict_matrix(&data.test)?, &data.test.require_labels()?)?;
    let r = WindowResult {
        upto_week: week,
        subset,
        n_features: window.n_features(),
        test_accuracy: Some(test_accuracy),
        train_accuracy: Some(train_accuracy),
    };
    Ok((r, Some((model, report))))
}

/// Fits one logistic model per (week, subset) window and scores it on the
/// held-out rows. All cells share one student partition.
pub fn run_weekly_windows(m: &FeatureMatrix, plan: &BalancePlan, lr: &LrConfig) -> Result<WindowRun, ExperimentError> {
    let n_weeks = m.max_week()?;
    let cells: Vec<(u32, FeatureSubset)> =
        (1..=n_weeks).flat_map(|w| FeatureSubset::ALL.into_iter().map(move |s| (w, s))).collect();

    #[cfg(feature = "parallel")]
    let outputs: Vec<Result<CellOutput, ExperimentError>> = {
        use rayon::prelude::*;
        cells.par_iter().map(|&(w, s)| run_cell(m, w, s, plan, lr)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outputs: Vec<Result<CellOutput, ExperimentError>> =
        cells.iter().map(|&(w, s)| run_cell(m, w, s, plan, lr)).collect();

    let mut run = WindowRun { results: Vec::new(), models: BTreeMap::new(), reports: BTreeMap::new() };
    for out in outputs {
        let (result, fitted) = out?;
        if let Some((model, report)) = fitted {
            let key = window_key(result.upto_week, result.subset);
            run.models.insert(key.clone(), model);
            run.reports.insert(key, report);
        }
        run.results.push(result);
    }
    Ok(run)
}

/// Mean and sample standard deviation of one cell over several runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub upto_week: u32,
    pub subset: FeatureSubset,
    pub n_runs: usize,
    pub mean_accuracy: Option<f64>,
    pub stdev_accuracy: Option<f64>,
}

/// Combines runs cell by cell. Cells that had no features in any run stay
/// without a value.
pub fn aggregate_runs(runs: &[Vec<WindowResult>]) -> Vec<WindowSummary> {
    let mut cells: BTreeMap<(u32, FeatureSubset), Vec<f64>> = BTreeMap::new();
    for run in runs {
        for r in run {
            let e = cells.entry((r.upto_week, r.subset)).or_default();
            e.extend(r.test_accuracy);
        }
    }
    cells
        .into_iter()
        .map(|((upto_week, subset), xs)| {
            let n = xs.len();
            let mean = (n > 0).then(|| xs.iter().sum::<f64>() / n as f64);
            let stdev = mean
                .filter(|_| n > 1)
                .map(|mu| (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
            WindowSummary { upto_week, subset, n_runs: n, mean_accuracy: mean, stdev_accuracy: stdev }
        })
        .collect()
}

/// Repeats the window experiment with each balancing seed in `seeds`.
pub fn run_multi_seed(
    m: &FeatureMatrix,
    plan: &BalancePlan,
    lr: &LrConfig,
    seeds: &[u64],
) -> Result<Vec<WindowSummary>, ExperimentError> {
    let runs = seeds
        .iter()
        .map(|&seed| Ok(run_weekly_windows(m, &BalancePlan { seed, ..plan.clone() }, lr)?.results))
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    Ok(aggregate_runs(&runs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEvaluation {
    pub first_week: u32,
    pub last_week: u32,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub precision_recall: PrTable,
}

/// Tree on the `Both` features of weeks `first_week..=last_week`, scored
/// on the shared partition.
pub fn fit_window_tree(
    m: &FeatureMatrix,
    first_week: u32,
    last_week: u32,
    plan: &BalancePlan,
    cfg: &CartConfig,
) -> Result<(CartTree, TreeEvaluation), ExperimentError> {
    let window = select_weeks(m, first_week, last_week, FeatureSubset::Both)?;
    let data = plan.prepare(&window)?;
    let tree = fit_cart(&data.train, cfg)?;
    let eval = evaluate_tree(&tree, &data, first_week, last_week)?;
    Ok((tree, eval))
}

pub fn evaluate_tree(
    tree: &CartTree,
    data: &PreparedData,
    first_week: u32,
    last_week: u32,
) -> Result<TreeEvaluation, ExperimentError> {
    let mut rows = Vec::new();
    let mut acc = [0.0; 2];
    for (i, (split, part)) in [(SplitName::Train, &data.train), (SplitName::Test, &data.test)].into_iter().enumerate() {
        let labels = part.require_labels()?;
        let predictions = tree.predict_matrix(part)?;
        acc[i] = accuracy(&predictions, &labels)?;
        for metrics in precision_recall(&predictions, &labels, &tree.classes)? {
            rows.push(PrRow { split, metrics });
        }
    }
    Ok(TreeEvaluation {
        first_week,
        last_week,
        train_accuracy: acc[0],
        test_accuracy: acc[1],
        precision_recall: PrTable { rows },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMean {
    pub name: String,
    pub members: usize,
    /// `None` for an empty group.
    pub mean_interactions: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub n_students: usize,
    pub groups: Vec<GroupMean>,
    pub grades: Vec<GroupMean>,
    /// Mean interactions per student in each course week.
    pub weekly_curve: Vec<f64>,
    pub peak_week: Option<u32>,
}

/// Interaction statistics from a matrix of raw (unnormalized) activity
/// counts. Unlabeled rows count toward the weekly curve only.
pub fn cohort_summary(raw: &FeatureMatrix) -> Result<CohortSummary, ExperimentError> {
    let cols = raw.parsed_columns()?;
    let n_weeks = cols.iter().map(|c| c.week).max().unwrap_or(0) as usize;
    let activity: Vec<(usize, usize)> = cols
        .iter()
        .enumerate()
        .filter(|(_, c)| matches!(c.kind, FeatureKind::Activity(_)))
        .map(|(j, c)| (j, c.week as usize - 1))
        .collect();
    let mut weekly = vec![0.0; n_weeks];
    let mut totals = Vec::with_capacity(raw.n_rows());
    for row in &raw.rows {
        let mut t = 0.0;
        for &(j, w) in &activity {
            weekly[w] += row[j];
            t += row[j];
        }
        totals.push(t);
    }
    let n = raw.n_rows();
    if n > 0 {
        weekly.iter_mut().for_each(|x| *x /= n as f64);
    }
    let mean_of = |name: String, pred: &dyn Fn(u8) -> bool| {
        let xs: Vec<f64> =
            raw.labels.iter().zip(&totals).filter(|(l, _)| l.is_some_and(pred)).map(|(_, &t)| t).collect();
        GroupMean {
            name,
            members: xs.len(),
            mean_interactions: (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64),
        }
    };
    let groups = GradeClass::ALL.iter().map(|&g| mean_of(g.to_string(), &|l| GradeClass::of_grade(l) == g)).collect();
    let grades = (0..=5u8).map(|g| mean_of(format!("grade {g}"), &|l| l == g)).collect();
    let peak_week = (n > 0)
        .then(|| {
            weekly.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))).map(|(w, _)| w as u32 + 1)
        })
        .flatten();
    Ok(CohortSummary { n_students: n, groups, grades, weekly_curve: weekly, peak_week })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "NA".into())
}

/// `week,subset,accuracy,n_features`; windows without features read `NA`.
pub fn table1_csv(results: &[WindowResult]) -> String {
    let mut out = String::from("week,subset,accuracy,n_features\n");
    for r in results {
        let _ = writeln!(out, "{},{},{},{}", r.upto_week, r.subset.key(), fmt_opt(r.test_accuracy), r.n_features);
    }
    out
}

/// Weeks as rows, subsets as columns, accuracies in percent.
pub fn table1_text(results: &[WindowResult]) -> String {
    let mut by_week: BTreeMap<u32, BTreeMap<FeatureSubset, Option<f64>>> = BTreeMap::new();
    for r in results {
        by_week.entry(r.upto_week).or_default().insert(r.subset, r.test_accuracy);
    }
    let mut out = format!("{:<8}", "Weeks");
    for s in FeatureSubset::ALL {
        let _ = write!(out, "{:>16}", s.to_string());
    }
    out.push('\n');
    let mut starred = false;
    for (week, cells) in &by_week {
        let _ = write!(out, "{:<8}", format!("1-{week}"));
        for s in FeatureSubset::ALL {
            let cell = match cells.get(&s) {
                Some(Some(a)) => format!("{:.1}%", a * 100.0),
                Some(None) => {
                    starred = true;
                    "*".to_string()
                }
                None => "-".to_string(),
            };
            let _ = write!(out, "{cell:>16}");
        }
        out.push('\n');
    }
    if starred {
        out.push_str("* No grade available for this window.\n");
    }
    out
}

/// `grade,split,precision,recall`; zero denominators read `undefined`.
pub fn table2_csv(table: &PrTable) -> String {
    let mut out = String::from("grade,split,precision,recall\n");
    let cell = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into());
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.metrics.grade,
            r.split.key(),
            cell(r.metrics.precision),
            cell(r.metrics.recall)
        );
    }
    out
}

/// `kind,key,members,mean_interactions`, covering groups, grades and weeks.
pub fn summary_csv(s: &CohortSummary) -> String {
    let mut out = String::from("kind,key,members,mean_interactions\n");
    for g in &s.groups {
        let _ = writeln!(out, "group,{},{},{}", g.name, g.members, fmt_opt(g.mean_interactions));
    }
    for g in &s.grades {
        let key = g.name.trim_start_matches("grade ");
        let _ = writeln!(out, "grade,{key},{},{}", g.members, fmt_opt(g.mean_interactions));
    }
    for (w, x) in s.weekly_curve.iter().enumerate() {
        let _ = writeln!(out, "week,{},{},{x:.4}", w + 1, s.n_students);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_values() {
        assert_eq!(accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2], &[2, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 2, 3, 4], &[0, 2, 4, 4]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[1], &[1, 2]), Err(ExperimentError::LengthMismatch { .. })));
        assert!(matches!(accuracy(&[], &[]), Err(ExperimentError::Empty)));
    }

    #[test]
    fn precision_recall_by_hand() {
        // A = 0, B = 1
        let pr = precision_recall(&[0, 0, 1], &[0, 1, 1], &[0, 1]).unwrap();
        assert_eq!((pr[0].precision, pr[0].recall), (Some(0.5), Some(1.0)));
        assert_eq!((pr[1].precision, pr[1].recall), (Some(1.0), Some(0.5)));
    }

    #[test]
    fn never_predicted_class_is_undefined() {
        let pr = precision_recall(&[0, 0], &[0, 2], &[0, 2]).unwrap();
        assert_eq!(pr[1].precision, None);
        assert_eq!(pr[1].recall, Some(0.0));
    }

    #[test]
    fn perfect_predictions() {
        let labels = [0, 2, 3, 4, 5, 5];
        for c in precision_recall(&labels, &labels, &[0, 2, 3, 4, 5]).unwrap() {
            assert_eq!((c.precision, c.recall), (Some(1.0), Some(1.0)));
        }
    }

    fn raw_matrix(labels: Vec<u8>, per_cell: f64) -> FeatureMatrix {
        let names: Vec<String> = (1..=2)
            .flat_map(|w| (0..4).map(move |k| format!("Week{w} Stat{k}")))
            .chain(["Week2 Quiz1".into()])
            .collect();
        let mut rows = Vec::new();
        for _ in &labels {
            let mut r = vec![0.0; names.len()];
            r[0] = per_cell;
            r[5] = per_cell;
            r[8] = 0.9;
            rows.push(r);
        }
        FeatureMatrix::from_rows(names, rows, labels).unwrap()
    }

    #[test]
    fn summary_with_equal_activity() {
        let s = cohort_summary(&raw_matrix(vec![2, 3, 4, 5], 5.0)).unwrap();
        assert_eq!(s.groups[0].mean_interactions, None);
        assert_eq!(s.groups[1].mean_interactions, Some(10.0));
        assert_eq!(s.groups[2].mean_interactions, Some(10.0));
        assert_eq!(s.weekly_curve, vec![5.0, 5.0]);
        assert_eq!(s.peak_week, Some(1));
        let csv = summary_csv(&s);
        assert!(csv.contains("group,Dropout,0,NA\n"));
        assert!(csv.contains("grade,4,1,10.0000\n"));
    }

    #[test]
    fn aggregate_mean_and_stdev() {
        let cell = |a: Option<f64>| WindowResult {
            upto_week: 1,
            subset: FeatureSubset::Both,
            n_features: 1,
            test_accuracy: a,
            train_accuracy: a,
        };
        let s = aggregate_runs(&[vec![cell(Some(0.5))], vec![cell(Some(0.7))]]);
        assert!((s[0].mean_accuracy.unwrap() - 0.6).abs() < 1e-12);
        assert!((s[0].stdev_accuracy.unwrap() - 0.02f64.sqrt()).abs() < 1e-12);
        let s = aggregate_runs(&[vec![cell(None)]]);
        assert_eq!((s[0].mean_accuracy, s[0].n_runs), (None, 0));
    }

    #[test]
    fn table_text_marks_missing_cells() {
        let results = vec![
            WindowResult {
                upto_week: 1,
                subset: FeatureSubset::GradesOnly,
                n_features: 0,
                test_accuracy: None,
                train_accuracy: None,
            },
            WindowResult {
                upto_week: 1,
                subset: FeatureSubset::Both,
                n_features: 4,
                test_accuracy: Some(0.5),
                train_accuracy: Some(0.6),
            },
        ];
        let text = table1_text(&results);
        assert!(text.contains('*'));
        assert!(text.contains("50.0%"));
        assert!(table1_csv(&results).contains("1,grades,NA,0\n"));
    }
}
