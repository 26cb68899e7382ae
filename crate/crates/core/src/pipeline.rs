//! File-mediated pipeline stages shared by the command line, the HTTP
//! service and the tests. Each stage reads its inputs from disk and writes
//! its artifacts atomically.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::bundle::{
    infer_calendar, load_bundle, save_bundle, train_bundle, BundleError, ModelBundle, TrainOptions, TrainedBundle,
};
use crate::carttree::{Condition, LeafPrediction};
use crate::cohortgen::{
    default_course_start, generate_cohort, summarize_manifest, CalibrationReport, CohortError, GeneratorConfig,
    GradeClass,
};
use crate::experiment::{
    cohort_summary, evaluate_tree, run_weekly_windows, summary_csv, table1_csv, table1_text, table2_csv, CohortSummary,
    ExperimentError, TreeEvaluation, WindowResult,
};
use crate::fsutil::write_atomic;
use crate::ingest::{
    assemble_features, bin_by_week, parse_grades_csv, parse_log_reader, read_features_csv, select_weeks,
    write_features_csv, ColumnMapping, CourseCalendar, FeatureMatrix, FeatureSubset, IngestError,
};
use crate::intervene::{
    actionable_from_week, counterfactual_plan, default_glossary, render_strategy_text, InterveneError,
    InterventionPlan, PlanOptions,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{}: {source}", path.display())]
    Ingest { path: PathBuf, source: IngestError },
    #[error("{}: {source}", path.display())]
    Bundle { path: PathBuf, source: BundleError },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Intervene(#[from] InterveneError),
    #[error("unknown student {0:?}")]
    UnknownStudent(String),
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("value {value} for {feature:?} is outside [0, 1]")]
    ValueOutOfRange { feature: String, value: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl PipelineError {
    pub fn is_internal(&self) -> bool {
        matches!(self, PipelineError::Internal(_))
    }

    fn ingest(path: &Path) -> impl FnOnce(IngestError) -> PipelineError + '_ {
        move |source| PipelineError::Ingest { path: path.to_path_buf(), source }
    }

    fn bundle(path: &Path) -> impl FnOnce(BundleError) -> PipelineError + '_ {
        move |source| PipelineError::Bundle { path: path.to_path_buf(), source }
    }

    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
        move |source| PipelineError::Io { path: path.to_path_buf(), source }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), PipelineError> {
    write_atomic(path, contents).map_err(PipelineError::io(path))
}

fn read_text(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(PipelineError::io(path))
}

pub const GENERATED_FILES: [&str; 4] = ["logs.csv", "grades.csv", "manifest.json", "calendar.cfg"];

/// Writes a synthetic cohort into `out_dir`.
pub fn generate(out_dir: &Path, cfg: &GeneratorConfig) -> Result<CalibrationReport, PipelineError> {
    let cohort = generate_cohort(cfg)?;
    cohort.write_to_dir(out_dir)?;
    Ok(summarize_manifest(&cohort.manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub students: usize,
    pub events: usize,
    pub dropped_outside_window: usize,
    pub other_events: usize,
    pub unlabeled: usize,
    pub missing_assignments: usize,
}

pub fn load_calendar(path: &Path) -> Result<CourseCalendar, PipelineError> {
    CourseCalendar::from_key_values(&read_text(path)?).map_err(PipelineError::ingest(path))
}

/// Parses logs and grades and writes the raw feature matrix to `out`.
pub fn ingest(
    logs: &Path,
    grades: &Path,
    calendar: &CourseCalendar,
    mapping: Option<&Path>,
    out: &Path,
) -> Result<IngestSummary, PipelineError> {
    let mapping = match mapping {
        Some(p) => ColumnMapping::from_key_values(&read_text(p)?).map_err(PipelineError::ingest(p))?,
        None => ColumnMapping::default(),
    };
    let file = File::open(logs).map_err(PipelineError::io(logs))?;
    let log = parse_log_reader(BufReader::new(file), calendar, &mapping).map_err(PipelineError::ingest(logs))?;
    let grade_rows = parse_grades_csv(grades).map_err(PipelineError::ingest(grades))?;
    let assembled = assemble_features(&bin_by_week(&log.events, calendar), &grade_rows, calendar)
        .map_err(PipelineError::ingest(grades))?;
    let mut csv = Vec::new();
    write_features_csv(&assembled.matrix, &mut csv).map_err(PipelineError::ingest(out))?;
    write_file(out, &csv)?;
    Ok(IngestSummary {
        students: assembled.matrix.n_rows(),
        events: log.events.len(),
        dropped_outside_window: log.dropped_outside_window,
        other_events: log.other_events(),
        unlabeled: assembled.matrix.labels.iter().filter(|l| l.is_none()).count(),
        missing_assignments: assembled.flags.values().filter(|f| !f.missing_assignments.is_empty()).count(),
    })
}

pub fn load_features(path: &Path) -> Result<FeatureMatrix, PipelineError> {
    let file = File::open(path).map_err(PipelineError::io(path))?;
    read_features_csv(BufReader::new(file)).map_err(PipelineError::ingest(path))
}

pub fn load_model(path: &Path) -> Result<ModelBundle, PipelineError> {
    load_bundle(path).map_err(PipelineError::bundle(path))
}

fn labeled_rows(m: &FeatureMatrix) -> FeatureMatrix {
    let keep: Vec<usize> = (0..m.n_rows()).filter(|&i| m.labels[i].is_some()).collect();
    m.take_rows(&keep)
}

/// Trains a bundle on the labeled rows of a raw feature file. Without a
/// calendar, one is inferred from the column names.
pub fn train(
    features: &Path,
    out: &Path,
    calendar: Option<CourseCalendar>,
    opts: &TrainOptions,
) -> Result<TrainedBundle, PipelineError> {
    let raw = labeled_rows(&load_features(features)?);
    let calendar = match calendar {
        Some(c) => c,
        None => infer_calendar(&raw.feature_names, default_course_start()).map_err(PipelineError::ingest(features))?,
    };
    let trained = train_bundle(&raw, calendar, opts).map_err(PipelineError::bundle(features))?;
    save_bundle(&trained.bundle, out).map_err(PipelineError::bundle(out))?;
    Ok(trained)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutput {
    pub table1: Vec<WindowResult>,
    pub early_tree: TreeEvaluation,
    pub summary: CohortSummary,
}

pub const EVALUATION_FILES: [&str; 4] = ["table1.csv", "table1.txt", "table2.csv", "summary.csv"];

/// Recomputes the window table, the early tree's precision/recall and the
/// cohort statistics, and writes them into `out_dir`.
pub fn evaluate(features: &Path, bundle_path: &Path, out_dir: &Path) -> Result<EvaluationOutput, PipelineError> {
    let bundle = load_model(bundle_path)?;
    let raw = labeled_rows(&load_features(features)?);
    let m = bundle.normalize(&raw).map_err(PipelineError::bundle(features))?;
    let plan = &bundle.metadata.balance;
    let table1 = run_weekly_windows(&m, plan, &bundle.metadata.lr)?.results;
    let e = &bundle.early_evaluation;
    let window =
        select_weeks(&m, e.first_week, e.last_week, FeatureSubset::Both).map_err(PipelineError::ingest(features))?;
    let window = window.select_named(&bundle.tree_early.feature_names).map_err(PipelineError::ingest(features))?;
    let data = plan.prepare(&window).map_err(ExperimentError::from)?;
    let early_tree = evaluate_tree(&bundle.tree_early, &data, e.first_week, e.last_week)?;
    let summary = cohort_summary(&raw)?;

    std::fs::create_dir_all(out_dir).map_err(PipelineError::io(out_dir))?;
    write_file(&out_dir.join("table1.csv"), table1_csv(&table1).as_bytes())?;
    write_file(&out_dir.join("table1.txt"), table1_text(&table1).as_bytes())?;
    write_file(&out_dir.join("table2.csv"), table2_csv(&early_tree.precision_recall).as_bytes())?;
    write_file(&out_dir.join("summary.csv"), summary_csv(&summary).as_bytes())?;
    Ok(EvaluationOutput { table1, early_tree, summary })
}

/// Grades flagged as at risk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskPolicy {
    pub grades: BTreeSet<u8>,
}

impl Default for RiskPolicy {
    fn default() -> Self {
        RiskPolicy { grades: BTreeSet::from([0, 2]) }
    }
}

/// One student's prediction from the early tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentRecord {
    pub student_id: String,
    pub features: BTreeMap<String, f64>,
    pub predicted_grade: u8,
    pub grade_class: GradeClass,
    pub risk_flag: bool,
    pub final_grade: Option<u8>,
}

/// A feature file scaled with a bundle's normalization record.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub raw: FeatureMatrix,
    pub normalized: FeatureMatrix,
}

impl Cohort {
    pub fn new(bundle: &ModelBundle, raw: FeatureMatrix) -> Result<Cohort, BundleError> {
        let normalized = bundle.normalize(&raw)?;
        Ok(Cohort { raw, normalized })
    }

    pub fn load(bundle: &ModelBundle, features: &Path) -> Result<Cohort, PipelineError> {
        Cohort::new(bundle, load_features(features)?).map_err(PipelineError::bundle(features))
    }

    pub fn row(&self, student_id: &str) -> Result<&[f64], PipelineError> {
        self.normalized
            .row_of(student_id)
            .map(|i| self.normalized.rows[i].as_slice())
            .ok_or_else(|| PipelineError::UnknownStudent(student_id.to_string()))
    }
}

fn internal(e: BundleError) -> PipelineError {
    PipelineError::Internal(e.to_string())
}

pub fn student_record(
    bundle: &ModelBundle,
    cohort: &Cohort,
    student_id: &str,
    policy: &RiskPolicy,
) -> Result<(StudentRecord, LeafPrediction), PipelineError> {
    let row = cohort.row(student_id)?;
    let leaf = bundle.predict_early(row).map_err(internal)?;
    let i = cohort.normalized.row_of(student_id).expect("row exists");
    let features = bundle
        .tree_early
        .feature_names
        .iter()
        .zip(bundle.project(&bundle.tree_early.feature_names, row).map_err(internal)?)
        .map(|(n, v)| (n.clone(), v))
        .collect();
    let record = StudentRecord {
        student_id: student_id.to_string(),
        features,
        predicted_grade: leaf.class,
        grade_class: GradeClass::of_grade(leaf.class),
        risk_flag: policy.grades.contains(&leaf.class),
        final_grade: cohort.normalized.labels[i],
    };
    Ok((record, leaf))
}

/// Predictions for every student, or only `student`.
pub fn predict(
    bundle: &ModelBundle,
    cohort: &Cohort,
    student: Option<&str>,
    policy: &RiskPolicy,
) -> Result<Vec<StudentRecord>, PipelineError> {
    let ids: Vec<&str> = match student {
        Some(id) => vec![id],
        None => cohort.normalized.student_ids.iter().map(String::as_str).collect(),
    };
    ids.into_iter().map(|id| Ok(student_record(bundle, cohort, id, policy)?.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutput {
    pub student_id: String,
    pub intervention_week: u32,
    /// `None` when no reachable leaf predicts a target grade.
    pub plan: Option<InterventionPlan>,
    pub text: String,
}

/// Counterfactual plan on the early tree with features from
/// `intervention_week` on treated as actionable.
pub fn strategy(
    bundle: &ModelBundle,
    cohort: &Cohort,
    student_id: &str,
    targets: &BTreeSet<u8>,
    intervention_week: u32,
) -> Result<StrategyOutput, PipelineError> {
    if targets.is_empty() {
        return Err(PipelineError::Invalid("target grade set is empty".into()));
    }
    let tree = &bundle.tree_early;
    let row = bundle.project(&tree.feature_names, cohort.row(student_id)?).map_err(internal)?;
    let actionable = actionable_from_week(intervention_week);
    let plan = counterfactual_plan(tree, student_id, &row, targets, &actionable, PlanOptions::default())?;
    if let Some(p) = &plan {
        let after = tree.predict(&p.apply(&row)).map_err(InterveneError::from)?;
        if !targets.contains(&after) {
            return Err(PipelineError::Internal(format!("plan for {student_id} lands on grade {after}")));
        }
    }
    let text = match &plan {
        Some(p) => render_strategy_text(p, &default_glossary(&tree.feature_names))?,
        None => format!(
            "No plan reaches grade {} using features from week {intervention_week} on.",
            targets.iter().map(u8::to_string).collect::<Vec<_>>().join(" or ")
        ),
    };
    Ok(StrategyOutput { student_id: student_id.to_string(), intervention_week, plan, text })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIf {
    pub student_id: String,
    pub before: LeafPrediction,
    pub after: LeafPrediction,
    /// Conditions on the new path that were not on the old one.
    pub entered: Vec<Condition>,
    /// Conditions on the old path that the new one no longer tests.
    pub left: Vec<Condition>,
}

/// Re-predicts a student after overriding normalized feature values.
pub fn what_if(
    bundle: &ModelBundle,
    student_id: &str,
    row: &[f64],
    overrides: &BTreeMap<String, f64>,
) -> Result<WhatIf, PipelineError> {
    let mut changed = row.to_vec();
    for (name, &value) in overrides {
        let j = bundle
            .normalizer
            .feature_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| PipelineError::UnknownFeature(name.clone()))?;
        if !(0.0..=1.0).contains(&value) {
            return Err(PipelineError::ValueOutOfRange { feature: name.clone(), value });
        }
        changed[j] = value;
    }
    let before = bundle.predict_early(row).map_err(internal)?;
    let after = bundle.predict_early(&changed).map_err(internal)?;
    let entered = after.conditions.iter().filter(|c| !before.conditions.contains(c)).cloned().collect();
    let left = before.conditions.iter().filter(|c| !after.conditions.contains(c)).cloned().collect();
    Ok(WhatIf { student_id: student_id.to_string(), before, after, entered, left })
}

/// Parses a comma-separated grade list such as `4,5`.
pub fn parse_targets(s: &str) -> Result<BTreeSet<u8>, PipelineError> {
    let targets = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| match t.trim().parse::<u8>() {
            Ok(g) if g <= 5 => Ok(g),
            _ => Err(PipelineError::Invalid(format!("bad target grade {t:?}"))),
        })
        .collect::<Result<BTreeSet<u8>, _>>()?;
    if targets.is_empty() {
        return Err(PipelineError::Invalid("target grade set is empty".into()));
    }
    Ok(targets)
}
