//! Trained model bundles: training, persistence and inference helpers.
//!
//! A bundle file is one JSON document
//! `{"format_version": 1, "checksum": "<sha256 hex>", "body": {...}}`, where
//! the checksum covers the canonical serialization of `body`.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

use crate::balance::{BalancePlan, SmoteOrder};
use crate::carttree::{CartConfig, CartTree, LeafPrediction};
use crate::experiment::{fit_window_tree, run_weekly_windows, ExperimentError, TreeEvaluation, WindowResult};
use crate::fsutil::write_atomic;
use crate::ingest::{
    normalize_features, CourseCalendar, FeatureColumn, FeatureKind, FeatureMatrix, IngestError, Normalizer,
};
use crate::linmodel::{FitReport, LrConfig, SoftmaxModel};

pub const FORMAT_VERSION: u32 = 1;
pub const BUNDLE_EXTENSION: &str = ".olit.json";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("corrupt bundle: {0}")]
    CorruptBundle(String),
    #[error("bundle format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("inconsistent bundle: {0}")]
    Inconsistent(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] IngestError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub smote_order: SmoteOrder,
    pub balance: BalancePlan,
    pub lr: LrConfig,
    pub cart: CartConfig,
    /// sha256 of the serialized balance, regression and tree settings.
    pub config_hash: String,
    pub n_students: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub calendar: CourseCalendar,
    pub normalizer: Normalizer,
    /// Logistic models keyed by window, e.g. `5:both`.
    pub lr_models: Option<BTreeMap<String, SoftmaxModel>>,
    pub table1: Option<Vec<WindowResult>>,
    pub tree_early: CartTree,
    pub tree_late: CartTree,
    pub early_evaluation: TreeEvaluation,
    pub late_evaluation: TreeEvaluation,
    pub metadata: TrainingMetadata,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format_version: u64,
    checksum: String,
    body: serde_json::Value,
}

fn checksum(body: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(body).expect("JSON values always serialize");
    hex::encode(Sha256::digest(&bytes))
}

impl ModelBundle {
    pub fn to_json(&self) -> String {
        let body = serde_json::to_value(self).expect("bundle serializes");
        let env = Envelope { format_version: FORMAT_VERSION as u64, checksum: checksum(&body), body };
        let mut s = serde_json::to_string_pretty(&env).expect("bundle serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<ModelBundle, BundleError> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| BundleError::CorruptBundle(e.to_string()))?;
        let version = raw
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| BundleError::CorruptBundle("missing format_version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(BundleError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let env: Envelope = serde_json::from_value(raw).map_err(|e| BundleError::CorruptBundle(e.to_string()))?;
        if checksum(&env.body) != env.checksum {
            return Err(BundleError::CorruptBundle("checksum mismatch".into()));
        }
        let bundle: ModelBundle =
            serde_json::from_value(env.body).map_err(|e| BundleError::CorruptBundle(e.to_string()))?;
        bundle.validate()?;
        Ok(bundle)
    }

    /// Every model's features must be columns of the normalization record.
    pub fn validate(&self) -> Result<(), BundleError> {
        let known = |names: &[String], what: &str| -> Result<(), BundleError> {
            match names.iter().find(|n| !self.normalizer.feature_names.contains(n)) {
                Some(n) => Err(BundleError::Inconsistent(format!("{what} uses unknown feature {n:?}"))),
                None => Ok(()),
            }
        };
        if self.normalizer.maxima.len() != self.normalizer.feature_names.len() {
            return Err(BundleError::Inconsistent("normalizer maxima do not match its columns".into()));
        }
        known(&self.tree_early.feature_names, "early tree")?;
        known(&self.tree_late.feature_names, "late tree")?;
        for (key, m) in self.lr_models.iter().flatten() {
            known(&m.feature_names, &format!("model {key}"))?;
        }
        Ok(())
    }

    /// Picks the named columns out of a row laid out like the normalizer.
    pub fn project(&self, names: &[String], full_row: &[f64]) -> Result<Vec<f64>, BundleError> {
        names
            .iter()
            .map(|n| {
                let j = self.normalizer.feature_names.iter().position(|x| x == n).ok_or_else(|| {
                    BundleError::Inconsistent(format!("feature {n:?} missing from the normalization record"))
                })?;
                full_row.get(j).copied().ok_or_else(|| BundleError::Inconsistent("row is too short".into()))
            })
            .collect()
    }

    /// Scales a raw matrix with the recorded maxima.
    pub fn normalize(&self, raw: &FeatureMatrix) -> Result<FeatureMatrix, BundleError> {
        Ok(self.normalizer.apply(raw)?)
    }

    pub fn predict_early(&self, full_row: &[f64]) -> Result<LeafPrediction, BundleError> {
        let row = self.project(&self.tree_early.feature_names, full_row)?;
        self.tree_early.predict_leaf(&row).map_err(|e| BundleError::Inconsistent(e.to_string()))
    }

    pub fn predict_late(&self, full_row: &[f64]) -> Result<LeafPrediction, BundleError> {
        let row = self.project(&self.tree_late.feature_names, full_row)?;
        self.tree_late.predict_leaf(&row).map_err(|e| BundleError::Inconsistent(e.to_string()))
    }
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<(), BundleError> {
    write_atomic(path, bundle.to_json().as_bytes())?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle, BundleError> {
    let bytes = std::fs::read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| BundleError::CorruptBundle(e.to_string()))?;
    ModelBundle::from_json(text)
}

/// Calendar implied by canonical feature names: the last week seen and the
/// weeks carrying each assignment column.
pub fn infer_calendar(names: &[String], course_start: NaiveDate) -> Result<CourseCalendar, IngestError> {
    let cols: Vec<FeatureColumn> = names.iter().map(|n| n.parse()).collect::<Result<_, _>>()?;
    let mut cal = CourseCalendar::with_start(course_start);
    cal.n_weeks = cols.iter().map(|c| c.week).max().unwrap_or(0);
    let mut deadlines: BTreeMap<(u8, u8), u32> = BTreeMap::new();
    for c in &cols {
        if let FeatureKind::Grade(kind, j) = c.kind {
            deadlines.insert((kind as u8, j), c.week);
        }
    }
    let weeks = |kind: u8| (1..=3).filter_map(|j| deadlines.get(&(kind, j)).copied()).collect::<Vec<u32>>();
    cal.mp_deadline_weeks = weeks(0);
    cal.quiz_deadline_weeks = weeks(1);
    cal.pr_deadline_weeks = weeks(2);
    cal.validate()?;
    Ok(cal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub balance: BalancePlan,
    pub lr: LrConfig,
    pub cart: CartConfig,
    /// Fit the weekly-window logistic models as well as the trees.
    pub with_lr: bool,
    pub early_weeks: (u32, u32),
    pub late_weeks: (u32, u32),
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            balance: BalancePlan::default(),
            lr: LrConfig::default(),
            cart: CartConfig::default(),
            with_lr: true,
            early_weeks: (1, 5),
            late_weeks: (5, 8),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedBundle {
    pub bundle: ModelBundle,
    pub fit_reports: BTreeMap<String, FitReport>,
}

/// Normalizes `raw`, fits both trees and (optionally) every window model.
pub fn train_bundle(
    raw: &FeatureMatrix,
    calendar: CourseCalendar,
    opts: &TrainOptions,
) -> Result<TrainedBundle, BundleError> {
    let (m, normalizer) = normalize_features(raw);
    let (tree_early, early_evaluation) =
        fit_window_tree(&m, opts.early_weeks.0, opts.early_weeks.1, &opts.balance, &opts.cart)?;
    let (tree_late, late_evaluation) =
        fit_window_tree(&m, opts.late_weeks.0, opts.late_weeks.1, &opts.balance, &opts.cart)?;
    let (lr_models, table1, fit_reports) = if opts.with_lr {
        let run = run_weekly_windows(&m, &opts.balance, &opts.lr)?;
        (Some(run.models), Some(run.results), run.reports)
    } else {
        (None, None, BTreeMap::new())
    };
    let settings = serde_json::to_vec(&(&opts.balance, &opts.lr, &opts.cart)).expect("settings serialize");
    let metadata = TrainingMetadata {
        seed: opts.balance.seed,
        smote_order: opts.balance.order,
        balance: opts.balance.clone(),
        lr: opts.lr.clone(),
        cart: opts.cart.clone(),
        config_hash: hex::encode(Sha256::digest(&settings)),
        n_students: raw.n_rows(),
    };
    let bundle = ModelBundle {
        calendar,
        normalizer,
        lr_models,
        table1,
        tree_early,
        tree_late,
        early_evaluation,
        late_evaluation,
        metadata,
    };
    Ok(TrainedBundle { bundle, fit_reports })
}
