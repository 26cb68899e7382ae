//! In-browser session over a synthetic cohort.
//!
//! [`DemoSession`] generates a cohort, trains the two trees (no logistic
//! models, to keep start-up short) and answers what-if, plan and tree
//! queries. [`Demo`] wraps it for JavaScript and returns JSON strings.

use std::collections::BTreeMap;

use olit_core::bundle::{train_bundle, ModelBundle, TrainOptions};
use olit_core::cohortgen::{generate_cohort, GeneratorConfig};
use olit_core::intervene::{extract_paths, PathRule, DEFAULT_MIN_SUPPORT};
use olit_core::pipeline::{
    self, parse_targets, Cohort, PipelineError, RiskPolicy, StrategyOutput, StudentRecord, WhatIf,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use wasm_bindgen::prelude::*;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("training failed: {0}")]
    Train(String),
    #[error("bad request: {0}")]
    Request(#[from] serde_json::Error),
}

/// The early tree in two shapes: Graphviz source and its root-to-leaf rules.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeView {
    pub first_week: u32,
    pub last_week: u32,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub dot: String,
    pub paths: Vec<PathRule>,
}

pub struct DemoSession {
    bundle: ModelBundle,
    cohort: Cohort,
}

impl DemoSession {
    pub fn new(n_students: usize, seed: u64, rule_strength: f64) -> Result<DemoSession, DemoError> {
        let cfg = GeneratorConfig { n_students, seed, rule_strength, ..GeneratorConfig::default() };
        let generated = generate_cohort(&cfg).map_err(PipelineError::from)?;
        let raw = generated.features().map_err(PipelineError::from)?.matrix;
        let opts = TrainOptions { with_lr: false, ..TrainOptions::default() };
        let bundle = train_bundle(&raw, cfg.calendar(), &opts).map_err(|e| DemoError::Train(e.to_string()))?.bundle;
        let cohort = Cohort::new(&bundle, raw).map_err(|e| DemoError::Train(e.to_string()))?;
        Ok(DemoSession { bundle, cohort })
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn students(&self) -> Result<Vec<StudentRecord>, DemoError> {
        Ok(pipeline::predict(&self.bundle, &self.cohort, None, &RiskPolicy::default())?)
    }

    pub fn what_if(&self, student_id: &str, overrides: &BTreeMap<String, f64>) -> Result<WhatIf, DemoError> {
        let row = self.cohort.row(student_id)?;
        Ok(pipeline::what_if(&self.bundle, student_id, row, overrides)?)
    }

    /// `targets` is a comma-separated grade list such as `4,5`.
    pub fn plan(&self, student_id: &str, targets: &str, week: u32) -> Result<StrategyOutput, DemoError> {
        let targets = parse_targets(targets)?;
        Ok(pipeline::strategy(&self.bundle, &self.cohort, student_id, &targets, week)?)
    }

    pub fn tree(&self) -> TreeView {
        let e = &self.bundle.early_evaluation;
        TreeView {
            first_week: e.first_week,
            last_week: e.last_week,
            train_accuracy: e.train_accuracy,
            test_accuracy: e.test_accuracy,
            dot: self.bundle.tree_early.to_dot(),
            paths: extract_paths(&self.bundle.tree_early, DEFAULT_MIN_SUPPORT),
        }
    }
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(js_err)
}

#[wasm_bindgen]
pub struct Demo {
    session: DemoSession,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(n_students: usize, seed: u64, rule_strength: f64) -> Result<Demo, JsError> {
        Ok(Demo { session: DemoSession::new(n_students, seed, rule_strength).map_err(js_err)? })
    }

    /// JSON array of student records.
    pub fn students(&self) -> Result<String, JsError> {
        to_json(&self.session.students().map_err(js_err)?)
    }

    /// `overrides` is a JSON object from feature name to a value in [0, 1].
    #[wasm_bindgen(js_name = whatIf)]
    pub fn what_if(&self, student_id: &str, overrides: &str) -> Result<String, JsError> {
        let overrides: BTreeMap<String, f64> = serde_json::from_str(overrides).map_err(js_err)?;
        to_json(&self.session.what_if(student_id, &overrides).map_err(js_err)?)
    }

    pub fn plan(&self, student_id: &str, targets: &str, week: u32) -> Result<String, JsError> {
        to_json(&self.session.plan(student_id, targets, week).map_err(js_err)?)
    }

    pub fn tree(&self) -> Result<String, JsError> {
        to_json(&self.session.tree())
    }
}
