//! Multinomial (softmax) logistic regression.
//!
//! Training minimizes the mean negative log-likelihood plus
//! `(l2_lambda / 2) * ||W||^2` (bias unpenalized) with L-BFGS and a
//! backtracking Armijo line search, starting from all-zero parameters.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

use crate::ingest::{FeatureMatrix, IngestError};

#[derive(Debug, Error)]
pub enum LinModelError {
    #[error("training labels contain a single class ({0})")]
    SingleClass(u8),
    #[error("training set has no rows")]
    Empty,
    #[error("training set has no features")]
    NoFeatures,
    #[error("non-finite loss during optimization")]
    NonFiniteLoss,
    #[error("expected {expected} feature values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] IngestError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrConfig {
    pub l2_lambda: f64,
    /// Convergence threshold on the gradient max-norm.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig { l2_lambda: 1e-4, tol: 1e-6, max_iters: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxModel {
    /// Grade labels, ascending.
    pub classes: Vec<u8>,
    /// `weights[c][j]` for class `classes[c]` and feature `feature_names[j]`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub feature_names: Vec<String>,
    pub l2_lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    /// Mean negative log-likelihood at the solution (no penalty term).
    pub final_nll: f64,
    /// Penalized objective at the solution.
    pub final_objective: f64,
    /// Max-norm of the objective gradient at the solution.
    pub final_gradient_norm: f64,
    pub converged: bool,
    /// Objective value after each accepted step, starting at the zero init.
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

impl SoftmaxModel {
    /// Model with all parameters zero.
    pub fn zeros(classes: Vec<u8>, feature_names: Vec<String>, l2_lambda: f64) -> Self {
        let (c, f) = (classes.len(), feature_names.len());
        SoftmaxModel { classes, weights: vec![vec![0.0; f]; c], bias: vec![0.0; c], feature_names, l2_lambda }
    }

    fn check_row(&self, row: &[f64]) -> Result<(), LinModelError> {
        if row.len() != self.feature_names.len() {
            return Err(LinModelError::DimensionMismatch { expected: self.feature_names.len(), got: row.len() });
        }
        Ok(())
    }

    pub fn logits(&self, row: &[f64]) -> Result<Vec<f64>, LinModelError> {
        self.check_row(row)?;
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(row).map(|(wi, xi)| wi * xi).sum::<f64>())
            .collect())
    }

    pub fn predict_proba(&self, row: &[f64]) -> Result<Vec<f64>, LinModelError> {
        Ok(softmax(&self.logits(row)?))
    }

    /// Most probable class; ties go to the lower grade label.
    pub fn predict_class(&self, row: &[f64]) -> Result<u8, LinModelError> {
        let p = self.predict_proba(row)?;
        Ok(self.classes[argmax_first(&p)])
    }

    pub fn predict_matrix(&self, m: &FeatureMatrix) -> Result<Vec<u8>, LinModelError> {
        m.rows.iter().map(|r| self.predict_class(r)).collect()
    }

    fn params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.weights.iter().flatten().copied().collect();
        p.extend_from_slice(&self.bias);
        p
    }

    fn set_params(&mut self, p: &[f64]) {
        let f = self.feature_names.len();
        for (c, w) in self.weights.iter_mut().enumerate() {
            w.copy_from_slice(&p[c * f..(c + 1) * f]);
        }
        let off = self.weights.len() * f;
        self.bias.copy_from_slice(&p[off..]);
    }
}

/// Index of the first maximal entry.
pub(crate) fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Penalized mean NLL over a fixed data set, as a function of the flat
/// parameter vector `[W (row-major, classes x features), b]`.
pub struct SoftmaxObjective<'a> {
    rows: Vec<&'a [f64]>,
    targets: Vec<usize>,
    n_classes: usize,
    n_features: usize,
    l2_lambda: f64,
}

impl<'a> SoftmaxObjective<'a> {
    pub fn new(rows: Vec<&'a [f64]>, targets: Vec<usize>, n_classes: usize, n_features: usize, l2_lambda: f64) -> Self {
        SoftmaxObjective { rows, targets, n_classes, n_features, l2_lambda }
    }

    pub fn n_params(&self) -> usize {
        self.n_classes * (self.n_features + 1)
    }

    fn logits(&self, params: &[f64], row: &[f64], out: &mut [f64]) {
        let f = self.n_features;
        let bias = &params[self.n_classes * f..];
        for (c, z) in out.iter_mut().enumerate() {
            let w = &params[c * f..(c + 1) * f];
            *z = bias[c] + w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    fn penalty(&self, params: &[f64]) -> f64 {
        let w = &params[..self.n_classes * self.n_features];
        0.5 * self.l2_lambda * w.iter().map(|x| x * x).sum::<f64>()
    }

    /// Mean negative log-likelihood without the penalty.
    pub fn nll(&self, params: &[f64]) -> f64 {
        let mut z = vec![0.0; self.n_classes];
        let total: f64 = self
            .rows
            .iter()
            .zip(&self.targets)
            .map(|(row, &t)| {
                self.logits(params, row, &mut z);
                log_sum_exp(&z) - z[t]
            })
            .sum();
        total / self.rows.len() as f64
    }

    pub fn value(&self, params: &[f64]) -> f64 {
        self.nll(params) + self.penalty(params)
    }

    pub fn value_and_gradient(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let (c_n, f) = (self.n_classes, self.n_features);
        let n = self.rows.len() as f64;
        let mut grad = vec![0.0; self.n_params()];
        let mut z = vec![0.0; c_n];
        let mut total = 0.0;
        for (row, &t) in self.rows.iter().zip(&self.targets) {
            self.logits(params, row, &mut z);
            total += log_sum_exp(&z) - z[t];
            let p = softmax(&z);
            for c in 0..c_n {
                let r = (p[c] - if c == t { 1.0 } else { 0.0 }) / n;
                for (g, x) in grad[c * f..(c + 1) * f].iter_mut().zip(row.iter()) {
                    *g += r * x;
                }
                grad[c_n * f + c] += r;
            }
        }
        for (g, w) in grad[..c_n * f].iter_mut().zip(&params[..c_n * f]) {
            *g += self.l2_lambda * w;
        }
        (total / n + self.penalty(params), grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

const LBFGS_MEMORY: usize = 10;

/// Fits a softmax model on every labeled row of `train`.
///
/// Rows are put into a canonical order first, so any permutation of the
/// same training set produces bit-identical parameters.
pub fn fit_logreg(train: &FeatureMatrix, cfg: &LrConfig) -> Result<(SoftmaxModel, FitReport), LinModelError> {
    if !(cfg.l2_lambda >= 0.0 && cfg.tol > 0.0) {
        return Err(LinModelError::InvalidConfig("l2_lambda must be >= 0 and tol > 0".into()));
    }
    let labels = train.require_labels()?;
    if labels.is_empty() {
        return Err(LinModelError::Empty);
    }
    if train.n_features() == 0 {
        return Err(LinModelError::NoFeatures);
    }
    let classes = train.classes();
    if classes.len() < 2 {
        return Err(LinModelError::SingleClass(classes[0]));
    }

    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| {
        labels[a].cmp(&labels[b]).then_with(|| {
            train.rows[a]
                .iter()
                .zip(&train.rows[b])
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let rows: Vec<&[f64]> = order.iter().map(|&i| train.rows[i].as_slice()).collect();
    let targets: Vec<usize> =
        order.iter().map(|&i| classes.binary_search(&labels[i]).expect("label among classes")).collect();
    let obj = SoftmaxObjective::new(rows, targets, classes.len(), train.n_features(), cfg.l2_lambda);

    let mut model = SoftmaxModel::zeros(classes, train.feature_names.clone(), cfg.l2_lambda);
    let mut x = model.params();
    let (mut fx, mut g) = obj.value_and_gradient(&x);
    let mut trace = vec![fx];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut converged = max_norm(&g) <= cfg.tol;

    while !converged && iterations < cfg.max_iters {
        // two-loop recursion for the search direction
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = match history.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / max_norm(&g).max(1.0),
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.into_iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-20 {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let fc = obj.value(&cand);
            if !fc.is_finite() {
                return Err(LinModelError::NonFiniteLoss);
            }
            if fc <= fx + 1e-4 * step * slope {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, _)) = accepted else { break };
        let (f_new, g_new) = obj.value_and_gradient(&x_new);
        if !f_new.is_finite() {
            return Err(LinModelError::NonFiniteLoss);
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if history.len() == LBFGS_MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let stalled = fx - f_new <= f64::EPSILON * fx.abs();
        x = x_new;
        fx = f_new;
        g = g_new;
        trace.push(fx);
        iterations += 1;
        converged = max_norm(&g) <= cfg.tol;
        if stalled && !converged && history.is_empty() {
            break;
        }
    }

    model.set_params(&x);
    let report = FitReport {
        iterations,
        final_nll: obj.nll(&x),
        final_objective: fx,
        final_gradient_norm: max_norm(&g),
        converged,
        objective_trace: trace,
    };
    if !converged {
        log::warn!(
            "logistic regression stopped after {iterations} iterations, gradient max-norm {:.3e}",
            report.final_gradient_norm
        );
    }
    Ok((model, report))
}
