//! Seeded synthetic cohorts in the ingest file formats.
//!
//! Each student belongs to an archetype that fixes the final grade and the
//! interaction volume. Grades are tied to a handful of features through
//! threshold rules shaped like a small decision tree:
//!
//! * weeks 1–5: `Week5 MP2`, `Week4 Quiz2`, `Week3 Stat0`, `Week5 Stat0`
//! * weeks 5–8: `Week5 MP2`, `Week8 Quiz3`, `Week8 Stat0`
//!
//! A student's "rule class" is the grade those rules assign. It equals the
//! final grade with probability `rule_strength` and is another grade
//! otherwise. Feature values are drawn from axis-aligned boxes that sit
//! strictly inside the rule regions, so interpolating between two students
//! of the same rule class never leaves that class.

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};
use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::Path;
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::ingest::{
    assemble_features, bin_by_week, parse_grades_reader, parse_log_reader, write_grades_csv, ActivityCategory,
    AssembledFeatures, ColumnMapping, CourseCalendar, GradeRecord, IngestError,
};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Archetype {
    Dropout,
    Low2,
    Low3,
    High4,
    High5,
}

impl Archetype {
    pub const ALL: [Archetype; 5] =
        [Archetype::Dropout, Archetype::Low2, Archetype::Low3, Archetype::High4, Archetype::High5];
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Achiever group of a final grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GradeClass {
    Dropout,
    LowAchiever,
    HighAchiever,
}

impl GradeClass {
    pub const ALL: [GradeClass; 3] = [GradeClass::Dropout, GradeClass::LowAchiever, GradeClass::HighAchiever];

    pub fn of_grade(grade: u8) -> GradeClass {
        match grade {
            0 => GradeClass::Dropout,
            1..=3 => GradeClass::LowAchiever,
            _ => GradeClass::HighAchiever,
        }
    }
}

impl fmt::Display for GradeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradeClass::Dropout => "Dropout",
            GradeClass::LowAchiever => "Low",
            GradeClass::HighAchiever => "High",
        })
    }
}

/// Mean total interactions per achiever group that the defaults aim for.
pub const GROUP_TARGETS: [(GradeClass, f64); 3] =
    [(GradeClass::Dropout, 92.0), (GradeClass::LowAchiever, 273.0), (GradeClass::HighAchiever, 450.0)];

/// Uniform score on `[mean - spread, mean + spread]`, submitted with
/// probability `submit_prob` and missing otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreProfile {
    pub mean: f64,
    pub spread: f64,
    pub submit_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeParams {
    pub name: Archetype,
    pub final_grade: u8,
    pub proportion: f64,
    pub total_interaction_mean: f64,
    /// Coefficient of variation of the total interaction count.
    pub dispersion: f64,
    pub weekly_profile: Vec<f64>,
    pub category_mix: [f64; 4],
    pub mp: ScoreProfile,
    pub quiz: ScoreProfile,
    pub pr: ScoreProfile,
}

const ACTIVE_PROFILE: [f64; 9] = [0.07, 0.09, 0.11, 0.14, 0.17, 0.14, 0.11, 0.10, 0.07];
const DROPOUT_PROFILE: [f64; 9] = [0.35, 0.25, 0.15, 0.10, 0.06, 0.04, 0.03, 0.01, 0.01];
const CATEGORY_MIX: [f64; 4] = [0.45, 0.35, 0.12, 0.08];

impl ArchetypeParams {
    pub fn defaults() -> Vec<ArchetypeParams> {
        let score = |mean, spread, submit_prob| ScoreProfile { mean, spread, submit_prob };
        let active = |name, final_grade, proportion, mean, s: ScoreProfile| ArchetypeParams {
            name,
            final_grade,
            proportion,
            total_interaction_mean: mean,
            dispersion: 0.25,
            weekly_profile: ACTIVE_PROFILE.to_vec(),
            category_mix: CATEGORY_MIX,
            mp: s,
            quiz: s,
            pr: s,
        };
        vec![
            ArchetypeParams {
                name: Archetype::Dropout,
                final_grade: 0,
                proportion: 0.30,
                total_interaction_mean: 92.0,
                dispersion: 0.25,
                weekly_profile: DROPOUT_PROFILE.to_vec(),
                category_mix: CATEGORY_MIX,
                // only used for the early submissions of some dropouts
                mp: score(0.45, 0.25, 1.0),
                quiz: score(0.45, 0.25, 1.0),
                pr: score(0.45, 0.25, 1.0),
            },
            active(Archetype::Low2, 2, 0.15, 240.0, score(0.55, 0.2, 0.9)),
            active(Archetype::Low3, 3, 0.20, 300.0, score(0.65, 0.2, 0.95)),
            active(Archetype::High4, 4, 0.20, 490.0, score(0.82, 0.15, 1.0)),
            active(Archetype::High5, 5, 0.15, 400.0, score(0.9, 0.1, 1.0)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_students: usize,
    pub seed: u64,
    pub rule_strength: f64,
    /// Share of dropouts that hand in some early assignments.
    pub dropout_submit_rate: f64,
    pub course_start: NaiveDate,
    pub archetypes: Vec<ArchetypeParams>,
}

pub fn default_course_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 6).unwrap()
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_students: 107,
            seed: 42,
            rule_strength: 0.9,
            dropout_submit_rate: 0.27,
            course_start: default_course_start(),
            archetypes: ArchetypeParams::defaults(),
        }
    }
}

impl GeneratorConfig {
    pub fn calendar(&self) -> CourseCalendar {
        CourseCalendar::with_start(self.course_start)
    }

    // negated comparisons so that NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), CohortError> {
        let bad = |m: String| Err(CohortError::InvalidConfig(m));
        if self.n_students < 5 {
            return bad(format!("n_students must be at least 5, got {}", self.n_students));
        }
        if !(0.0..=1.0).contains(&self.rule_strength) {
            return bad(format!("rule_strength must be in [0, 1], got {}", self.rule_strength));
        }
        if !(0.0..=1.0).contains(&self.dropout_submit_rate) {
            return bad("dropout_submit_rate must be in [0, 1]".into());
        }
        let mut names: Vec<Archetype> = self.archetypes.iter().map(|a| a.name).collect();
        names.sort();
        if names != Archetype::ALL {
            return bad("exactly one parameter set per archetype is required".into());
        }
        let total: f64 = self.archetypes.iter().map(|a| a.proportion).sum();
        if (total - 1.0).abs() > 1e-9 || self.archetypes.iter().any(|a| !(a.proportion >= 0.0)) {
            return bad(format!("archetype proportions must be non-negative and sum to 1, got {total}"));
        }
        let n_weeks = self.calendar().n_weeks as usize;
        for a in &self.archetypes {
            let normalized = |w: &[f64]| w.iter().all(|x| *x >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() < 1e-9;
            if a.weekly_profile.len() != n_weeks || !normalized(&a.weekly_profile) {
                return bad(format!("{}: weekly_profile needs {n_weeks} non-negative weights summing to 1", a.name));
            }
            if !normalized(&a.category_mix) {
                return bad(format!("{}: category_mix must sum to 1", a.name));
            }
            if !(a.total_interaction_mean > 0.0) || !(a.dispersion > 0.0) {
                return bad(format!("{}: interaction mean and dispersion must be positive", a.name));
            }
            for s in [a.mp, a.quiz, a.pr] {
                if !(0.0..=1.0).contains(&s.mean) || !(0.0..=1.0).contains(&s.submit_prob) || s.spread < 0.0 {
                    return bad(format!("{}: score means and submit probabilities must lie in [0, 1]", a.name));
                }
            }
            if a.final_grade > 5 || a.final_grade == 1 {
                return bad(format!("{}: final grade must be one of 0, 2, 3, 4, 5", a.name));
            }
        }
        Ok(())
    }
}

/// Reference counts for the rule cells. Each is the cohort maximum of its
/// cell, so after normalization a rule threshold `t` means `t * reference`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleReferences {
    pub week3_stat0: u32,
    pub week5_stat0: u32,
    pub week8_stat0: u32,
}

pub const RULE_REFERENCES: RuleReferences = RuleReferences { week3_stat0: 30, week5_stat0: 40, week8_stat0: 25 };

/// Inputs to the embedded rules, as fractions of the rule references for
/// counts and fractions of the maximum score for grades.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleInputs {
    pub week5_mp2: f64,
    pub week4_quiz2: f64,
    pub week8_quiz3: f64,
    pub week3_stat0: f64,
    pub week5_stat0: f64,
    pub week8_stat0: f64,
}

/// Grade assigned by the weeks 1–5 rules.
pub fn early_rule_class(x: &RuleInputs) -> u8 {
    if x.week5_mp2 < 0.2 {
        0
    } else if x.week5_mp2 >= 0.83 {
        if x.week4_quiz2 >= 0.9 {
            5
        } else {
            4
        }
    } else if x.week3_stat0 >= 0.41 || x.week5_stat0 >= 0.46 {
        3
    } else {
        2
    }
}

/// Grade assigned by the weeks 5–8 rules.
pub fn late_rule_class(x: &RuleInputs) -> u8 {
    if x.week5_mp2 < 0.2 {
        0
    } else if x.week5_mp2 >= 0.83 {
        if x.week8_quiz3 >= 0.9 {
            5
        } else {
            4
        }
    } else if x.week8_stat0 >= 0.62 {
        3
    } else {
        2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentManifest {
    pub student_id: String,
    pub archetype: Archetype,
    pub final_grade: u8,
    pub rule_class: u8,
    pub total_interactions: u64,
    /// Interactions per week, all four categories together.
    pub weekly_interactions: Vec<u64>,
    pub week3_stat0: u32,
    pub week5_stat0: u32,
    pub week8_stat0: u32,
    pub mp: [Option<f64>; 3],
    pub quiz: [Option<f64>; 3],
    pub pr: [Option<f64>; 3],
}

impl StudentManifest {
    pub fn rule_inputs(&self, refs: &RuleReferences) -> RuleInputs {
        RuleInputs {
            week5_mp2: self.mp[1].unwrap_or(0.0),
            week4_quiz2: self.quiz[1].unwrap_or(0.0),
            week8_quiz3: self.quiz[2].unwrap_or(0.0),
            week3_stat0: self.week3_stat0 as f64 / refs.week3_stat0 as f64,
            week5_stat0: self.week5_stat0 as f64 / refs.week5_stat0 as f64,
            week8_stat0: self.week8_stat0 as f64 / refs.week8_stat0 as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: GeneratorConfig,
    pub references: RuleReferences,
    pub allocation: BTreeMap<Archetype, usize>,
    pub students: Vec<StudentManifest>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCohort {
    pub logs_csv: String,
    pub grades_csv: String,
    pub manifest: Manifest,
}

impl GeneratedCohort {
    /// Runs the generated files through ingest, giving the raw feature
    /// matrix exactly as `parse -> bin -> assemble` would from disk.
    pub fn features(&self) -> Result<AssembledFeatures, CohortError> {
        let calendar = self.manifest.config.calendar();
        let log = parse_log_reader(self.logs_csv.as_bytes(), &calendar, &ColumnMapping::default())?;
        let grades = parse_grades_reader(self.grades_csv.as_bytes())?;
        Ok(assemble_features(&bin_by_week(&log.events, &calendar), &grades, &calendar)?)
    }

    /// Writes `logs.csv`, `grades.csv`, `manifest.json` and `calendar.cfg`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), CohortError> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("logs.csv"), self.logs_csv.as_bytes())?;
        write_atomic(&dir.join("grades.csv"), self.grades_csv.as_bytes())?;
        let mut json = serde_json::to_string_pretty(&self.manifest)?;
        json.push('\n');
        write_atomic(&dir.join("manifest.json"), json.as_bytes())?;
        write_atomic(&dir.join("calendar.cfg"), self.manifest.config.calendar().to_key_values().as_bytes())?;
        Ok(())
    }
}

/// Largest-remainder allocation of `n` students over `proportions`; ties in
/// the remainder go to the earlier entry.
pub fn allocate(n: usize, proportions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let missing = n.saturating_sub(counts.iter().sum());
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Latin-hypercube draw of `m` totals from a gamma law with the given mean
/// and coefficient of variation. Sample means land close to `mean`.
fn lhs_totals(rng: &mut ChaCha8Rng, m: usize, mean: f64, cv: f64) -> Vec<u64> {
    let shape = 1.0 / (cv * cv);
    let gamma = Gamma::new(shape, shape / mean).expect("validated gamma parameters");
    let mut strata: Vec<usize> = (0..m).collect();
    strata.shuffle(rng);
    strata
        .into_iter()
        .map(|s| {
            let u = (s as f64 + rng.random::<f64>()) / m as f64;
            gamma.inverse_cdf(u.clamp(1e-12, 1.0 - 1e-12)).round().max(1.0) as u64
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Score inside `[lo, hi]`, rounded to two decimals. The bounds are already
/// two-decimal numbers, so rounding stays inside.
fn score_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    round2(uniform(rng, lo, hi)).clamp(lo, hi)
}

fn count_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64, reference: u32) -> u32 {
    let lo = (lo * reference as f64).ceil() as u32;
    let hi = ((hi * reference as f64).floor() as u32).max(lo);
    rng.random_range(lo..=hi)
}

fn draw_score(rng: &mut ChaCha8Rng, p: &ScoreProfile) -> Option<f64> {
    if rng.random::<f64>() >= p.submit_prob {
        return None;
    }
    let lo = round2((p.mean - p.spread).clamp(0.0, 1.0));
    let hi = round2((p.mean + p.spread).clamp(0.0, 1.0));
    Some(score_in(rng, lo, hi))
}

/// Rule-cell fraction boxes `(week3, week5, week8)` by rule class.
fn stat0_boxes(rule_class: u8) -> [(f64, f64); 3] {
    match rule_class {
        0 => [(0.0, 0.3), (0.0, 0.2), (0.0, 0.1)],
        2 => [(0.05, 0.36), (0.05, 0.41), (0.1, 0.57)],
        3 => [(0.05, 0.95), (0.51, 1.0), (0.67, 1.0)],
        _ => [(0.3, 1.0), (0.4, 1.0), (0.4, 1.0)],
    }
}

struct Draft {
    archetype: Archetype,
    final_grade: u8,
    rule_class: u8,
    total: u64,
    rule_cells: [u32; 3],
    mp: [Option<f64>; 3],
    quiz: [Option<f64>; 3],
    pr: [Option<f64>; 3],
}

fn draw_grades(rng: &mut ChaCha8Rng, a: &ArchetypeParams, submits: bool, rule_class: u8) -> [[Option<f64>; 3]; 3] {
    let mut mp = [None; 3];
    let mut quiz = [None; 3];
    let mut pr = [None; 3];
    if a.name == Archetype::Dropout {
        // dropouts that submit anything hand in the first round only
        if submits {
            mp[0] = draw_score(rng, &a.mp);
            quiz[0] = draw_score(rng, &a.quiz);
            pr[0] = draw_score(rng, &a.pr);
        }
    } else {
        for j in 0..3 {
            mp[j] = draw_score(rng, &a.mp);
            quiz[j] = draw_score(rng, &a.quiz);
            pr[j] = draw_score(rng, &a.pr);
        }
    }
    // rule features follow the rule class, whatever the archetype
    mp[1] = match rule_class {
        0 => (rng.random::<f64>() < 0.3).then(|| score_in(rng, 0.02, 0.15)),
        2 | 3 => Some(score_in(rng, 0.3, 0.78)),
        _ => Some(score_in(rng, 0.88, 1.0)),
    };
    for j in [1, 2] {
        match rule_class {
            4 => quiz[j] = Some(score_in(rng, 0.5, 0.85)),
            5 => quiz[j] = Some(score_in(rng, 0.93, 1.0)),
            _ => {}
        }
    }
    [mp, quiz, pr]
}

/// Generates a cohort. Identical configurations give byte-identical output.
pub fn generate_cohort(cfg: &GeneratorConfig) -> Result<GeneratedCohort, CohortError> {
    cfg.validate()?;
    let calendar = cfg.calendar();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = cfg.archetypes.clone();
    params.sort_by_key(|a| a.name);
    let counts = allocate(cfg.n_students, &params.iter().map(|a| a.proportion).collect::<Vec<_>>());
    let grades_present: Vec<u8> = {
        let mut g: Vec<u8> = params.iter().map(|a| a.final_grade).collect();
        g.sort_unstable();
        g.dedup();
        g
    };
    let refs = RULE_REFERENCES;
    let ref_cells = [refs.week3_stat0, refs.week5_stat0, refs.week8_stat0];

    let mut drafts = Vec::with_capacity(cfg.n_students);
    for (a, &m) in params.iter().zip(&counts) {
        let totals = lhs_totals(&mut rng, m, a.total_interaction_mean, a.dispersion);
        let n_submit = (cfg.dropout_submit_rate * m as f64).round() as usize;
        for (i, total) in totals.into_iter().enumerate() {
            let rule_class = if rng.random::<f64>() < cfg.rule_strength || grades_present.len() < 2 {
                a.final_grade
            } else {
                let others: Vec<u8> = grades_present.iter().copied().filter(|&g| g != a.final_grade).collect();
                others[rng.random_range(0..others.len())]
            };
            let boxes = stat0_boxes(rule_class);
            let mut rule_cells = [0u32; 3];
            for c in 0..3 {
                rule_cells[c] = count_in(&mut rng, boxes[c].0, boxes[c].1, ref_cells[c]);
            }
            let [mp, quiz, pr] = draw_grades(&mut rng, a, i < n_submit, rule_class);
            drafts.push(Draft {
                archetype: a.name,
                final_grade: a.final_grade,
                rule_class,
                total,
                rule_cells,
                mp,
                quiz,
                pr,
            });
        }
    }
    // pin each rule cell's cohort maximum to its reference, using a student
    // whose box reaches the top
    for (c, &reference) in ref_cells.iter().enumerate() {
        let top = drafts
            .iter()
            .enumerate()
            .filter(|(_, d)| stat0_boxes(d.rule_class)[c].1 >= 1.0)
            .max_by_key(|(i, d)| (d.rule_cells[c], std::cmp::Reverse(*i)))
            .map(|(i, _)| i);
        if let Some(i) = top {
            drafts[i].rule_cells[c] = reference;
        }
    }
    drafts.shuffle(&mut rng);

    let rule_weeks = [3usize, 5, 8];
    let n_weeks = calendar.n_weeks as usize;
    let start = calendar.start_instant();
    let mut events: Vec<(i64, String, &'static str)> = Vec::new();
    let mut students = Vec::with_capacity(drafts.len());
    let mut grade_rows = Vec::with_capacity(drafts.len());
    let width = cfg.n_students.to_string().len().max(3);
    for (idx, d) in drafts.iter().enumerate() {
        let id = format!("s{:0width$}", idx + 1);
        let a = params.iter().find(|p| p.name == d.archetype).unwrap();
        // counts per (week, category); rule cells are fixed, the rest is
        // spread over the other cells by the archetype's profile
        let mut cells = vec![[0u64; 4]; n_weeks];
        let fixed: u64 = d.rule_cells.iter().map(|&c| c as u64).sum();
        let mut remaining = d.total.saturating_sub(fixed);
        let mut weights: Vec<(usize, usize, f64)> = Vec::new();
        for (w, pw) in a.weekly_profile.iter().enumerate() {
            for (k, pk) in a.category_mix.iter().enumerate() {
                if k == 0 && rule_weeks.contains(&(w + 1)) {
                    continue;
                }
                weights.push((w, k, pw * pk));
            }
        }
        let mut mass: f64 = weights.iter().map(|x| x.2).sum();
        for (pos, &(w, k, p)) in weights.iter().enumerate() {
            let n = if pos + 1 == weights.len() || mass <= 0.0 {
                remaining
            } else {
                Binomial::new(remaining, (p / mass).clamp(0.0, 1.0)).unwrap().sample(&mut rng)
            };
            cells[w][k] = n;
            remaining -= n;
            mass -= p;
        }
        for (c, &week) in rule_weeks.iter().enumerate() {
            cells[week - 1][0] = d.rule_cells[c] as u64;
        }
        for (w, row) in cells.iter().enumerate() {
            for (k, &n) in row.iter().enumerate() {
                let names = ActivityCategory::STATS[k].event_names();
                for _ in 0..n {
                    let offset = w as i64 * 7 * 86_400 + rng.random_range(0..7 * 86_400);
                    events.push((offset, id.clone(), names[rng.random_range(0..names.len())]));
                }
            }
        }
        let weekly: Vec<u64> = cells.iter().map(|r| r.iter().sum()).collect();
        students.push(StudentManifest {
            student_id: id.clone(),
            archetype: d.archetype,
            final_grade: d.final_grade,
            rule_class: d.rule_class,
            total_interactions: weekly.iter().sum(),
            weekly_interactions: weekly,
            week3_stat0: d.rule_cells[0],
            week5_stat0: d.rule_cells[1],
            week8_stat0: d.rule_cells[2],
            mp: d.mp,
            quiz: d.quiz,
            pr: d.pr,
        });
        grade_rows.push(GradeRecord {
            student_id: id,
            mp: d.mp,
            quiz: d.quiz,
            pr: d.pr,
            final_grade: Some(d.final_grade),
        });
    }
    events.sort();

    let mut logs = csv::Writer::from_writer(Vec::new());
    logs.write_record(["student_id", "timestamp", "event_name"]).map_err(IngestError::from)?;
    for (offset, id, name) in &events {
        let ts = (start + Duration::seconds(*offset)).format("%Y-%m-%dT%H:%M:%SZ").to_string();
        logs.write_record([id.as_str(), ts.as_str(), name]).map_err(IngestError::from)?;
    }
    let logs_csv = String::from_utf8(logs.into_inner().map_err(|e| io::Error::other(e.to_string()))?)
        .expect("csv output is utf-8");
    let mut grades = Vec::new();
    write_grades_csv(&grade_rows, &mut grades)?;
    let grades_csv = String::from_utf8(grades).expect("csv output is utf-8");

    let allocation = params.iter().zip(&counts).map(|(a, &c)| (a.name, c)).collect();
    Ok(GeneratedCohort {
        logs_csv,
        grades_csv,
        manifest: Manifest { config: cfg.clone(), references: refs, allocation, students },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationLine {
    pub name: String,
    pub members: usize,
    pub target_mean: f64,
    /// `None` when the group has no members.
    pub realized_mean: Option<f64>,
    pub relative_deviation: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub archetypes: Vec<CalibrationLine>,
    pub groups: Vec<CalibrationLine>,
    /// Mean interactions per course week over the whole cohort.
    pub weekly_curve: Vec<f64>,
}

impl CalibrationReport {
    pub fn flagged(&self) -> impl Iterator<Item = &CalibrationLine> {
        self.archetypes.iter().chain(&self.groups).filter(|l| l.flagged)
    }
}

pub const CALIBRATION_TOLERANCE: f64 = 0.10;

fn calibration_line(name: String, target: f64, totals: &[u64]) -> CalibrationLine {
    let realized = (!totals.is_empty()).then(|| totals.iter().sum::<u64>() as f64 / totals.len() as f64);
    let deviation = realized.map(|r| (r - target) / target);
    CalibrationLine {
        name,
        members: totals.len(),
        target_mean: target,
        realized_mean: realized,
        relative_deviation: deviation,
        flagged: deviation.is_some_and(|d| d.abs() > CALIBRATION_TOLERANCE),
    }
}

/// Realized interaction means per archetype and achiever group against
/// their targets. Deviations above 10% are flagged; empty groups are
/// reported without a mean.
pub fn summarize_manifest(manifest: &Manifest) -> CalibrationReport {
    let totals_where = |pred: &dyn Fn(&StudentManifest) -> bool| -> Vec<u64> {
        manifest.students.iter().filter(|s| pred(s)).map(|s| s.total_interactions).collect()
    };
    let mut params = manifest.config.archetypes.clone();
    params.sort_by_key(|a| a.name);
    let archetypes = params
        .iter()
        .map(|a| {
            calibration_line(a.name.to_string(), a.total_interaction_mean, &totals_where(&|s| s.archetype == a.name))
        })
        .collect();
    let groups = GROUP_TARGETS
        .iter()
        .map(|&(g, target)| {
            calibration_line(g.to_string(), target, &totals_where(&|s| GradeClass::of_grade(s.final_grade) == g))
        })
        .collect();
    let n_weeks = manifest.students.first().map_or(0, |s| s.weekly_interactions.len());
    let n = manifest.students.len().max(1) as f64;
    let weekly_curve = (0..n_weeks)
        .map(|w| manifest.students.iter().map(|s| s.weekly_interactions[w]).sum::<u64>() as f64 / n)
        .collect();
    CalibrationReport { archetypes, groups, weekly_curve }
}
