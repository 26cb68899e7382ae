//! Activity-log and grade-book ingestion.
//!
//! Log exports are parsed into [`LogEvent`]s, binned into course weeks per
//! [`ActivityCategory`], and joined with grade records into a
//! [`FeatureMatrix`] whose columns follow the `Week{n} Stat{k}` /
//! `Week{n} MP{j}` naming scheme.

mod calendar;
mod features;
mod taxonomy;

pub use calendar::{CourseCalendar, ASSIGNMENTS_PER_KIND};
pub use features::{
    feature_week, normalize_features, read_features_csv, select_weeks, select_window, write_features_csv,
    AssignmentKind, FeatureColumn, FeatureKind, FeatureMatrix, FeatureSubset, Normalizer,
};
pub use taxonomy::{categorize_event, ActivityCategory};

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;
use thiserror::Error;

use crate::config::parse_key_values;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("input file is empty")]
    EmptyFile,
    #[error("malformed CSV at line {line}: {message}")]
    MalformedCsv { line: usize, message: String },
    #[error("line {line}: cannot parse timestamp {value:?}")]
    BadTimestamp { line: usize, value: String },
    #[error("line {line}: bad value {value:?} in column {column}")]
    BadValue { line: usize, column: String, value: String },
    #[error("student {0:?} appears more than once in the grades file")]
    DuplicateStudent(String),
    #[error("invalid calendar: {0}")]
    InvalidCalendar(String),
    #[error("invalid column mapping: {0}")]
    InvalidMapping(String),
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("weeks {first_week}..={last_week} outside the available 1..={max_week}")]
    InvalidWindow { first_week: u32, last_week: u32, max_week: u32 },
    #[error("no {subset} features in weeks {first_week}..={last_week}")]
    EmptyFeatureSet { first_week: u32, last_week: u32, subset: FeatureSubset },
    #[error("student {0:?} has no final grade")]
    Unlabeled(String),
    #[error("inconsistent feature matrix: {0}")]
    Shape(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for IngestError {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        match e.into_kind() {
            csv::ErrorKind::Io(io) => IngestError::Io(io),
            other => IngestError::MalformedCsv { line, message: format!("{other:?}") },
        }
    }
}

/// One logged student interaction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEvent {
    pub student_id: String,
    pub timestamp: DateTime<Utc>,
    pub event_name: String,
    pub category: ActivityCategory,
}

/// Where the canonical log fields live in a source export.
///
/// The canonical schema is `student_id,timestamp,event_name` with RFC 3339
/// timestamps. Real Moodle exports use other headers and a local time
/// format, e.g.
///
/// ```text
/// student_id = User full name
/// timestamp = Time
/// event_name = Event name
/// timestamp_format = %d/%m/%y, %H:%M
/// ```
///
/// A `timestamp_format` without a zone is read as UTC.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMapping {
    pub student_id: String,
    pub timestamp: String,
    pub event_name: String,
    pub timestamp_format: Option<String>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            student_id: "student_id".into(),
            timestamp: "timestamp".into(),
            event_name: "event_name".into(),
            timestamp_format: None,
        }
    }
}

impl ColumnMapping {
    pub fn from_key_values(text: &str) -> Result<Self, IngestError> {
        let kv = parse_key_values(text).map_err(|e| IngestError::InvalidMapping(e.to_string()))?;
        let mut m = ColumnMapping::default();
        for (k, v) in kv {
            match k.as_str() {
                "student_id" => m.student_id = v,
                "timestamp" => m.timestamp = v,
                "event_name" => m.event_name = v,
                "timestamp_format" => m.timestamp_format = Some(v),
                other => return Err(IngestError::InvalidMapping(format!("unknown key {other:?}"))),
            }
        }
        Ok(m)
    }

    fn is_canonical(&self) -> bool {
        self.student_id == "student_id" && self.timestamp == "timestamp" && self.event_name == "event_name"
    }

    fn parse_timestamp(&self, raw: &str) -> Option<DateTime<Utc>> {
        let raw = raw.trim();
        match &self.timestamp_format {
            None => DateTime::parse_from_rfc3339(raw).ok().map(|t| t.with_timezone(&Utc)),
            Some(fmt) => DateTime::parse_from_str(raw, fmt)
                .map(|t| t.with_timezone(&Utc))
                .ok()
                .or_else(|| NaiveDateTime::parse_from_str(raw, fmt).ok().map(|t| t.and_utc())),
        }
    }
}

/// Result of parsing a log export.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedLog {
    pub events: Vec<LogEvent>,
    /// Rows whose timestamp fell outside the course window.
    pub dropped_outside_window: usize,
}

impl ParsedLog {
    pub fn other_events(&self) -> usize {
        self.events.iter().filter(|e| e.category == ActivityCategory::Other).count()
    }
}

pub fn parse_log_csv(path: &Path, calendar: &CourseCalendar) -> Result<ParsedLog, IngestError> {
    parse_log_reader(BufReader::new(File::open(path)?), calendar, &ColumnMapping::default())
}

pub fn parse_log_reader<R: Read>(
    mut input: R,
    calendar: &CourseCalendar,
    mapping: &ColumnMapping,
) -> Result<ParsedLog, IngestError> {
    calendar.validate()?;
    let mut text = Vec::new();
    input.read_to_end(&mut text)?;
    if text.iter().all(u8::is_ascii_whitespace) {
        return Err(IngestError::EmptyFile);
    }
    let mut r = csv::ReaderBuilder::new().from_reader(&text[..]);
    let header = r.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| IngestError::MalformedCsv { line: 1, message: format!("missing column {name:?}") })
    };
    if mapping.is_canonical() && header.iter().map(str::trim).ne(["student_id", "timestamp", "event_name"]) {
        return Err(IngestError::MalformedCsv {
            line: 1,
            message: "expected header `student_id,timestamp,event_name`".into(),
        });
    }
    let (ci, ct, ce) = (col(&mapping.student_id)?, col(&mapping.timestamp)?, col(&mapping.event_name)?);

    let mut out = ParsedLog::default();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let student_id = rec[ci].trim();
        let event_name = rec[ce].trim();
        if student_id.is_empty() || event_name.is_empty() {
            return Err(IngestError::MalformedCsv { line, message: "empty student id or event name".into() });
        }
        let timestamp = mapping
            .parse_timestamp(&rec[ct])
            .ok_or_else(|| IngestError::BadTimestamp { line, value: rec[ct].to_string() })?;
        if calendar.week_of(timestamp).is_none() {
            out.dropped_outside_window += 1;
            continue;
        }
        out.events.push(LogEvent {
            student_id: student_id.to_string(),
            timestamp,
            event_name: event_name.to_string(),
            category: categorize_event(event_name),
        });
    }
    Ok(out)
}

/// Per-week category counts of one student.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentActivity {
    /// `weeks[w - 1][k]` counts `Stat{k}` events in week `w`.
    pub weeks: Vec<[u32; 4]>,
    pub other: u32,
}

impl StudentActivity {
    pub fn new(n_weeks: u32) -> Self {
        StudentActivity { weeks: vec![[0; 4]; n_weeks as usize], other: 0 }
    }

    /// Categorized interactions (excludes `Other`).
    pub fn total(&self) -> u64 {
        self.weeks.iter().flatten().map(|&c| c as u64).sum()
    }
}

pub type WeeklyCounts = BTreeMap<String, StudentActivity>;

/// Counts events per student, week and category. Events outside the
/// course window are ignored.
pub fn bin_by_week(events: &[LogEvent], calendar: &CourseCalendar) -> WeeklyCounts {
    let mut out = WeeklyCounts::new();
    for e in events {
        let Some(week) = calendar.week_of(e.timestamp) else { continue };
        let entry = out.entry(e.student_id.clone()).or_insert_with(|| StudentActivity::new(calendar.n_weeks));
        match e.category.stat_index() {
            Some(k) => entry.weeks[week as usize - 1][k] += 1,
            None => entry.other += 1,
        }
    }
    out
}

/// One row of the grades file. Scores are fractions of the maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub student_id: String,
    pub mp: [Option<f64>; 3],
    pub quiz: [Option<f64>; 3],
    pub pr: [Option<f64>; 3],
    /// Final course grade 0..=5; `None` while the course is running.
    pub final_grade: Option<u8>,
}

impl GradeRecord {
    pub fn scores(&self, kind: AssignmentKind) -> &[Option<f64>; 3] {
        match kind {
            AssignmentKind::MiniProject => &self.mp,
            AssignmentKind::Quiz => &self.quiz,
            AssignmentKind::PeerReview => &self.pr,
        }
    }
}

pub const GRADES_HEADER: [&str; 11] =
    ["student_id", "mp1", "mp2", "mp3", "quiz1", "quiz2", "quiz3", "pr1", "pr2", "pr3", "final"];

pub fn parse_grades_csv(path: &Path) -> Result<Vec<GradeRecord>, IngestError> {
    parse_grades_reader(BufReader::new(File::open(path)?))
}

pub fn parse_grades_reader<R: Read>(mut input: R) -> Result<Vec<GradeRecord>, IngestError> {
    let mut text = Vec::new();
    input.read_to_end(&mut text)?;
    if text.iter().all(u8::is_ascii_whitespace) {
        return Err(IngestError::EmptyFile);
    }
    let mut r = csv::ReaderBuilder::new().from_reader(&text[..]);
    if r.headers()?.iter().map(str::trim).ne(GRADES_HEADER) {
        return Err(IngestError::MalformedCsv {
            line: 1,
            message: format!("expected header `{}`", GRADES_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let score = |j: usize| -> Result<Option<f64>, IngestError> {
            let raw = rec[j].trim();
            if raw.is_empty() {
                return Ok(None);
            }
            match raw.parse::<f64>() {
                Ok(v) if (0.0..=1.0).contains(&v) => Ok(Some(v)),
                _ => Err(IngestError::BadValue { line, column: GRADES_HEADER[j].into(), value: raw.to_string() }),
            }
        };
        let final_raw = rec[10].trim();
        let final_grade = if final_raw.is_empty() {
            None
        } else {
            Some(features::parse_final_grade(final_raw).ok_or_else(|| IngestError::BadValue {
                line,
                column: "final".into(),
                value: final_raw.to_string(),
            })?)
        };
        let student_id = rec[0].trim();
        if student_id.is_empty() {
            return Err(IngestError::MalformedCsv { line, message: "empty student id".into() });
        }
        out.push(GradeRecord {
            student_id: student_id.to_string(),
            mp: [score(1)?, score(2)?, score(3)?],
            quiz: [score(4)?, score(5)?, score(6)?],
            pr: [score(7)?, score(8)?, score(9)?],
            final_grade,
        });
    }
    Ok(out)
}

pub fn write_grades_csv<W: std::io::Write>(grades: &[GradeRecord], out: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(GRADES_HEADER)?;
    let cell = |s: Option<f64>| s.map(|v| v.to_string()).unwrap_or_default();
    for g in grades {
        let mut rec = vec![g.student_id.clone()];
        for kind in AssignmentKind::ALL {
            rec.extend(g.scores(kind).iter().map(|s| cell(*s)));
        }
        rec.push(g.final_grade.map(|f| f.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Data-quality notes for one student row.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowFlags {
    pub no_grade_record: bool,
    pub no_activity: bool,
    /// Grade features that were absent in the grades file and zero-filled.
    pub missing_assignments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledFeatures {
    /// Raw counts and grade fractions; see [`normalize_features`].
    pub matrix: FeatureMatrix,
    pub flags: BTreeMap<String, RowFlags>,
}

/// Column layout for a calendar: week-major, then `Stat0..Stat3`, then any
/// mini project, quiz and peer review due that week.
pub fn feature_columns(calendar: &CourseCalendar) -> Vec<FeatureColumn> {
    let mut cols = Vec::new();
    for week in 1..=calendar.n_weeks {
        for cat in ActivityCategory::STATS {
            cols.push(FeatureColumn { week, kind: FeatureKind::Activity(cat) });
        }
        for (kind, weeks) in [
            (AssignmentKind::MiniProject, &calendar.mp_deadline_weeks),
            (AssignmentKind::Quiz, &calendar.quiz_deadline_weeks),
            (AssignmentKind::PeerReview, &calendar.pr_deadline_weeks),
        ] {
            for (j, &w) in weeks.iter().enumerate() {
                if w == week {
                    cols.push(FeatureColumn { week, kind: FeatureKind::Grade(kind, j as u8 + 1) });
                }
            }
        }
    }
    cols
}

/// Joins weekly activity with grades into one unnormalized row per student
/// (sorted by id). Missing scores become 0 and are recorded in the flags.
pub fn assemble_features(
    weekly: &WeeklyCounts,
    grades: &[GradeRecord],
    calendar: &CourseCalendar,
) -> Result<AssembledFeatures, IngestError> {
    calendar.validate()?;
    let mut by_id: BTreeMap<&str, &GradeRecord> = BTreeMap::new();
    for g in grades {
        if by_id.insert(g.student_id.as_str(), g).is_some() {
            return Err(IngestError::DuplicateStudent(g.student_id.clone()));
        }
    }
    let ids: BTreeSet<&str> = weekly.keys().map(String::as_str).chain(by_id.keys().copied()).collect();
    let cols = feature_columns(calendar);
    let names: Vec<String> = cols.iter().map(ToString::to_string).collect();

    let (mut rows, mut labels, mut student_ids) = (Vec::new(), Vec::new(), Vec::new());
    let mut flags = BTreeMap::new();
    for id in ids {
        let activity = weekly.get(id);
        let grade = by_id.get(id).copied();
        let mut f = RowFlags {
            no_grade_record: grade.is_none(),
            no_activity: activity.is_none_or(|a| a.total() == 0),
            ..RowFlags::default()
        };
        let row = cols
            .iter()
            .zip(&names)
            .map(|(c, name)| match c.kind {
                FeatureKind::Activity(cat) => {
                    activity.map(|a| a.weeks[c.week as usize - 1][cat.stat_index().unwrap()] as f64).unwrap_or(0.0)
                }
                FeatureKind::Grade(kind, j) => {
                    let score = grade.and_then(|g| g.scores(kind)[j as usize - 1]);
                    if score.is_none() && grade.is_some() {
                        f.missing_assignments.push(name.clone());
                    }
                    score.unwrap_or(0.0)
                }
            })
            .collect();
        rows.push(row);
        labels.push(grade.and_then(|g| g.final_grade));
        student_ids.push(id.to_string());
        flags.insert(id.to_string(), f);
    }
    let matrix = FeatureMatrix::with_optional_labels(names, rows, labels, student_ids)?;
    Ok(AssembledFeatures { matrix, flags })
}
