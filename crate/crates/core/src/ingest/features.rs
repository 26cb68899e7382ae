use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use super::taxonomy::ActivityCategory;
use super::IngestError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AssignmentKind {
    MiniProject,
    Quiz,
    PeerReview,
}

impl AssignmentKind {
    pub const ALL: [AssignmentKind; 3] =
        [AssignmentKind::MiniProject, AssignmentKind::Quiz, AssignmentKind::PeerReview];

    pub fn prefix(self) -> &'static str {
        match self {
            AssignmentKind::MiniProject => "MP",
            AssignmentKind::Quiz => "Quiz",
            AssignmentKind::PeerReview => "PR",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            AssignmentKind::MiniProject => "mini project",
            AssignmentKind::Quiz => "quiz",
            AssignmentKind::PeerReview => "peer review",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    Activity(ActivityCategory),
    /// Assignment kind and its one-based number within that kind.
    Grade(AssignmentKind, u8),
}

/// A parsed feature name such as `Week5 Stat0` or `Week3 MP1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub week: u32,
    pub kind: FeatureKind,
}

impl FeatureColumn {
    pub fn is_grade(&self) -> bool {
        matches!(self.kind, FeatureKind::Grade(..))
    }
}

impl fmt::Display for FeatureColumn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            FeatureKind::Activity(cat) => write!(f, "Week{} {}", self.week, cat),
            FeatureKind::Grade(kind, j) => write!(f, "Week{} {}{}", self.week, kind.prefix(), j),
        }
    }
}

impl FromStr for FeatureColumn {
    type Err = IngestError;

    fn from_str(name: &str) -> Result<Self, Self::Err> {
        let bad = || IngestError::UnknownFeature(name.to_string());
        let rest = name.strip_prefix("Week").ok_or_else(bad)?;
        let (week, tail) = rest.split_once(' ').ok_or_else(bad)?;
        let week: u32 = week.parse().map_err(|_| bad())?;
        if week == 0 {
            return Err(bad());
        }
        let number = |s: &str| -> Result<u8, IngestError> {
            match s.parse::<u8>() {
                Ok(n) if n >= 1 => Ok(n),
                _ => Err(bad()),
            }
        };
        let kind = if let Some(k) = tail.strip_prefix("Stat") {
            let k: usize = k.parse().map_err(|_| bad())?;
            FeatureKind::Activity(ActivityCategory::from_stat_index(k).ok_or_else(bad)?)
        } else if let Some(j) = tail.strip_prefix("Quiz") {
            FeatureKind::Grade(AssignmentKind::Quiz, number(j)?)
        } else if let Some(j) = tail.strip_prefix("MP") {
            FeatureKind::Grade(AssignmentKind::MiniProject, number(j)?)
        } else if let Some(j) = tail.strip_prefix("PR") {
            FeatureKind::Grade(AssignmentKind::PeerReview, number(j)?)
        } else {
            return Err(bad());
        };
        let col = FeatureColumn { week, kind };
        // reject non-canonical spellings such as "Week05 Stat0"
        if col.to_string() != name {
            return Err(bad());
        }
        Ok(col)
    }
}

/// Week index encoded in a feature name, if it follows the `Week{n} ...` scheme.
pub fn feature_week(name: &str) -> Option<u32> {
    name.parse::<FeatureColumn>().ok().map(|c| c.week)
}

/// Which feature families a window keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSubset {
    GradesOnly,
    LogsOnly,
    Both,
}

impl FeatureSubset {
    pub const ALL: [FeatureSubset; 3] = [FeatureSubset::GradesOnly, FeatureSubset::LogsOnly, FeatureSubset::Both];

    pub fn keeps(self, col: &FeatureColumn) -> bool {
        match self {
            FeatureSubset::GradesOnly => col.is_grade(),
            FeatureSubset::LogsOnly => !col.is_grade(),
            FeatureSubset::Both => true,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            FeatureSubset::GradesOnly => "grades",
            FeatureSubset::LogsOnly => "logs",
            FeatureSubset::Both => "both",
        }
    }
}

impl fmt::Display for FeatureSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSubset::GradesOnly => "Grades",
            FeatureSubset::LogsOnly => "Logs",
            FeatureSubset::Both => "Grades + Logs",
        })
    }
}

impl FromStr for FeatureSubset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grades" => Ok(FeatureSubset::GradesOnly),
            "logs" => Ok(FeatureSubset::LogsOnly),
            "both" => Ok(FeatureSubset::Both),
            other => Err(format!("unknown feature subset {other:?}")),
        }
    }
}

/// Students × named features, with optional final-grade labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<Option<u8>>,
    pub student_ids: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(
        feature_names: Vec<String>,
        rows: Vec<Vec<f64>>,
        labels: Vec<u8>,
        student_ids: Vec<String>,
    ) -> Result<Self, IngestError> {
        Self::with_optional_labels(feature_names, rows, labels.into_iter().map(Some).collect(), student_ids)
    }

    pub fn with_optional_labels(
        feature_names: Vec<String>,
        rows: Vec<Vec<f64>>,
        labels: Vec<Option<u8>>,
        student_ids: Vec<String>,
    ) -> Result<Self, IngestError> {
        let m = FeatureMatrix { feature_names, rows, labels, student_ids };
        m.validate()?;
        Ok(m)
    }

    /// Convenience constructor with ids `r0`, `r1`, ...
    pub fn from_rows(feature_names: Vec<String>, rows: Vec<Vec<f64>>, labels: Vec<u8>) -> Result<Self, IngestError> {
        let ids = (0..rows.len()).map(|i| format!("r{i}")).collect();
        Self::new(feature_names, rows, labels, ids)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let n = self.rows.len();
        if self.labels.len() != n || self.student_ids.len() != n {
            return Err(IngestError::Shape(format!(
                "{} rows, {} labels, {} ids",
                n,
                self.labels.len(),
                self.student_ids.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &self.feature_names {
            if !seen.insert(name.as_str()) {
                return Err(IngestError::Shape(format!("duplicate feature name {name:?}")));
            }
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != self.feature_names.len() {
                return Err(IngestError::Shape(format!(
                    "row {i} has {} values, expected {}",
                    row.len(),
                    self.feature_names.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(IngestError::Shape(format!("row {i} has a non-finite value")));
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn row_of(&self, student_id: &str) -> Option<usize> {
        self.student_ids.iter().position(|s| s == student_id)
    }

    /// All labels, or `Unlabeled` naming the first row without one.
    pub fn require_labels(&self) -> Result<Vec<u8>, IngestError> {
        self.labels
            .iter()
            .zip(&self.student_ids)
            .map(|(l, id)| l.ok_or_else(|| IngestError::Unlabeled(id.clone())))
            .collect()
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<u8> {
        let mut c: Vec<u8> = self.labels.iter().flatten().copied().collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Label histogram over labeled rows.
    pub fn class_counts(&self) -> BTreeMap<u8, usize> {
        let mut h = BTreeMap::new();
        for l in self.labels.iter().flatten() {
            *h.entry(*l).or_insert(0) += 1;
        }
        h
    }

    /// Rows at `indices`, in that order.
    pub fn take_rows(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            feature_names: self.feature_names.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            student_ids: indices.iter().map(|&i| self.student_ids[i].clone()).collect(),
        }
    }

    /// Columns at `indices`, in that order.
    pub fn take_columns(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            feature_names: indices.iter().map(|&j| self.feature_names[j].clone()).collect(),
            rows: self.rows.iter().map(|r| indices.iter().map(|&j| r[j]).collect()).collect(),
            labels: self.labels.clone(),
            student_ids: self.student_ids.clone(),
        }
    }

    /// Columns selected by name; fails on the first unknown name.
    pub fn select_named(&self, names: &[String]) -> Result<FeatureMatrix, IngestError> {
        let idx = names
            .iter()
            .map(|n| self.feature_index(n).ok_or_else(|| IngestError::UnknownFeature(n.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.take_columns(&idx))
    }

    pub fn parsed_columns(&self) -> Result<Vec<FeatureColumn>, IngestError> {
        self.feature_names.iter().map(|n| n.parse()).collect()
    }

    /// Largest week index among the columns (0 when there are none).
    pub fn max_week(&self) -> Result<u32, IngestError> {
        Ok(self.parsed_columns()?.iter().map(|c| c.week).max().unwrap_or(0))
    }

    /// Concatenates rows of `other` (same columns) after `self`.
    pub fn append(&mut self, other: FeatureMatrix) -> Result<(), IngestError> {
        if other.feature_names != self.feature_names {
            return Err(IngestError::Shape("cannot append matrices with different columns".into()));
        }
        self.rows.extend(other.rows);
        self.labels.extend(other.labels);
        self.student_ids.extend(other.student_ids);
        Ok(())
    }
}

/// Per-column scaling recorded at training time so new students can be
/// normalized identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub feature_names: Vec<String>,
    /// Cohort maximum of each activity column; `None` for grade columns,
    /// which are already fractions.
    pub maxima: Vec<Option<f64>>,
}

impl Normalizer {
    pub fn fit(m: &FeatureMatrix) -> Normalizer {
        let maxima = m
            .feature_names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let is_grade = name.parse::<FeatureColumn>().map(|c| c.is_grade()).unwrap_or(false);
                (!is_grade).then(|| m.rows.iter().map(|r| r[j]).fold(0.0_f64, f64::max))
            })
            .collect();
        Normalizer { feature_names: m.feature_names.clone(), maxima }
    }

    pub fn normalize_value(&self, j: usize, value: f64) -> f64 {
        let v = match self.maxima[j] {
            Some(max) if max > 0.0 => value / max,
            Some(_) => 0.0,
            None => value,
        };
        v.clamp(0.0, 1.0)
    }

    /// Scales `m`, whose columns must match the recorded ones exactly.
    pub fn apply(&self, m: &FeatureMatrix) -> Result<FeatureMatrix, IngestError> {
        if m.feature_names != self.feature_names {
            return Err(IngestError::Shape("feature columns differ from the normalization record".into()));
        }
        let rows =
            m.rows.iter().map(|r| r.iter().enumerate().map(|(j, &v)| self.normalize_value(j, v)).collect()).collect();
        Ok(FeatureMatrix { rows, ..m.clone() })
    }
}

/// Divides each activity column by its cohort maximum; grade columns pass
/// through. Returns the scaled matrix and the maxima used.
pub fn normalize_features(m: &FeatureMatrix) -> (FeatureMatrix, Normalizer) {
    let norm = Normalizer::fit(m);
    let out = norm.apply(m).expect("normalizer fitted on the same columns");
    (out, norm)
}

/// Keeps columns whose week lies in `first_week..=last_week` and whose kind
/// matches `subset`.
pub fn select_weeks(
    m: &FeatureMatrix,
    first_week: u32,
    last_week: u32,
    subset: FeatureSubset,
) -> Result<FeatureMatrix, IngestError> {
    let cols = m.parsed_columns()?;
    let max_week = cols.iter().map(|c| c.week).max().unwrap_or(0);
    if first_week == 0 || first_week > last_week || last_week > max_week {
        return Err(IngestError::InvalidWindow { first_week, last_week, max_week });
    }
    let keep: Vec<usize> = cols
        .iter()
        .enumerate()
        .filter(|(_, c)| (first_week..=last_week).contains(&c.week) && subset.keeps(c))
        .map(|(j, _)| j)
        .collect();
    if keep.is_empty() {
        return Err(IngestError::EmptyFeatureSet { first_week, last_week, subset });
    }
    Ok(m.take_columns(&keep))
}

/// Features available by the end of week `upto_week`.
pub fn select_window(m: &FeatureMatrix, upto_week: u32, subset: FeatureSubset) -> Result<FeatureMatrix, IngestError> {
    select_weeks(m, 1, upto_week, subset)
}

/// Writes `student_id,<features...>,final`. Unlabeled rows leave `final` empty.
pub fn write_features_csv<W: Write>(m: &FeatureMatrix, out: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["student_id".to_string()];
    header.extend(m.feature_names.iter().cloned());
    header.push("final".into());
    w.write_record(&header)?;
    for i in 0..m.n_rows() {
        let mut rec = Vec::with_capacity(m.n_features() + 2);
        rec.push(m.student_ids[i].clone());
        rec.extend(m.rows[i].iter().map(|v| v.to_string()));
        rec.push(m.labels[i].map(|l| l.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features_csv<R: Read>(input: R) -> Result<FeatureMatrix, IngestError> {
    let mut r = csv::ReaderBuilder::new().from_reader(input);
    let header = r.headers()?.clone();
    let n = header.len();
    if n < 2 || &header[0] != "student_id" || &header[n - 1] != "final" {
        return Err(IngestError::MalformedCsv {
            line: 1,
            message: "expected header `student_id,<features...>,final`".into(),
        });
    }
    let names: Vec<String> = header.iter().skip(1).take(n - 2).map(str::to_string).collect();
    let (mut rows, mut labels, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        ids.push(rec[0].to_string());
        let row = (1..n - 1)
            .map(|j| {
                rec[j].trim().parse::<f64>().map_err(|_| IngestError::BadValue {
                    line,
                    column: header[j].to_string(),
                    value: rec[j].to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
        let last = rec[n - 1].trim();
        labels.push(if last.is_empty() {
            None
        } else {
            Some(parse_final_grade(last).ok_or_else(|| IngestError::BadValue {
                line,
                column: "final".into(),
                value: last.to_string(),
            })?)
        });
    }
    FeatureMatrix::with_optional_labels(names, rows, labels, ids)
}

pub(crate) fn parse_final_grade(s: &str) -> Option<u8> {
    s.parse::<u8>().ok().filter(|g| *g <= 5)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn column_names_round_trip() {
        for name in ["Week1 Stat0", "Week9 Stat3", "Week3 MP1", "Week4 Quiz2", "Week8 PR3"] {
            let c: FeatureColumn = name.parse().unwrap();
            assert_eq!(c.to_string(), name);
        }
        for bad in ["Week0 Stat0", "Week1 Stat4", "Week1 MP0", "week1 Stat0", "Week01 Stat0", "Week1 Foo1"] {
            assert!(bad.parse::<FeatureColumn>().is_err(), "{bad}");
        }
    }

    #[test]
    fn normalize_divides_activity_by_max() {
        let m = FeatureMatrix::from_rows(
            names(&["Week1 Stat0", "Week1 Stat1", "Week3 MP1"]),
            vec![vec![10.0, 0.0, 0.83], vec![46.0, 0.0, 0.5], vec![100.0, 0.0, 0.5]],
            vec![0, 2, 3],
        )
        .unwrap();
        let (n, norm) = normalize_features(&m);
        let col = |j: usize| n.rows.iter().map(|r| r[j]).collect::<Vec<_>>();
        assert_eq!(col(0), vec![0.10, 0.46, 1.00]);
        assert_eq!(col(1), vec![0.0, 0.0, 0.0]);
        assert_eq!(col(2), vec![0.83, 0.5, 0.5]);
        assert_eq!(norm.maxima, vec![Some(100.0), Some(0.0), None]);
    }

    #[test]
    fn normalizer_clamps_unseen_students() {
        let m = FeatureMatrix::from_rows(names(&["Week1 Stat0"]), vec![vec![10.0]], vec![0]).unwrap();
        let norm = Normalizer::fit(&m);
        assert_eq!(norm.normalize_value(0, 25.0), 1.0);
    }

    #[test]
    fn window_on_unparseable_names_fails() {
        let m = FeatureMatrix::from_rows(names(&["f0"]), vec![vec![1.0]], vec![0]).unwrap();
        assert!(matches!(select_window(&m, 1, FeatureSubset::Both), Err(IngestError::UnknownFeature(_))));
    }

    #[test]
    fn csv_round_trip_keeps_unlabeled_rows() {
        let m = FeatureMatrix::with_optional_labels(
            names(&["Week1 Stat0", "Week2 Quiz1"]),
            vec![vec![3.0, 0.25], vec![0.0, 1.0]],
            vec![Some(4), None],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_features_csv(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), "student_id,Week1 Stat0,Week2 Quiz1,final");
        assert_eq!(read_features_csv(&buf[..]).unwrap(), m);
    }

    #[test]
    fn shape_validation() {
        assert!(FeatureMatrix::from_rows(names(&["a", "a"]), vec![], vec![]).is_err());
        assert!(FeatureMatrix::from_rows(names(&["a"]), vec![vec![1.0, 2.0]], vec![0]).is_err());
        assert!(FeatureMatrix::from_rows(names(&["a"]), vec![vec![f64::NAN]], vec![0]).is_err());
    }
}
