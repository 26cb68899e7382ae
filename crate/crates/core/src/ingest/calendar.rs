use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use super::IngestError;
use crate::config::parse_key_values;

/// Course week structure: start date, length and assignment deadline weeks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CourseCalendar {
    pub course_start: NaiveDate,
    pub n_weeks: u32,
    pub mp_deadline_weeks: Vec<u32>,
    pub quiz_deadline_weeks: Vec<u32>,
    pub pr_deadline_weeks: Vec<u32>,
}

pub const ASSIGNMENTS_PER_KIND: usize = 3;

impl CourseCalendar {
    /// Nine-week course with mini projects due in weeks 3/5/8, quizzes in
    /// 2/4/8 and peer reviews following the mini projects.
    pub fn with_start(course_start: NaiveDate) -> Self {
        CourseCalendar {
            course_start,
            n_weeks: 9,
            mp_deadline_weeks: vec![3, 5, 8],
            quiz_deadline_weeks: vec![2, 4, 8],
            pr_deadline_weeks: vec![3, 5, 8],
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.n_weeks == 0 {
            return Err(IngestError::InvalidCalendar("n_weeks must be positive".into()));
        }
        for (label, weeks) in [
            ("mp_weeks", &self.mp_deadline_weeks),
            ("quiz_weeks", &self.quiz_deadline_weeks),
            ("pr_weeks", &self.pr_deadline_weeks),
        ] {
            if weeks.len() != ASSIGNMENTS_PER_KIND {
                return Err(IngestError::InvalidCalendar(format!(
                    "{label} must list {ASSIGNMENTS_PER_KIND} weeks, got {}",
                    weeks.len()
                )));
            }
            if weeks.iter().any(|&w| w == 0 || w > self.n_weeks) {
                return Err(IngestError::InvalidCalendar(format!("{label} has a week outside 1..={}", self.n_weeks)));
            }
            if weeks.windows(2).any(|p| p[0] > p[1]) {
                return Err(IngestError::InvalidCalendar(format!("{label} must be ascending")));
            }
        }
        Ok(())
    }

    pub fn start_instant(&self) -> DateTime<Utc> {
        self.course_start.and_hms_opt(0, 0, 0).unwrap().and_utc()
    }

    /// One-based week of `ts`, or `None` outside the course window.
    pub fn week_of(&self, ts: DateTime<Utc>) -> Option<u32> {
        let delta = ts - self.start_instant();
        if delta < chrono::TimeDelta::zero() {
            return None;
        }
        let week = delta.num_days() / 7 + 1;
        (week <= self.n_weeks as i64).then_some(week as u32)
    }

    /// Parses a `key = value` calendar file. Only `course_start` is required.
    pub fn from_key_values(text: &str) -> Result<Self, IngestError> {
        let kv = parse_key_values(text).map_err(|e| IngestError::InvalidCalendar(e.to_string()))?;
        let start =
            kv.get("course_start").ok_or_else(|| IngestError::InvalidCalendar("missing course_start".into()))?;
        let start = NaiveDate::parse_from_str(start, "%Y-%m-%d")
            .map_err(|e| IngestError::InvalidCalendar(format!("course_start: {e}")))?;
        let mut cal = CourseCalendar::with_start(start);
        for (key, value) in &kv {
            match key.as_str() {
                "course_start" => {}
                "n_weeks" => {
                    cal.n_weeks =
                        value.parse().map_err(|_| IngestError::InvalidCalendar(format!("n_weeks: {value:?}")))?
                }
                "mp_weeks" => cal.mp_deadline_weeks = parse_week_list(key, value)?,
                "quiz_weeks" => cal.quiz_deadline_weeks = parse_week_list(key, value)?,
                "pr_weeks" => cal.pr_deadline_weeks = parse_week_list(key, value)?,
                other => return Err(IngestError::InvalidCalendar(format!("unknown key {other:?}"))),
            }
        }
        cal.validate()?;
        Ok(cal)
    }

    pub fn to_key_values(&self) -> String {
        let join = |w: &[u32]| w.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        format!(
            "course_start = {}\nn_weeks = {}\nmp_weeks = {}\nquiz_weeks = {}\npr_weeks = {}\n",
            self.course_start.format("%Y-%m-%d"),
            self.n_weeks,
            join(&self.mp_deadline_weeks),
            join(&self.quiz_deadline_weeks),
            join(&self.pr_deadline_weeks),
        )
    }
}

fn parse_week_list(key: &str, value: &str) -> Result<Vec<u32>, IngestError> {
    value
        .split(',')
        .map(|w| w.trim().parse::<u32>().map_err(|_| IngestError::InvalidCalendar(format!("{key}: bad week {w:?}"))))
        .collect()
}
