use serde::{Deserialize, Serialize};
use std::fmt;

/// Activity category of a logged event.
///
/// The four named categories become the `Stat0`..`Stat3` features; `Other`
/// events are counted for diagnostics only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActivityCategory {
    CourseContent,
    Assignment,
    GradeRelated,
    Forum,
    Other,
}

impl ActivityCategory {
    pub const STATS: [ActivityCategory; 4] = [
        ActivityCategory::CourseContent,
        ActivityCategory::Assignment,
        ActivityCategory::GradeRelated,
        ActivityCategory::Forum,
    ];

    /// Index `k` of the `Stat{k}` feature, `None` for `Other`.
    pub fn stat_index(self) -> Option<usize> {
        match self {
            ActivityCategory::CourseContent => Some(0),
            ActivityCategory::Assignment => Some(1),
            ActivityCategory::GradeRelated => Some(2),
            ActivityCategory::Forum => Some(3),
            ActivityCategory::Other => None,
        }
    }

    pub fn from_stat_index(k: usize) -> Option<Self> {
        Self::STATS.get(k).copied()
    }

    /// Plain-language description used in strategy text.
    pub fn describe(self) -> &'static str {
        match self {
            ActivityCategory::CourseContent => "course content",
            ActivityCategory::Assignment => "assignment pages",
            ActivityCategory::GradeRelated => "grade and report pages",
            ActivityCategory::Forum => "the discussion forum",
            ActivityCategory::Other => "other course pages",
        }
    }

    /// Event names that belong to this category (empty for `Other`).
    pub fn event_names(self) -> &'static [&'static str] {
        match self {
            ActivityCategory::CourseContent => COURSE_CONTENT,
            ActivityCategory::Assignment => ASSIGNMENT,
            ActivityCategory::GradeRelated => GRADE_RELATED,
            ActivityCategory::Forum => FORUM,
            ActivityCategory::Other => &[],
        }
    }
}

impl fmt::Display for ActivityCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.stat_index() {
            Some(k) => write!(f, "Stat{k}"),
            None => f.write_str("Other"),
        }
    }
}

const COURSE_CONTENT: &[&str] = &[
    "course module viewed",
    "course viewed",
    "course activity completion updated",
    "course module instance list viewed",
    "content page viewed",
    "lesson started",
    "lesson resumed",
    "lesson restarted",
    "lesson ended",
];

const ASSIGNMENT: &[&str] = &[
    "quiz attempt reviewed",
    "quiz attempt submitted",
    "quiz attempt summary viewed",
    "quiz attempt viewed",
    "quiz attempt started",
    "question answered",
    "question viewed",
    "submission re-assessed",
    "submission reassessed",
    "submission updated",
    "submission created",
    "submission viewed",
];

const GRADE_RELATED: &[&str] = &[
    "grade user report viewed",
    "grade overview report viewed",
    "user graded",
    "grade deleted",
    "user profile viewed",
    "recent activity viewed",
    "user report viewed",
    "course user report viewed",
    "outline report viewed",
];

const FORUM: &[&str] =
    &["post updated", "post created", "discussion created", "some content has been posted", "discussion viewed"];

/// Maps a Moodle event label to its category. Matching is exact after
/// trimming and ASCII case folding; anything unlisted is `Other`.
pub fn categorize_event(event_name: &str) -> ActivityCategory {
    let name = event_name.trim().to_ascii_lowercase();
    ActivityCategory::STATS
        .into_iter()
        .find(|cat| cat.event_names().contains(&name.as_str()))
        .unwrap_or(ActivityCategory::Other)
}
