//! Streaming per-session analytics: learner time series, the class
//! trailing-window aggregate, threshold alerts with hysteresis, lecture
//! reports and cross-lecture recommendations.
//!
//! All state changes go through [`SessionState::apply`], driven by
//! [`SessionEvent`]s. The NDJSON event log is therefore a complete record:
//! replaying it reproduces every alert and report byte for byte.

mod log;
mod recommend;
mod report;
mod state;

pub use log::{parse_event_line, read_event_log, replay, to_event_line, write_event_log, Replay};
pub use recommend::{recommend, Evidence, Phase, Recommendation, RecommendationKind};
pub use report::{build_report, report_json, LearnerSummary, LectureReport, Segment, SessionMeta, StatePeak};
pub use state::{
    window_stats_of, Alert, AlertContext, AlertKind, AnalyticsConfig, ApplyOutcome, LearnerRow, LearnerState, PredictionEvent,
    Presence, SessionEvent, SessionState, Severity, Snapshot, WindowStats, DISENGAGED_MESSAGE,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("event for session {found} applied to session {expected}")]
    WrongSession { expected: String, found: String },
    #[error("invalid event: {0}")]
    Event(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("window start {start} is not before end {end}")]
    Window { start: u64, end: u64 },
    #[error("event log line {line}: {msg}")]
    Log { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
