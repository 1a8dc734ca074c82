use std::io::{BufRead, Write};

use super::report::{build_report, LectureReport, SessionMeta};
use super::state::{Alert, AnalyticsConfig, SessionEvent, SessionState};
use super::AnalyticsError;

pub fn to_event_line(ev: &SessionEvent) -> String {
    serde_json::to_string(ev).expect("event serializes")
}

pub fn parse_event_line(line: &str, line_no: usize) -> Result<SessionEvent, AnalyticsError> {
    serde_json::from_str(line).map_err(|e| AnalyticsError::Log {
        line: line_no,
        msg: e.to_string(),
    })
}

/// Reads an NDJSON event log; blank lines are skipped.
pub fn read_event_log(reader: impl BufRead) -> Result<Vec<SessionEvent>, AnalyticsError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_event_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn write_event_log(mut w: impl Write, events: &[SessionEvent]) -> Result<(), AnalyticsError> {
    for ev in events {
        writeln!(w, "{}", to_event_line(ev))?;
    }
    Ok(())
}

/// Result of replaying a log from a fresh session state.
#[derive(Clone, Debug, PartialEq)]
pub struct Replay {
    pub state: SessionState,
    pub alerts: Vec<Alert>,
    pub report: LectureReport,
}

/// Rebuilds session analytics by applying every logged event in order.
pub fn replay(meta: &SessionMeta, config: AnalyticsConfig, events: &[SessionEvent]) -> Result<Replay, AnalyticsError> {
    let mut state = SessionState::new(meta.session_id.clone(), config)?;
    let mut alerts = Vec::new();
    for ev in events {
        alerts.extend(state.apply(ev)?.alerts);
    }
    let report = build_report(meta, &state);
    Ok(Replay { state, alerts, report })
}
