use serde::{Deserialize, Serialize};

use super::state::{window_stats_of, Alert, AnalyticsConfig, SessionState, WindowStats};
use crate::affectmodel::{AffectiveState, STATES};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub title: String,
    pub created_at_ms: u64,
}

/// A maximal run of buckets whose mean index is below the class threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_ms: u64,
    pub end_ms: u64,
    pub first_bucket: usize,
    pub buckets: usize,
    /// Mean of the bucket means in the run.
    pub mean_norm_index: f64,
    pub percent: f64,
}

/// A maximal run of buckets where a state's `intensity / 3` exceeds its threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatePeak {
    pub state: AffectiveState,
    pub start_ms: u64,
    pub end_ms: u64,
    pub first_bucket: usize,
    pub buckets: usize,
    pub mean_level: f64,
    pub peak_level: f64,
    pub peak_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerSummary {
    pub learner_id: String,
    pub events: usize,
    pub invalid_frames: usize,
    pub dropped_late: usize,
    pub mean_norm_index: Option<f64>,
    pub mean_intensity: Option<[f64; STATES]>,
    /// Fraction of the learner's events below the class threshold.
    pub low_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LectureReport {
    pub session: SessionMeta,
    pub config: AnalyticsConfig,
    pub total_events: usize,
    pub dropped_events: usize,
    pub series: Vec<WindowStats>,
    pub low_segments: Vec<Segment>,
    pub state_peaks: Vec<StatePeak>,
    pub learners: Vec<LearnerSummary>,
    pub alerts: Vec<Alert>,
}

impl LectureReport {
    pub fn duration_ms(&self) -> u64 {
        self.series.last().map(|b| b.window_end).unwrap_or(0)
    }
}

/// Percentage rounded to two decimals, for display.
fn percent(v: f64) -> f64 {
    (v * 10_000.0).round() / 100.0
}

/// Maximal runs of consecutive indices for which `pred` holds.
fn runs(n: usize, mut pred: impl FnMut(usize) -> bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for i in 0..=n {
        let hit = i < n && pred(i);
        match (hit, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    out
}

fn mean(vals: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = vals.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Builds the lecture report from the session's full event history.
pub fn build_report(meta: &SessionMeta, state: &SessionState) -> LectureReport {
    let cfg = &state.config;
    let bucket = cfg.bucket_ms;
    let n_buckets = state
        .history
        .iter()
        .map(|e| e.timestamp_ms / bucket + 1)
        .max()
        .unwrap_or(0) as usize;
    let series: Vec<WindowStats> = (0..n_buckets)
        .map(|k| window_stats_of(&state.history, k as u64 * bucket, (k as u64 + 1) * bucket))
        .collect();

    let low_segments = runs(n_buckets, |k| series[k].mean_norm_index.is_some_and(|m| m < cfg.disengaged_threshold))
        .into_iter()
        .map(|(a, b)| {
            let m = mean(series[a..b].iter().filter_map(|s| s.mean_norm_index)).expect("run buckets have means");
            Segment {
                start_ms: a as u64 * bucket,
                end_ms: b as u64 * bucket,
                first_bucket: a,
                buckets: b - a,
                mean_norm_index: m,
                percent: percent(m),
            }
        })
        .collect();

    let mut state_peaks = Vec::new();
    for st in AffectiveState::ALL {
        let i = st.index();
        let level = |k: usize| series[k].mean_intensity.map(|m| m[i] / 3.0);
        for (a, b) in runs(n_buckets, |k| level(k).is_some_and(|l| l > cfg.elevation_threshold[i])) {
            let levels: Vec<f64> = (a..b).filter_map(level).collect();
            let peak = levels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            state_peaks.push(StatePeak {
                state: st,
                start_ms: a as u64 * bucket,
                end_ms: b as u64 * bucket,
                first_bucket: a,
                buckets: b - a,
                mean_level: mean(levels.iter().copied()).expect("non-empty run"),
                peak_level: peak,
                peak_percent: percent(peak),
            });
        }
    }

    let learners = state
        .learners
        .values()
        .map(|l| {
            let evs: Vec<_> = state.history.iter().filter(|e| e.learner_id == l.learner_id).collect();
            let k = evs.len() as f64;
            LearnerSummary {
                learner_id: l.learner_id.clone(),
                events: evs.len(),
                invalid_frames: l.invalid_frames,
                dropped_late: l.dropped_late,
                mean_norm_index: mean(evs.iter().map(|e| e.norm_index)),
                mean_intensity: (!evs.is_empty()).then(|| {
                    let mut s = [0.0; STATES];
                    for e in &evs {
                        for (a, v) in s.iter_mut().zip(e.intensities.0) {
                            *a += v;
                        }
                    }
                    s.map(|v| v / k)
                }),
                low_fraction: (!evs.is_empty())
                    .then(|| evs.iter().filter(|e| e.norm_index < cfg.disengaged_threshold).count() as f64 / k),
            }
        })
        .collect();

    LectureReport {
        session: meta.clone(),
        config: cfg.clone(),
        total_events: state.history.len(),
        dropped_events: state.dropped_events,
        series,
        low_segments,
        state_peaks,
        learners,
        alerts: state.alerts.clone(),
    }
}

/// Canonical JSON: struct fields in declaration order, maps sorted, no
/// insignificant whitespace.
pub fn report_json(report: &LectureReport) -> String {
    serde_json::to_string(report).expect("report serializes")
}
