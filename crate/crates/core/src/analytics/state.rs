use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::AnalyticsError;
use crate::affectmodel::{
    probs_to_intensities, probs_to_levels, AffectiveIntensities, AffectiveState, AffectiveStateProbs, LEVELS, STATES,
};
use crate::attnindex::{normalize_index, IndexConfig};

pub const DISENGAGED_MESSAGE: &str = "class is currently disengaged!";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyticsConfig {
    /// Class alert fires when the trailing mean index drops below this.
    pub disengaged_threshold: f64,
    /// The mean must climb above `threshold + hysteresis` to re-arm.
    pub hysteresis: f64,
    pub cooldown_ms: u64,
    pub window_ms: u64,
    /// Per-state elevation threshold on `intensity / 3`.
    pub elevation_threshold: [f64; STATES],
    pub stale_after_ms: u64,
    pub absent_after_ms: u64,
    pub bucket_ms: u64,
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        Self {
            disengaged_threshold: 0.40,
            hysteresis: 0.05,
            cooldown_ms: 60_000,
            window_ms: 30_000,
            elevation_threshold: [0.66; STATES],
            stale_after_ms: 10_000,
            absent_after_ms: 30_000,
            bucket_ms: 10_000,
        }
    }
}

impl AnalyticsConfig {
    pub fn validate(&self) -> Result<(), AnalyticsError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.disengaged_threshold) || !self.elevation_threshold.iter().all(|&t| unit(t)) {
            return Err(AnalyticsError::Config("thresholds must lie in [0, 1]".into()));
        }
        if !(self.hysteresis >= 0.0 && self.hysteresis.is_finite()) {
            return Err(AnalyticsError::Config(format!("hysteresis {}", self.hysteresis)));
        }
        if self.window_ms == 0 || self.bucket_ms == 0 {
            return Err(AnalyticsError::Config("window and bucket widths must be positive".into()));
        }
        if self.stale_after_ms > self.absent_after_ms {
            return Err(AnalyticsError::Config("stale_after_ms must not exceed absent_after_ms".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionEvent {
    pub session_id: String,
    pub learner_id: String,
    /// Milliseconds since session start.
    pub timestamp_ms: u64,
    pub probs: AffectiveStateProbs,
    pub intensities: AffectiveIntensities,
    pub raw_index: f64,
    pub norm_index: f64,
}

impl PredictionEvent {
    /// Derives intensities and both index values from a probability matrix.
    pub fn from_probs(
        session_id: impl Into<String>,
        learner_id: impl Into<String>,
        timestamp_ms: u64,
        probs: AffectiveStateProbs,
        index: &IndexConfig,
    ) -> Self {
        let intensities = probs_to_intensities(&probs);
        let raw_index = index.raw(&intensities);
        Self {
            session_id: session_id.into(),
            learner_id: learner_id.into(),
            timestamp_ms,
            probs,
            intensities,
            raw_index,
            norm_index: normalize_index(raw_index, index),
        }
    }

    fn check(&self) -> Result<(), AnalyticsError> {
        if !(0.0..=1.0).contains(&self.norm_index) || !self.raw_index.is_finite() {
            return Err(AnalyticsError::Event(format!("index out of range: raw {} norm {}", self.raw_index, self.norm_index)));
        }
        if self.learner_id.is_empty() {
            return Err(AnalyticsError::Event("empty learner id".into()));
        }
        Ok(())
    }
}

/// One line of the session event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionEvent {
    Prediction(PredictionEvent),
    InvalidFrame {
        session_id: String,
        learner_id: String,
        timestamp_ms: u64,
    },
    LearnerJoined {
        session_id: String,
        learner_id: String,
        timestamp_ms: u64,
    },
    ConfigChanged {
        session_id: String,
        timestamp_ms: u64,
        config: AnalyticsConfig,
    },
}

impl SessionEvent {
    pub fn session_id(&self) -> &str {
        match self {
            SessionEvent::Prediction(e) => &e.session_id,
            SessionEvent::InvalidFrame { session_id, .. }
            | SessionEvent::LearnerJoined { session_id, .. }
            | SessionEvent::ConfigChanged { session_id, .. } => session_id,
        }
    }

    pub fn timestamp_ms(&self) -> u64 {
        match self {
            SessionEvent::Prediction(e) => e.timestamp_ms,
            SessionEvent::InvalidFrame { timestamp_ms, .. }
            | SessionEvent::LearnerJoined { timestamp_ms, .. }
            | SessionEvent::ConfigChanged { timestamp_ms, .. } => *timestamp_ms,
        }
    }

    pub fn learner_id(&self) -> Option<&str> {
        match self {
            SessionEvent::Prediction(e) => Some(&e.learner_id),
            SessionEvent::InvalidFrame { learner_id, .. } | SessionEvent::LearnerJoined { learner_id, .. } => Some(learner_id),
            SessionEvent::ConfigChanged { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Presence {
    Active,
    Stale,
    Absent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertKind {
    ClassDisengaged,
    StateElevated,
    LearnerAbsent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Warning,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlertContext {
    pub state: Option<AffectiveState>,
    pub learner_id: Option<String>,
    pub value: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub kind: AlertKind,
    pub timestamp_ms: u64,
    pub message: String,
    pub severity: Severity,
    pub context: AlertContext,
}

/// Aggregates over a half-open time window. Means are `None` when no event
/// falls in the window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub window_start: u64,
    pub window_end: u64,
    pub mean_intensity: Option<[f64; STATES]>,
    pub mean_norm_index: Option<f64>,
    /// `level_histogram[state][level]`: argmax levels of contributing events.
    pub level_histogram: [[usize; LEVELS]; STATES],
    pub event_count: usize,
    pub active_learner_count: usize,
}

/// Straight pass over `events` keeping those with `start <= t < end`.
pub fn window_stats_of<'a>(events: impl IntoIterator<Item = &'a PredictionEvent>, start: u64, end: u64) -> WindowStats {
    let mut sum_i = [0.0; STATES];
    let mut sum_n = 0.0;
    let mut hist = [[0usize; LEVELS]; STATES];
    let mut learners = BTreeSet::new();
    let mut n = 0usize;
    for e in events {
        if e.timestamp_ms < start || e.timestamp_ms >= end {
            continue;
        }
        n += 1;
        for (s, v) in sum_i.iter_mut().zip(e.intensities.0) {
            *s += v;
        }
        sum_n += e.norm_index;
        let lv = probs_to_levels(&e.probs);
        for st in AffectiveState::ALL {
            hist[st.index()][lv.get(st) as usize] += 1;
        }
        learners.insert(e.learner_id.as_str());
    }
    let k = n as f64;
    WindowStats {
        window_start: start,
        window_end: end,
        mean_intensity: (n > 0).then(|| sum_i.map(|s| s / k)),
        mean_norm_index: (n > 0).then(|| sum_n / k),
        level_histogram: hist,
        event_count: n,
        active_learner_count: learners.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub learner_id: String,
    /// Events inside the trailing window, oldest first.
    pub recent: VecDeque<PredictionEvent>,
    pub presence: Presence,
    pub last_seen: u64,
    /// Latest timestamp accepted from this learner (predictions and invalid frames).
    pub last_timestamp: Option<u64>,
    pub events: usize,
    pub invalid_frames: usize,
    pub dropped_late: usize,
    pub latest_norm_index: Option<f64>,
}

impl LearnerState {
    fn new(learner_id: &str, ts: u64) -> Self {
        Self {
            learner_id: learner_id.into(),
            recent: VecDeque::new(),
            presence: Presence::Active,
            last_seen: ts,
            last_timestamp: None,
            events: 0,
            invalid_frames: 0,
            dropped_late: 0,
            latest_norm_index: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerRow {
    pub learner_id: String,
    pub presence: Presence,
    pub last_seen: u64,
    pub events: usize,
    pub invalid_frames: usize,
    pub latest_norm_index: Option<f64>,
}

/// Consistent view of a session for live dashboards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub now_ms: u64,
    pub trailing: WindowStats,
    pub learners: Vec<LearnerRow>,
    pub total_events: usize,
    pub dropped_events: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ApplyOutcome {
    pub accepted: bool,
    pub alerts: Vec<Alert>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Arm {
    armed: bool,
    last_fired: Option<u64>,
}

impl Default for Arm {
    fn default() -> Self {
        Self {
            armed: true,
            last_fired: None,
        }
    }
}

impl Arm {
    fn may_fire(&self, now: u64, cooldown: u64) -> bool {
        self.armed && self.last_fired.is_none_or(|t| now.saturating_sub(t) >= cooldown)
    }

    fn fire(&mut self, now: u64) {
        self.armed = false;
        self.last_fired = Some(now);
    }
}

/// Analytics state of one session; mutated only through [`SessionState::apply`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub config: AnalyticsConfig,
    pub learners: BTreeMap<String, LearnerState>,
    /// Every accepted prediction in arrival order.
    pub history: Vec<PredictionEvent>,
    pub now_ms: u64,
    pub dropped_events: usize,
    pub alerts: Vec<Alert>,
    class_arm: Arm,
    state_arms: [Arm; STATES],
}

impl SessionState {
    pub fn new(session_id: impl Into<String>, config: AnalyticsConfig) -> Result<Self, AnalyticsError> {
        config.validate()?;
        Ok(Self {
            session_id: session_id.into(),
            config,
            learners: BTreeMap::new(),
            history: Vec::new(),
            now_ms: 0,
            dropped_events: 0,
            alerts: Vec::new(),
            class_arm: Arm::default(),
            state_arms: Default::default(),
        })
    }

    /// Convenience wrapper around [`SessionState::apply`] for predictions.
    pub fn ingest(&mut self, ev: PredictionEvent) -> Result<ApplyOutcome, AnalyticsError> {
        self.apply(&SessionEvent::Prediction(ev))
    }

    /// Applies one logged event. Events older than a learner's latest
    /// accepted timestamp are dropped and counted, not rejected.
    pub fn apply(&mut self, event: &SessionEvent) -> Result<ApplyOutcome, AnalyticsError> {
        if event.session_id() != self.session_id {
            return Err(AnalyticsError::WrongSession {
                expected: self.session_id.clone(),
                found: event.session_id().into(),
            });
        }
        let ts = event.timestamp_ms();
        match event {
            SessionEvent::ConfigChanged { config, .. } => {
                config.validate()?;
                self.config = config.clone();
            }
            SessionEvent::LearnerJoined { learner_id, .. } => {
                let l = self
                    .learners
                    .entry(learner_id.clone())
                    .or_insert_with(|| LearnerState::new(learner_id, ts));
                l.last_seen = l.last_seen.max(ts);
            }
            SessionEvent::InvalidFrame { learner_id, .. } => {
                let l = self
                    .learners
                    .entry(learner_id.clone())
                    .or_insert_with(|| LearnerState::new(learner_id, ts));
                if l.last_timestamp.is_some_and(|t| ts < t) {
                    l.dropped_late += 1;
                    self.dropped_events += 1;
                    return Ok(ApplyOutcome::default());
                }
                l.last_timestamp = Some(ts);
                l.last_seen = ts;
                l.invalid_frames += 1;
            }
            SessionEvent::Prediction(ev) => {
                ev.check()?;
                let l = self
                    .learners
                    .entry(ev.learner_id.clone())
                    .or_insert_with(|| LearnerState::new(&ev.learner_id, ts));
                if l.last_timestamp.is_some_and(|t| ts < t) {
                    l.dropped_late += 1;
                    self.dropped_events += 1;
                    return Ok(ApplyOutcome::default());
                }
                l.last_timestamp = Some(ts);
                l.last_seen = ts;
                l.events += 1;
                l.latest_norm_index = Some(ev.norm_index);
                l.recent.push_back(ev.clone());
                self.history.push(ev.clone());
            }
        }
        self.now_ms = self.now_ms.max(ts);
        let mut alerts = self.update_presence();
        if matches!(event, SessionEvent::Prediction(_)) {
            alerts.extend(self.check_thresholds());
        }
        self.alerts.extend(alerts.iter().cloned());
        Ok(ApplyOutcome { accepted: true, alerts })
    }

    fn trailing_start(&self) -> u64 {
        (self.now_ms + 1).saturating_sub(self.config.window_ms)
    }

    fn update_presence(&mut self) -> Vec<Alert> {
        let now = self.now_ms;
        let cutoff = self.trailing_start();
        let mut alerts = Vec::new();
        for l in self.learners.values_mut() {
            while l.recent.front().is_some_and(|e| e.timestamp_ms < cutoff) {
                l.recent.pop_front();
            }
            let idle = now.saturating_sub(l.last_seen);
            let presence = if idle >= self.config.absent_after_ms {
                Presence::Absent
            } else if idle >= self.config.stale_after_ms {
                Presence::Stale
            } else {
                Presence::Active
            };
            if presence == Presence::Absent && l.presence != Presence::Absent {
                alerts.push(Alert {
                    kind: AlertKind::LearnerAbsent,
                    timestamp_ms: now,
                    message: format!("learner {} is absent", l.learner_id),
                    severity: Severity::Info,
                    context: AlertContext {
                        state: None,
                        learner_id: Some(l.learner_id.clone()),
                        value: idle as f64,
                        threshold: self.config.absent_after_ms as f64,
                    },
                });
            }
            l.presence = presence;
        }
        alerts
    }

    /// Trailing-window statistics over non-absent learners.
    pub fn trailing_stats(&self) -> WindowStats {
        let events = self
            .learners
            .values()
            .filter(|l| l.presence != Presence::Absent)
            .flat_map(|l| l.recent.iter());
        window_stats_of(events, self.trailing_start(), self.now_ms + 1)
    }

    fn check_thresholds(&mut self) -> Vec<Alert> {
        let stats = self.trailing_stats();
        let now = self.now_ms;
        let cfg = &self.config;
        let mut alerts = Vec::new();
        if let Some(mean) = stats.mean_norm_index {
            if mean > cfg.disengaged_threshold + cfg.hysteresis {
                self.class_arm.armed = true;
            }
            if mean < cfg.disengaged_threshold && self.class_arm.may_fire(now, cfg.cooldown_ms) {
                self.class_arm.fire(now);
                alerts.push(Alert {
                    kind: AlertKind::ClassDisengaged,
                    timestamp_ms: now,
                    message: DISENGAGED_MESSAGE.into(),
                    severity: Severity::Warning,
                    context: AlertContext {
                        state: None,
                        learner_id: None,
                        value: mean,
                        threshold: cfg.disengaged_threshold,
                    },
                });
            }
        }
        if let Some(means) = stats.mean_intensity {
            for st in AffectiveState::ALL {
                let i = st.index();
                let level = means[i] / 3.0;
                let threshold = cfg.elevation_threshold[i];
                let arm = &mut self.state_arms[i];
                if level < threshold - cfg.hysteresis {
                    arm.armed = true;
                }
                if level > threshold && arm.may_fire(now, cfg.cooldown_ms) {
                    arm.fire(now);
                    alerts.push(Alert {
                        kind: AlertKind::StateElevated,
                        timestamp_ms: now,
                        message: format!("{} is elevated ({:.0}%)", st.name(), level * 100.0),
                        severity: Severity::Info,
                        context: AlertContext {
                            state: Some(st),
                            learner_id: None,
                            value: level,
                            threshold,
                        },
                    });
                }
            }
        }
        alerts
    }

    /// Statistics over `[start, end)` from the full history, excluding
    /// learners currently absent.
    pub fn window_stats(&self, start: u64, end: u64) -> Result<WindowStats, AnalyticsError> {
        if start >= end {
            return Err(AnalyticsError::Window { start, end });
        }
        let present: BTreeSet<&str> = self
            .learners
            .values()
            .filter(|l| l.presence != Presence::Absent)
            .map(|l| l.learner_id.as_str())
            .collect();
        let events = self.history.iter().filter(|e| present.contains(e.learner_id.as_str()));
        Ok(window_stats_of(events, start, end))
    }

    pub fn learner_rows(&self) -> Vec<LearnerRow> {
        self.learners
            .values()
            .map(|l| LearnerRow {
                learner_id: l.learner_id.clone(),
                presence: l.presence,
                last_seen: l.last_seen,
                events: l.events,
                invalid_frames: l.invalid_frames,
                latest_norm_index: l.latest_norm_index,
            })
            .collect()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            now_ms: self.now_ms,
            trailing: self.trailing_stats(),
            learners: self.learner_rows(),
            total_events: self.history.len(),
            dropped_events: self.dropped_events,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affectmodel::AffectiveLevels;

    fn ev(learner: &str, ts: u64, norm: f64) -> PredictionEvent {
        let probs = AffectiveStateProbs::one_hot(AffectiveLevels::new([0, 1, 0, 0]).unwrap());
        PredictionEvent {
            session_id: "s".into(),
            learner_id: learner.into(),
            timestamp_ms: ts,
            probs,
            intensities: probs_to_intensities(&probs),
            raw_index: 0.0,
            norm_index: norm,
        }
    }

    #[test]
    fn two_learner_class_mean_alerts() {
        let mut s = SessionState::new("s", AnalyticsConfig::default()).unwrap();
        assert!(s.ingest(ev("a", 0, 0.2)).unwrap().alerts.iter().any(|a| a.kind == AlertKind::ClassDisengaged));
        assert!(s.ingest(ev("b", 0, 0.4)).unwrap().alerts.is_empty());
        assert!((s.trailing_stats().mean_norm_index.unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(s.alerts[0].message, DISENGAGED_MESSAGE);
    }

    #[test]
    fn late_events_are_dropped_and_counted() {
        let mut s = SessionState::new("s", AnalyticsConfig::default()).unwrap();
        s.ingest(ev("a", 1000, 0.9)).unwrap();
        let out = s.ingest(ev("a", 999, 0.9)).unwrap();
        assert!(!out.accepted);
        assert_eq!(s.dropped_events, 1);
        assert_eq!(s.history.len(), 1);
        // equal timestamps are fine
        assert!(s.ingest(ev("a", 1000, 0.9)).unwrap().accepted);
    }

    #[test]
    fn wrong_session_is_rejected() {
        let mut s = SessionState::new("other", AnalyticsConfig::default()).unwrap();
        assert!(matches!(s.ingest(ev("a", 0, 0.5)), Err(AnalyticsError::WrongSession { .. })));
    }

    #[test]
    fn presence_transitions_and_absent_alert() {
        let mut s = SessionState::new("s", AnalyticsConfig::default()).unwrap();
        s.ingest(ev("a", 0, 0.9)).unwrap();
        s.ingest(ev("b", 15_000, 0.9)).unwrap();
        assert_eq!(s.learners["a"].presence, Presence::Stale);
        let out = s.ingest(ev("b", 30_000, 0.9)).unwrap();
        assert_eq!(s.learners["a"].presence, Presence::Absent);
        assert_eq!(out.alerts.len(), 1);
        assert_eq!(out.alerts[0].kind, AlertKind::LearnerAbsent);
        assert!(s.ingest(ev("b", 31_000, 0.9)).unwrap().alerts.is_empty());
        assert_eq!(s.trailing_stats().active_learner_count, 1);
    }

    #[test]
    fn empty_window_has_no_means() {
        let s = SessionState::new("s", AnalyticsConfig::default()).unwrap();
        let w = s.window_stats(0, 10).unwrap();
        assert_eq!(w.mean_norm_index, None);
        assert_eq!(w.active_learner_count, 0);
        assert!(s.window_stats(5, 5).is_err());
    }
}
