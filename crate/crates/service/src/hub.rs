use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use attend_core::affectmodel::{load_weights, AffectModel, AffectiveStateProbs};
use attend_core::analytics::{
    build_report, parse_event_line, replay, report_json, to_event_line, Alert, AnalyticsConfig, PredictionEvent, SessionEvent, SessionMeta,
    SessionState,
};
use attend_core::facegate::{gate_frame, load_cascade, Cascade, Gate};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, Mutex};

use crate::config::ServiceConfig;
use crate::frames::decode_frame;
use crate::protocol::{Ack, AnalyticsUpdate, FrameEncoding, SessionStatus};
use crate::ServiceError;

/// Row-sum tolerance for uploaded probability matrices.
pub const PROBS_TOLERANCE: f64 = 1e-4;
pub const EVENTS_FILE: &str = "events.ndjson";
pub const RECORD_FILE: &str = "session.json";
pub const REPORT_FILE: &str = "report.json";
const REPORT_PREFIX: &str = "r-";

/// An encoded frame as received from a learner.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub timestamp_ms: u64,
    pub encoding: FrameEncoding,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub payload: String,
}

/// Face gate and affect model used for frame uploads.
pub struct Engine {
    pub cascade: Cascade,
    pub model: AffectModel,
}

impl Engine {
    pub fn load(cascade: &Path, model: &Path) -> Result<Self, ServiceError> {
        let cascade = load_cascade(cascade).map_err(|e| ServiceError::Load {
            what: cascade.display().to_string(),
            msg: e.to_string(),
        })?;
        let model = load_weights(model).map_err(|e| ServiceError::Load {
            what: model.display().to_string(),
            msg: e.to_string(),
        })?;
        Ok(Self { cascade, model })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Instructor,
    Learner,
}

/// Pushed to subscribers of a session.
#[derive(Clone, Debug, PartialEq)]
pub enum Notice {
    Alert(Alert),
    Closed { report_id: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub instructor_token: String,
    pub learner_token: String,
    pub config: AnalyticsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub title: String,
    pub status: SessionStatus,
    pub created_at_ms: u64,
    pub learners: usize,
    pub total_events: usize,
    pub report_id: Option<String>,
}

/// Persistent description of a session, enough to rebuild it from its event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub meta: SessionMeta,
    pub instructor_token: String,
    pub learner_token: String,
    pub initial_config: AnalyticsConfig,
    pub status: SessionStatus,
    pub report_id: Option<String>,
}

impl SessionRecord {
    /// Reads the record stored in a session directory.
    pub fn load(dir: &Path) -> Result<Self, ServiceError> {
        serde_json::from_slice(&std::fs::read(dir.join(RECORD_FILE))?).map_err(|e| ServiceError::BadMessage(e.to_string()))
    }
}

struct Core {
    state: SessionState,
    status: SessionStatus,
    record: SessionRecord,
    log: Option<BufWriter<File>>,
    joined: HashSet<String>,
    last_upload: HashMap<String, Instant>,
}

pub struct Session {
    pub id: String,
    pub meta: SessionMeta,
    instructor_token: String,
    learner_token: String,
    dir: PathBuf,
    notices: broadcast::Sender<Notice>,
    core: Mutex<Core>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("id", &self.id).field("meta", &self.meta).finish_non_exhaustive()
    }
}

impl Session {
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn event_log_path(&self) -> PathBuf {
        self.dir.join(EVENTS_FILE)
    }

    pub fn report_path(&self) -> PathBuf {
        self.dir.join(REPORT_FILE)
    }

    pub fn role_of(&self, token: &str) -> Option<Role> {
        if token == self.instructor_token {
            Some(Role::Instructor)
        } else if token == self.learner_token {
            Some(Role::Learner)
        } else {
            None
        }
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Notice> {
        self.notices.subscribe()
    }

    pub async fn update(&self) -> AnalyticsUpdate {
        let core = self.core.lock().await;
        AnalyticsUpdate {
            session_id: self.id.clone(),
            status: core.status,
            config: core.state.config.clone(),
            snapshot: core.state.snapshot(),
        }
    }

    pub async fn status(&self) -> SessionStatus {
        self.core.lock().await.status
    }

    /// Logs then applies one event, broadcasting any alerts it raises.
    fn commit(&self, core: &mut Core, ev: &SessionEvent) -> Result<bool, ServiceError> {
        let log = core.log.as_mut().ok_or_else(|| ServiceError::SessionClosed(self.id.clone()))?;
        log.write_all(to_event_line(ev).as_bytes())?;
        log.write_all(b"\n")?;
        log.flush()?;
        let outcome = core.state.apply(ev)?;
        for alert in outcome.alerts {
            let _ = self.notices.send(Notice::Alert(alert));
        }
        Ok(outcome.accepted)
    }

    fn ensure_live(&self, core: &Core) -> Result<(), ServiceError> {
        match core.status {
            SessionStatus::Live => Ok(()),
            SessionStatus::Closed => Err(ServiceError::SessionClosed(self.id.clone())),
        }
    }

    /// Registers the upload time; `false` when the learner is over the rate limit.
    fn admit(&self, core: &mut Core, learner: &str, min_interval: Duration) -> Result<bool, ServiceError> {
        self.ensure_live(core)?;
        if !core.joined.contains(learner) {
            return Err(ServiceError::NotJoined);
        }
        let now = Instant::now();
        if let Some(prev) = core.last_upload.get(learner) {
            if now.duration_since(*prev) < min_interval {
                return Ok(false);
            }
        }
        core.last_upload.insert(learner.to_owned(), now);
        Ok(true)
    }

    fn throttled(core: &Core, ts: u64) -> Ack {
        Ack {
            timestamp_ms: Some(ts),
            seq: core.state.history.len(),
            throttled: true,
            ..Ack::default()
        }
    }
}

pub struct Hub {
    config: ServiceConfig,
    engine: Option<Arc<Engine>>,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn random_hex(bytes: usize) -> String {
    (0..bytes).map(|_| format!("{:02x}", rand::random::<u8>())).collect()
}

fn valid_learner_name(name: &str) -> bool {
    (1..=64).contains(&name.len()) && name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), ServiceError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value).expect("record serializes"))?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// Parses complete log lines; a trailing partial line is dropped and its byte offset returned.
fn read_log_tolerant(path: &Path) -> Result<(Vec<SessionEvent>, u64), ServiceError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(e.into()),
    };
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let text = std::str::from_utf8(&bytes[..complete]).map_err(|e| ServiceError::BadMessage(e.to_string()))?;
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if !line.trim().is_empty() {
            events.push(parse_event_line(line, i + 1)?);
        }
    }
    Ok((events, complete as u64))
}

impl Hub {
    /// Builds a hub and restores every session found under the data directory.
    pub fn new(config: ServiceConfig, engine: Option<Engine>) -> Result<Self, ServiceError> {
        config.validate()?;
        std::fs::create_dir_all(config.sessions_dir())?;
        let hub = Self {
            config,
            engine: engine.map(Arc::new),
            sessions: RwLock::new(HashMap::new()),
        };
        hub.restore()?;
        Ok(hub)
    }

    /// Like [`Hub::new`], loading the engine from the configured paths when both are set.
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        let engine = match (&config.cascade_path, &config.model_path) {
            (Some(c), Some(m)) => Some(Engine::load(c, m)?),
            _ => None,
        };
        Self::new(config, engine)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn has_engine(&self) -> bool {
        self.engine.is_some()
    }

    fn restore(&self) -> Result<(), ServiceError> {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(self.config.sessions_dir())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(RECORD_FILE).is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            match self.restore_one(&dir) {
                Ok(session) => {
                    tracing::info!(session = %session.id, "restored session");
                    self.sessions.write().expect("session map").insert(session.id.clone(), session);
                }
                Err(e) => tracing::warn!(dir = %dir.display(), error = %e, "skipping unreadable session"),
            }
        }
        Ok(())
    }

    fn restore_one(&self, dir: &Path) -> Result<Arc<Session>, ServiceError> {
        let record = SessionRecord::load(dir)?;
        let log_path = dir.join(EVENTS_FILE);
        let (events, good_len) = read_log_tolerant(&log_path)?;
        let rebuilt = replay(&record.meta, record.initial_config.clone(), &events)?;
        let joined = events
            .iter()
            .filter_map(|e| match e {
                SessionEvent::LearnerJoined { learner_id, .. } => Some(learner_id.clone()),
                _ => None,
            })
            .collect();
        let log = match record.status {
            SessionStatus::Live => {
                let f = OpenOptions::new().create(true).append(true).open(&log_path)?;
                if f.metadata()?.len() > good_len {
                    f.set_len(good_len)?;
                }
                Some(BufWriter::new(f))
            }
            SessionStatus::Closed => {
                if !dir.join(REPORT_FILE).is_file() {
                    std::fs::write(dir.join(REPORT_FILE), report_json(&rebuilt.report))?;
                }
                None
            }
        };
        Ok(Arc::new(Session {
            id: record.meta.session_id.clone(),
            meta: record.meta.clone(),
            instructor_token: record.instructor_token.clone(),
            learner_token: record.learner_token.clone(),
            dir: dir.to_owned(),
            notices: broadcast::channel(1024).0,
            core: Mutex::new(Core {
                state: rebuilt.state,
                status: record.status,
                record,
                log,
                joined,
                last_upload: HashMap::new(),
            }),
        }))
    }

    pub fn create_session(&self, title: &str, config: Option<AnalyticsConfig>) -> Result<SessionInfo, ServiceError> {
        let config = config.unwrap_or_else(|| self.config.analytics.clone());
        config.validate().map_err(|e| ServiceError::BadConfig(e.to_string()))?;
        let id = loop {
            let id = format!("s-{}", random_hex(8));
            if !self.sessions.read().expect("session map").contains_key(&id) {
                break id;
            }
        };
        let meta = SessionMeta {
            session_id: id.clone(),
            title: title.to_owned(),
            created_at_ms: now_ms(),
        };
        let record = SessionRecord {
            meta: meta.clone(),
            instructor_token: random_hex(16),
            learner_token: random_hex(16),
            initial_config: config.clone(),
            status: SessionStatus::Live,
            report_id: None,
        };
        let dir = self.config.sessions_dir().join(&id);
        std::fs::create_dir_all(&dir)?;
        let log = OpenOptions::new().create(true).append(true).open(dir.join(EVENTS_FILE))?;
        write_json(&dir.join(RECORD_FILE), &record)?;
        let info = SessionInfo {
            session_id: id.clone(),
            instructor_token: record.instructor_token.clone(),
            learner_token: record.learner_token.clone(),
            config: config.clone(),
        };
        let session = Arc::new(Session {
            id: id.clone(),
            meta,
            instructor_token: record.instructor_token.clone(),
            learner_token: record.learner_token.clone(),
            dir,
            notices: broadcast::channel(1024).0,
            core: Mutex::new(Core {
                state: SessionState::new(id.clone(), config)?,
                status: SessionStatus::Live,
                record,
                log: Some(BufWriter::new(log)),
                joined: HashSet::new(),
                last_upload: HashMap::new(),
            }),
        });
        self.sessions.write().expect("session map").insert(id, session);
        Ok(info)
    }

    pub fn session(&self, id: &str) -> Result<Arc<Session>, ServiceError> {
        self.sessions
            .read()
            .expect("session map")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NoSession(id.to_owned()))
    }

    pub fn authorize(&self, id: &str, token: &str) -> Result<(Arc<Session>, Role), ServiceError> {
        let s = self.session(id)?;
        let role = s.role_of(token).ok_or(ServiceError::Unauthorized)?;
        Ok((s, role))
    }

    pub async fn list(&self) -> Vec<SessionSummary> {
        let mut sessions: Vec<Arc<Session>> = self.sessions.read().expect("session map").values().cloned().collect();
        sessions.sort_by(|a, b| (a.meta.created_at_ms, &a.id).cmp(&(b.meta.created_at_ms, &b.id)));
        let mut out = Vec::with_capacity(sessions.len());
        for s in sessions {
            let core = s.core.lock().await;
            out.push(SessionSummary {
                session_id: s.id.clone(),
                title: s.meta.title.clone(),
                status: core.status,
                created_at_ms: s.meta.created_at_ms,
                learners: core.joined.len(),
                total_events: core.state.history.len(),
                report_id: core.record.report_id.clone(),
            });
        }
        out
    }

    pub async fn join(&self, id: &str, name: &str) -> Result<Ack, ServiceError> {
        if !valid_learner_name(name) {
            return Err(ServiceError::BadMessage(format!("learner name {name:?} must be 1-64 characters of [A-Za-z0-9._-]")));
        }
        let s = self.session(id)?;
        let mut core = s.core.lock().await;
        s.ensure_live(&core)?;
        if !core.joined.contains(name) {
            let ev = SessionEvent::LearnerJoined {
                session_id: s.id.clone(),
                learner_id: name.to_owned(),
                timestamp_ms: core.state.now_ms,
            };
            s.commit(&mut core, &ev)?;
            core.joined.insert(name.to_owned());
        }
        Ok(Ack {
            learner_id: Some(name.to_owned()),
            seq: core.state.history.len(),
            ..Ack::default()
        })
    }

    fn min_interval(&self) -> Duration {
        Duration::from_millis(self.config.min_frame_interval_ms)
    }

    pub async fn ingest_probs(&self, id: &str, learner: &str, timestamp_ms: u64, probs: [[f64; 4]; 4]) -> Result<Ack, ServiceError> {
        let probs = AffectiveStateProbs::with_tolerance(probs, PROBS_TOLERANCE).map_err(|e| ServiceError::BadProbs(e.to_string()))?;
        let s = self.session(id)?;
        let mut core = s.core.lock().await;
        if !s.admit(&mut core, learner, self.min_interval())? {
            return Ok(Session::throttled(&core, timestamp_ms));
        }
        self.record_prediction(&s, &mut core, learner, timestamp_ms, probs)
    }

    fn record_prediction(
        &self,
        s: &Session,
        core: &mut Core,
        learner: &str,
        timestamp_ms: u64,
        probs: AffectiveStateProbs,
    ) -> Result<Ack, ServiceError> {
        let ev = SessionEvent::Prediction(PredictionEvent::from_probs(s.id.clone(), learner, timestamp_ms, probs, &self.config.index));
        let accepted = s.commit(core, &ev)?;
        Ok(Ack {
            timestamp_ms: Some(timestamp_ms),
            seq: core.state.history.len(),
            late: !accepted,
            ..Ack::default()
        })
    }

    /// Decodes, face-gates and classifies a frame, then records the prediction or an invalid frame.
    pub async fn ingest_frame(&self, id: &str, learner: &str, frame: Frame) -> Result<Ack, ServiceError> {
        let Frame {
            timestamp_ms,
            encoding,
            width,
            height,
            payload,
        } = frame;
        let engine = self.engine.clone().ok_or_else(|| ServiceError::Unavailable("no face model is loaded".into()))?;
        let s = self.session(id)?;
        {
            let mut core = s.core.lock().await;
            if !s.admit(&mut core, learner, self.min_interval())? {
                return Ok(Session::throttled(&core, timestamp_ms));
            }
        }
        let (max_bytes, max_side, params) = (self.config.max_frame_bytes, self.config.max_frame_side, self.config.detect);
        let outcome = tokio::task::spawn_blocking(move || -> Result<Option<AffectiveStateProbs>, ServiceError> {
            let img = decode_frame(encoding, width, height, &payload, max_bytes, max_side)?;
            match gate_frame(&engine.cascade, &img, &params) {
                Gate::Face { face, .. } => engine.model.predict(&face).map(Some).map_err(|e| ServiceError::BadFrame(e.to_string())),
                Gate::Invalid => Ok(None),
            }
        })
        .await
        .map_err(|e| ServiceError::Unavailable(e.to_string()))??;
        let mut core = s.core.lock().await;
        s.ensure_live(&core)?;
        match outcome {
            Some(probs) => self.record_prediction(&s, &mut core, learner, timestamp_ms, probs),
            None => {
                let ev = SessionEvent::InvalidFrame {
                    session_id: s.id.clone(),
                    learner_id: learner.to_owned(),
                    timestamp_ms,
                };
                let accepted = s.commit(&mut core, &ev)?;
                Ok(Ack {
                    timestamp_ms: Some(timestamp_ms),
                    seq: core.state.history.len(),
                    invalid: true,
                    late: !accepted,
                    ..Ack::default()
                })
            }
        }
    }

    pub async fn set_threshold(&self, id: &str, threshold: f64) -> Result<AnalyticsConfig, ServiceError> {
        let s = self.session(id)?;
        let mut core = s.core.lock().await;
        s.ensure_live(&core)?;
        let config = AnalyticsConfig {
            disengaged_threshold: threshold,
            ..core.state.config.clone()
        };
        config.validate().map_err(|e| ServiceError::BadConfig(e.to_string()))?;
        let ev = SessionEvent::ConfigChanged {
            session_id: s.id.clone(),
            timestamp_ms: core.state.now_ms,
            config: config.clone(),
        };
        s.commit(&mut core, &ev)?;
        Ok(config)
    }

    /// Closes a session and writes its report; closing again returns the same report id.
    pub async fn close(&self, id: &str) -> Result<String, ServiceError> {
        let s = self.session(id)?;
        let mut core = s.core.lock().await;
        if let Some(report_id) = &core.record.report_id {
            return Ok(report_id.clone());
        }
        if let Some(mut log) = core.log.take() {
            log.flush()?;
        }
        let report = build_report(&s.meta, &core.state);
        std::fs::write(s.report_path(), report_json(&report))?;
        let report_id = format!("{REPORT_PREFIX}{}", s.id);
        core.status = SessionStatus::Closed;
        core.record.status = SessionStatus::Closed;
        core.record.report_id = Some(report_id.clone());
        write_json(&s.dir.join(RECORD_FILE), &core.record)?;
        let _ = s.notices.send(Notice::Closed {
            report_id: report_id.clone(),
        });
        Ok(report_id)
    }

    pub async fn update(&self, id: &str) -> Result<AnalyticsUpdate, ServiceError> {
        Ok(self.session(id)?.update().await)
    }

    /// Report id of a closed session.
    pub async fn report_id(&self, id: &str) -> Result<String, ServiceError> {
        let s = self.session(id)?;
        let core = s.core.lock().await;
        core.record.report_id.clone().ok_or_else(|| ServiceError::NoReport(format!("session {id} is still live")))
    }

    /// Session owning a report id.
    pub fn report_session(&self, report_id: &str) -> Result<Arc<Session>, ServiceError> {
        let id = report_id
            .strip_prefix(REPORT_PREFIX)
            .ok_or_else(|| ServiceError::NoReport(report_id.to_owned()))?;
        self.session(id).map_err(|_| ServiceError::NoReport(report_id.to_owned()))
    }

    /// The stored report JSON of a closed session.
    pub async fn report(&self, report_id: &str) -> Result<String, ServiceError> {
        let s = self.report_session(report_id)?;
        if s.core.lock().await.record.report_id.as_deref() != Some(report_id) {
            return Err(ServiceError::NoReport(report_id.to_owned()));
        }
        Ok(std::fs::read_to_string(s.report_path())?)
    }
}
