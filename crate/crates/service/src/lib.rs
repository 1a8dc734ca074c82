//! Live multi-session attentiveness service.
//!
//! Learners stream frames or probability matrices over a WebSocket channel;
//! each session folds them into analytics, pushes updates and alerts to
//! subscribed instructors, appends every state change to an NDJSON event log
//! and writes a lecture report on close. Sessions are restored at startup by
//! replaying their logs.

pub mod config;
pub mod frames;
pub mod harness;
pub mod hub;
pub mod protocol;
pub mod server;

use attend_core::analytics::AnalyticsError;
use thiserror::Error;

pub use config::{ConfigError, ServiceConfig};
pub use hub::{Engine, Frame, Hub, Notice, Role, SessionInfo, SessionRecord, SessionSummary};
pub use protocol::ErrorCode;
pub use server::{router, run, serve};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("no session {0}")]
    NoSession(String),
    #[error("no report {0}")]
    NoReport(String),
    #[error("session {0} is closed")]
    SessionClosed(String),
    #[error("bad frame: {0}")]
    BadFrame(String),
    #[error("bad probabilities: {0}")]
    BadProbs(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("bad message: {0}")]
    BadMessage(String),
    #[error("missing or wrong token")]
    Unauthorized,
    #[error("not allowed for this role: {0}")]
    Forbidden(String),
    #[error("learner has not joined the session")]
    NotJoined,
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("analytics: {0}")]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("loading {what}: {msg}")]
    Load { what: String, msg: String },
}

impl ServiceError {
    pub fn code(&self) -> ErrorCode {
        match self {
            ServiceError::NoSession(_) => ErrorCode::NoSession,
            ServiceError::NoReport(_) => ErrorCode::NoReport,
            ServiceError::SessionClosed(_) => ErrorCode::SessionClosed,
            ServiceError::BadFrame(_) => ErrorCode::BadFrame,
            ServiceError::BadProbs(_) => ErrorCode::BadProbs,
            ServiceError::BadConfig(_) | ServiceError::Config(_) => ErrorCode::BadConfig,
            ServiceError::BadMessage(_) => ErrorCode::BadMessage,
            ServiceError::Unauthorized => ErrorCode::Unauthorized,
            ServiceError::Forbidden(_) => ErrorCode::Forbidden,
            ServiceError::NotJoined => ErrorCode::NotJoined,
            ServiceError::Unavailable(_) => ErrorCode::Unavailable,
            ServiceError::Io(_) | ServiceError::Analytics(_) | ServiceError::Load { .. } => ErrorCode::Internal,
        }
    }
}
