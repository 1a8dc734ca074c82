//! Versioned JSON messages exchanged over the session channel.
//!
//! Every message is an object with a protocol version `v` and a `type` tag;
//! the remaining fields depend on the type.

use attend_core::analytics::{Alert, AnalyticsConfig, Snapshot};
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameEncoding {
    /// Base64 PNG (any colour type; converted to grayscale).
    Png,
    /// Base64 8-bit grayscale pixels, row-major; needs `width` and `height`.
    Gray,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientBody {
    JoinLearner {
        name: String,
    },
    FrameUpload {
        timestamp_ms: u64,
        encoding: FrameEncoding,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        width: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        height: Option<usize>,
        payload: String,
    },
    ProbsUpload {
        timestamp_ms: u64,
        probs: [[f64; 4]; 4],
    },
    InstructorSubscribe,
    SetThreshold {
        disengaged_threshold: f64,
    },
    CloseSession,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientMessage {
    pub v: u32,
    #[serde(flatten)]
    pub body: ClientBody,
}

impl ClientMessage {
    pub fn new(body: ClientBody) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            body,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Live,
    Closed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    BadMessage,
    BadFrame,
    BadProbs,
    BadConfig,
    NoSession,
    NoReport,
    SessionClosed,
    Unauthorized,
    Forbidden,
    NotJoined,
    Unavailable,
    Internal,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learner_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<u64>,
    /// Accepted prediction events in the session after this message.
    pub seq: usize,
    /// The frame held no usable face.
    pub invalid: bool,
    /// Discarded by the per-learner rate limit.
    pub throttled: bool,
    /// Discarded because it is older than the learner's latest event.
    pub late: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticsUpdate {
    pub session_id: String,
    pub status: SessionStatus,
    pub config: AnalyticsConfig,
    #[serde(flatten)]
    pub snapshot: Snapshot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum ServerBody {
    Ack(Ack),
    AnalyticsUpdate(AnalyticsUpdate),
    AlertPush { alert: Alert },
    ReportReady { report_id: String },
    Error { code: ErrorCode, text: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerMessage {
    pub v: u32,
    #[serde(flatten)]
    pub body: ServerBody,
}

impl ServerMessage {
    pub fn new(body: ServerBody) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            body,
        }
    }

    pub fn error(code: ErrorCode, text: impl Into<String>) -> Self {
        Self::new(ServerBody::Error { code, text: text.into() })
    }
}

pub fn encode<T: Serialize>(msg: &T) -> String {
    serde_json::to_string(msg).expect("message serializes")
}

/// Parses a client message, rejecting unknown protocol versions.
pub fn decode_client(text: &str) -> Result<ClientMessage, String> {
    let msg: ClientMessage = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if msg.v != PROTOCOL_VERSION {
        return Err(format!("unsupported protocol version {}", msg.v));
    }
    Ok(msg)
}

pub fn decode_server(text: &str) -> Result<ServerMessage, String> {
    serde_json::from_str(text).map_err(|e| e.to_string())
}
