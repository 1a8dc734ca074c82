use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use attend_core::analytics::AnalyticsConfig;
use futures_util::{SinkExt, StreamExt};
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc};
use tokio::time::{interval_at, Instant, MissedTickBehavior};

use crate::config::ServiceConfig;
use crate::hub::{Frame, Hub, Notice, Role, Session};
use crate::protocol::{decode_client, encode, Ack, ClientBody, ErrorCode, ServerBody, ServerMessage};
use crate::ServiceError;

type AppState = Arc<Hub>;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match self.code() {
            ErrorCode::BadMessage | ErrorCode::BadFrame | ErrorCode::BadProbs | ErrorCode::BadConfig | ErrorCode::NotJoined => {
                StatusCode::BAD_REQUEST
            }
            ErrorCode::NoSession | ErrorCode::NoReport => StatusCode::NOT_FOUND,
            ErrorCode::SessionClosed => StatusCode::CONFLICT,
            ErrorCode::Unauthorized => StatusCode::UNAUTHORIZED,
            ErrorCode::Forbidden => StatusCode::FORBIDDEN,
            ErrorCode::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "code": self.code(), "text": self.to_string() }))).into_response()
    }
}

pub fn router(hub: Arc<Hub>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}/join", post(join))
        .route("/sessions/{id}/close", post(close))
        .route("/sessions/{id}/config", put(set_config))
        .route("/sessions/{id}/snapshot", get(snapshot))
        .route("/sessions/{id}/report", get(session_report))
        .route("/reports/{report_id}", get(report))
        .route("/ws", get(ws_upgrade))
        .with_state(hub)
}

/// Serves until `shutdown` resolves.
pub async fn serve(hub: Arc<Hub>, listener: TcpListener, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    axum::serve(listener, router(hub)).with_graceful_shutdown(shutdown).await
}

/// Opens the hub, binds the configured address and serves until Ctrl-C.
pub async fn run(config: ServiceConfig) -> Result<(), ServiceError> {
    let hub = Arc::new(Hub::open(config)?);
    let listener = TcpListener::bind(hub.config().bind_addr()).await?;
    tracing::info!(addr = %listener.local_addr()?, frames = hub.has_engine(), "listening");
    serve(hub, listener, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers.get(header::AUTHORIZATION)?.to_str().ok()?.strip_prefix("Bearer ").map(str::trim)
}

fn require(hub: &Hub, id: &str, headers: &HeaderMap, role: Role) -> Result<Arc<Session>, ServiceError> {
    let (s, r) = hub.authorize(id, bearer(headers).ok_or(ServiceError::Unauthorized)?)?;
    if r != role {
        return Err(ServiceError::Forbidden(format!("{role:?} token required")));
    }
    Ok(s)
}

async fn health(State(hub): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "protocol": crate::protocol::PROTOCOL_VERSION,
        "sessions": hub.list().await.len(),
        "frames": hub.has_engine(),
    }))
}

async fn list_sessions(State(hub): State<AppState>) -> impl IntoResponse {
    Json(hub.list().await)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    #[serde(default)]
    title: String,
    #[serde(default)]
    config: Option<AnalyticsConfig>,
}

async fn create_session(State(hub): State<AppState>, body: Option<Json<CreateRequest>>) -> Result<Response, ServiceError> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let info = hub.create_session(&req.title, req.config)?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

#[derive(Debug, Deserialize)]
struct JoinRequest {
    name: String,
}

async fn join(
    State(hub): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(req): Json<JoinRequest>,
) -> Result<Json<Ack>, ServiceError> {
    require(&hub, &id, &headers, Role::Learner)?;
    Ok(Json(hub.join(&id, &req.name).await?))
}

async fn close(State(hub): State<AppState>, Path(id): Path<String>, headers: HeaderMap) -> Result<Json<serde_json::Value>, ServiceError> {
    require(&hub, &id, &headers, Role::Instructor)?;
    let report_id = hub.close(&id).await?;
    Ok(Json(json!({ "report_id": report_id })))
}

#[derive(Debug, Deserialize)]
struct ThresholdRequest {
    disengaged_threshold: f64,
}

async fn set_config(
    State(hub): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(req): Json<ThresholdRequest>,
) -> Result<Json<AnalyticsConfig>, ServiceError> {
    require(&hub, &id, &headers, Role::Instructor)?;
    Ok(Json(hub.set_threshold(&id, req.disengaged_threshold).await?))
}

async fn snapshot(State(hub): State<AppState>, Path(id): Path<String>, headers: HeaderMap) -> Result<Response, ServiceError> {
    let s = require(&hub, &id, &headers, Role::Instructor)?;
    Ok(Json(s.update().await).into_response())
}

fn json_body(text: String) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], text).into_response()
}

async fn session_report(State(hub): State<AppState>, Path(id): Path<String>, headers: HeaderMap) -> Result<Response, ServiceError> {
    require(&hub, &id, &headers, Role::Instructor)?;
    let report_id = hub.report_id(&id).await?;
    Ok(json_body(hub.report(&report_id).await?))
}

async fn report(State(hub): State<AppState>, Path(report_id): Path<String>, headers: HeaderMap) -> Result<Response, ServiceError> {
    let s = hub.report_session(&report_id)?;
    require(&hub, &s.id, &headers, Role::Instructor)?;
    Ok(json_body(hub.report(&report_id).await?))
}

#[derive(Debug, Deserialize)]
struct WsParams {
    session: String,
    #[serde(default)]
    token: Option<String>,
}

async fn ws_upgrade(
    State(hub): State<AppState>,
    Query(params): Query<WsParams>,
    headers: HeaderMap,
    ws: WebSocketUpgrade,
) -> Result<Response, ServiceError> {
    let token = params.token.as_deref().or_else(|| bearer(&headers)).ok_or(ServiceError::Unauthorized)?;
    let (session, role) = hub.authorize(&params.session, token)?;
    Ok(ws.on_upgrade(move |socket| connection(hub, session, role, socket)))
}

async fn connection(hub: Arc<Hub>, session: Arc<Session>, role: Role, socket: WebSocket) {
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::channel::<ServerMessage>(256);
    let writer = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            if sink.send(Message::Text(encode(&msg).into())).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    let mut learner: Option<String> = None;
    let mut subscription: Option<tokio::task::JoinHandle<()>> = None;
    while let Some(Ok(msg)) = stream.next().await {
        let reply = match msg {
            Message::Text(text) => handle(&hub, &session, role, &mut learner, &mut subscription, &tx, text.as_str()).await,
            Message::Binary(_) => Some(ServerMessage::error(ErrorCode::BadMessage, "binary messages are not supported")),
            Message::Close(_) => break,
            _ => None,
        };
        if let Some(reply) = reply {
            if tx.send(reply).await.is_err() {
                break;
            }
        }
    }
    if let Some(task) = subscription {
        task.abort();
    }
    drop(tx);
    let _ = writer.await;
}

fn reply(result: Result<ServerBody, ServiceError>) -> ServerMessage {
    match result {
        Ok(body) => ServerMessage::new(body),
        Err(e) => ServerMessage::error(e.code(), e.to_string()),
    }
}

async fn handle(
    hub: &Arc<Hub>,
    session: &Arc<Session>,
    role: Role,
    learner: &mut Option<String>,
    subscription: &mut Option<tokio::task::JoinHandle<()>>,
    tx: &mpsc::Sender<ServerMessage>,
    text: &str,
) -> Option<ServerMessage> {
    let msg = match decode_client(text) {
        Ok(m) => m,
        Err(e) => return Some(ServerMessage::error(ErrorCode::BadMessage, e)),
    };
    let needs = |want: Role| -> Result<(), ServiceError> {
        if role == want {
            Ok(())
        } else {
            Err(ServiceError::Forbidden(format!("{want:?} token required")))
        }
    };
    let learner_id = |l: &Option<String>| l.clone().ok_or(ServiceError::NotJoined);
    let id = session.id.as_str();
    let result = match msg.body {
        ClientBody::JoinLearner { name } => async {
            needs(Role::Learner)?;
            let ack = hub.join(id, &name).await?;
            *learner = Some(name);
            Ok(ServerBody::Ack(ack))
        }
        .await,
        ClientBody::ProbsUpload { timestamp_ms, probs } => async {
            needs(Role::Learner)?;
            Ok(ServerBody::Ack(hub.ingest_probs(id, &learner_id(learner)?, timestamp_ms, probs).await?))
        }
        .await,
        ClientBody::FrameUpload {
            timestamp_ms,
            encoding,
            width,
            height,
            payload,
        } => async {
            needs(Role::Learner)?;
            let l = learner_id(learner)?;
            let frame = Frame {
                timestamp_ms,
                encoding,
                width,
                height,
                payload,
            };
            Ok(ServerBody::Ack(hub.ingest_frame(id, &l, frame).await?))
        }
        .await,
        ClientBody::InstructorSubscribe => {
            if let Err(e) = needs(Role::Instructor) {
                return Some(reply(Err(e)));
            }
            if subscription.is_none() {
                let period = Duration::from_millis(hub.config().update_interval_ms);
                *subscription = Some(tokio::spawn(subscribe(session.clone(), tx.clone(), period)));
            }
            return None;
        }
        ClientBody::SetThreshold { disengaged_threshold } => async {
            needs(Role::Instructor)?;
            hub.set_threshold(id, disengaged_threshold).await?;
            Ok(ServerBody::Ack(Ack {
                seq: session.update().await.snapshot.total_events,
                ..Ack::default()
            }))
        }
        .await,
        ClientBody::CloseSession => async {
            needs(Role::Instructor)?;
            Ok(ServerBody::ReportReady {
                report_id: hub.close(id).await?,
            })
        }
        .await,
    };
    Some(reply(result))
}

/// Sends a snapshot at once, then one update per period plus alerts as they fire.
async fn subscribe(session: Arc<Session>, tx: mpsc::Sender<ServerMessage>, period: Duration) {
    let mut notices = session.subscribe();
    let send_update = |u| ServerMessage::new(ServerBody::AnalyticsUpdate(u));
    if tx.send(send_update(session.update().await)).await.is_err() {
        return;
    }
    let mut tick = interval_at(Instant::now() + period, period);
    tick.set_missed_tick_behavior(MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            _ = tick.tick() => {
                if tx.send(send_update(session.update().await)).await.is_err() {
                    return;
                }
            }
            notice = notices.recv() => match notice {
                Ok(Notice::Alert(alert)) => {
                    if tx.send(ServerMessage::new(ServerBody::AlertPush { alert })).await.is_err() {
                        return;
                    }
                }
                Ok(Notice::Closed { report_id }) => {
                    let _ = tx.send(send_update(session.update().await)).await;
                    let _ = tx.send(ServerMessage::new(ServerBody::ReportReady { report_id })).await;
                    return;
                }
                Err(broadcast::error::RecvError::Lagged(n)) => tracing::warn!(session = %session.id, skipped = n, "subscriber lagged"),
                Err(broadcast::error::RecvError::Closed) => return,
            },
        }
    }
}
