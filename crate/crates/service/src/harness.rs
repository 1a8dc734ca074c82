//! Load generator: N learners stream probability uploads at a fixed rate
//! while one subscribed instructor records every analytics update.

use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;
use tokio::net::TcpStream;
use tokio::sync::{oneshot, Mutex};
use tokio::time::{interval_at, Instant, MissedTickBehavior};
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

use crate::hub::SessionInfo;
use crate::protocol::{decode_server, encode, ClientBody, ClientMessage, ServerBody, ServerMessage};

type Socket = WebSocketStream<MaybeTlsStream<TcpStream>>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("websocket: {0}")]
    Ws(#[from] tokio_tungstenite::tungstenite::Error),
    #[error("protocol: {0}")]
    Protocol(String),
}

#[derive(Clone, Debug)]
pub struct LoadSpec {
    pub learners: usize,
    pub rate_hz: f64,
    pub duration: Duration,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct LoadReport {
    pub session_id: String,
    pub report_id: String,
    pub learners: usize,
    pub rate_hz: f64,
    pub duration_s: f64,
    pub sent: usize,
    pub accepted: usize,
    pub throttled: usize,
    pub late: usize,
    pub errors: usize,
    pub updates: usize,
    pub alerts: usize,
    /// Accepted events never reflected in an update.
    pub unobserved: usize,
    pub p50_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub max_latency_ms: f64,
}

impl LoadReport {
    pub fn error_free(&self) -> bool {
        self.errors == 0 && self.throttled == 0 && self.late == 0 && self.unobserved == 0
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

async fn send(ws: &mut Socket, body: ClientBody) -> Result<(), HarnessError> {
    ws.send(Message::text(encode(&ClientMessage::new(body)))).await?;
    Ok(())
}

async fn next_message(ws: &mut Socket) -> Result<Option<ServerMessage>, HarnessError> {
    while let Some(msg) = ws.next().await {
        match msg? {
            Message::Text(t) => return decode_server(t.as_str()).map(Some).map_err(HarnessError::Protocol),
            Message::Close(_) => return Ok(None),
            _ => {}
        }
    }
    Ok(None)
}

fn random_probs(rng: &mut StdRng) -> [[f64; 4]; 4] {
    std::array::from_fn(|_| {
        let raw: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.05..1.0));
        let s: f64 = raw.iter().sum();
        raw.map(|v| v / s)
    })
}

#[derive(Default)]
struct Observed {
    updates: Vec<(Instant, usize)>,
    alerts: usize,
    errors: usize,
}

#[derive(Default)]
struct LearnerLog {
    sent: Vec<(Instant, usize)>,
    throttled: usize,
    late: usize,
    errors: usize,
}

async fn learner(url: String, name: String, spec: LoadSpec, start: Instant, offset: Duration, seed: u64) -> LearnerLog {
    let mut log = LearnerLog::default();
    let result: Result<(), HarnessError> = async {
        let (mut ws, _) = connect_async(url.as_str()).await?;
        send(&mut ws, ClientBody::JoinLearner { name }).await?;
        match next_message(&mut ws).await? {
            Some(ServerMessage { body: ServerBody::Ack(_), .. }) => {}
            other => return Err(HarnessError::Protocol(format!("join answered with {other:?}"))),
        }
        let mut rng = StdRng::seed_from_u64(seed);
        let period = Duration::from_secs_f64(1.0 / spec.rate_hz);
        let mut tick = interval_at(start + offset, period);
        tick.set_missed_tick_behavior(MissedTickBehavior::Delay);
        loop {
            let at = tick.tick().await;
            if at.duration_since(start) >= spec.duration {
                break;
            }
            let sent_at = Instant::now();
            let timestamp_ms = sent_at.duration_since(start).as_millis() as u64;
            send(&mut ws, ClientBody::ProbsUpload { timestamp_ms, probs: random_probs(&mut rng) }).await?;
            match next_message(&mut ws).await? {
                Some(ServerMessage { body: ServerBody::Ack(a), .. }) if a.throttled => log.throttled += 1,
                Some(ServerMessage { body: ServerBody::Ack(a), .. }) if a.late => log.late += 1,
                Some(ServerMessage { body: ServerBody::Ack(a), .. }) => log.sent.push((sent_at, a.seq)),
                _ => log.errors += 1,
            }
        }
        let _ = ws.close(None).await;
        Ok(())
    }
    .await;
    if let Err(e) = result {
        tracing::warn!(error = %e, "learner connection failed");
        log.errors += 1;
    }
    log
}

async fn instructor(mut ws: Socket, observed: Arc<Mutex<Observed>>, ready: oneshot::Sender<()>) {
    let mut ready = Some(ready);
    send(&mut ws, ClientBody::InstructorSubscribe).await.ok();
    loop {
        let msg = match next_message(&mut ws).await {
            Ok(Some(m)) => m,
            Ok(None) => break,
            Err(_) => {
                observed.lock().await.errors += 1;
                break;
            }
        };
        let now = Instant::now();
        let mut o = observed.lock().await;
        match msg.body {
            ServerBody::AnalyticsUpdate(u) => {
                o.updates.push((now, u.snapshot.total_events));
                if let Some(tx) = ready.take() {
                    let _ = tx.send(());
                }
            }
            ServerBody::AlertPush { .. } => o.alerts += 1,
            ServerBody::ReportReady { .. } => break,
            _ => o.errors += 1,
        }
    }
}

/// Runs one load session against a server at `base_url` (e.g. `http://127.0.0.1:8080`).
pub async fn run_load(base_url: &str, spec: &LoadSpec) -> Result<LoadReport, HarnessError> {
    let base = base_url.trim_end_matches('/');
    let http = reqwest::Client::new();
    let info: SessionInfo = http
        .post(format!("{base}/sessions"))
        .json(&json!({ "title": "load test" }))
        .send()
        .await?
        .error_for_status()?
        .json()
        .await?;
    let ws_base = base.replacen("http", "ws", 1);
    let ws_url = |token: &str| format!("{ws_base}/ws?session={}&token={token}", info.session_id);

    let observed = Arc::new(Mutex::new(Observed::default()));
    let (ws, _) = connect_async(ws_url(&info.instructor_token).as_str()).await?;
    let (ready_tx, ready_rx) = oneshot::channel();
    let watcher = tokio::spawn(instructor(ws, observed.clone(), ready_tx));
    ready_rx.await.map_err(|_| HarnessError::Protocol("no initial snapshot".into()))?;

    let start = Instant::now() + Duration::from_millis(200);
    let period = Duration::from_secs_f64(1.0 / spec.rate_hz);
    let tasks: Vec<_> = (0..spec.learners)
        .map(|i| {
            let offset = period.mul_f64(i as f64 / spec.learners as f64);
            tokio::spawn(learner(
                ws_url(&info.learner_token),
                format!("learner-{i:02}"),
                spec.clone(),
                start,
                offset,
                spec.seed.wrapping_mul(1000).wrapping_add(i as u64),
            ))
        })
        .collect();
    let mut logs = Vec::new();
    for t in tasks {
        logs.push(t.await.map_err(|e| HarnessError::Protocol(e.to_string()))?);
    }
    let max_seq = logs.iter().flat_map(|l| l.sent.iter().map(|s| s.1)).max().unwrap_or(0);
    let settle = Instant::now() + Duration::from_secs(3);
    while Instant::now() < settle {
        if observed.lock().await.updates.last().is_some_and(|u| u.1 >= max_seq) {
            break;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }

    let closed: serde_json::Value = http
        .post(format!("{base}/sessions/{}/close", info.session_id))
        .bearer_auth(&info.instructor_token)
        .send()
        .await?
        .error_for_status()?
        .json()
        .await?;
    let _ = tokio::time::timeout(Duration::from_secs(5), watcher).await;
    let observed = observed.lock().await;

    let mut latencies = Vec::new();
    let mut unobserved = 0;
    for (sent_at, seq) in logs.iter().flat_map(|l| l.sent.iter()) {
        match observed.updates.iter().find(|(t, total)| *t >= *sent_at && *total >= *seq) {
            Some((t, _)) => latencies.push(t.duration_since(*sent_at).as_secs_f64() * 1000.0),
            None => unobserved += 1,
        }
    }
    latencies.sort_by(f64::total_cmp);
    Ok(LoadReport {
        session_id: info.session_id.clone(),
        report_id: closed["report_id"].as_str().unwrap_or_default().to_owned(),
        learners: spec.learners,
        rate_hz: spec.rate_hz,
        duration_s: spec.duration.as_secs_f64(),
        sent: logs.iter().map(|l| l.sent.len() + l.throttled + l.late + l.errors).sum(),
        accepted: logs.iter().map(|l| l.sent.len()).sum(),
        throttled: logs.iter().map(|l| l.throttled).sum(),
        late: logs.iter().map(|l| l.late).sum(),
        errors: logs.iter().map(|l| l.errors).sum::<usize>() + observed.errors,
        updates: observed.updates.len(),
        alerts: observed.alerts,
        unobserved,
        p50_latency_ms: percentile(&latencies, 0.50),
        p95_latency_ms: percentile(&latencies, 0.95),
        max_latency_ms: latencies.last().copied().unwrap_or(0.0),
    })
}
