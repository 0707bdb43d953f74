//! OpenAI-compatible streaming gateway in front of a device and a server
//! upstream.
//!
//! Each `POST /v1/chat/completions` request is dispatched with the current
//! policy snapshot: the server is issued immediately or not at all, the
//! device after its planned wait. The first upstream to produce a token
//! wins and the other is aborted. Decode may then migrate once to the
//! cheaper endpoint while a paced buffer hides the handoff from the client.

pub mod config;
pub mod mock;
pub mod policy;
pub mod session;
pub mod session_task;
pub mod upstream;

use std::convert::Infallible;
use std::future::Future;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use disco_core::profiles::{DeviceTtftModel, ServerTtftEcdf};
use disco_core::Endpoint;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::mpsc;

pub use config::GatewayConfig;
pub use policy::{PolicyStore, Refresh, Snapshot};
pub use session_task::DiscoSummary;
use upstream::UpstreamClient;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] disco_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Prompt length estimate: one token per four characters, at least one.
pub fn estimate_prompt_tokens(text: &str) -> u32 {
    (text.chars().count() as u32).div_ceil(4).max(1)
}

/// Shared state of a running gateway.
#[derive(Debug)]
pub struct AppState {
    pub cfg: GatewayConfig,
    pub store: PolicyStore,
    pub device_model: DeviceTtftModel,
    device: UpstreamClient,
    server: UpstreamClient,
    draining: AtomicBool,
    active: AtomicUsize,
    seq: AtomicU64,
}

impl AppState {
    pub fn new(cfg: GatewayConfig) -> Result<Arc<Self>, GatewayError> {
        cfg.validate()?;
        let grace = Duration::from_millis(cfg.cancel_grace_ms);
        let store = PolicyStore::new(
            cfg.budget.kind(),
            cfg.budget.b,
            cfg.budget.alpha,
            ServerTtftEcdf::new(cfg.server.ttft_samples.clone())?,
            cfg.prompt_lengths.clone(),
            cfg.refresh_window,
        )?;
        Ok(Arc::new(Self {
            device_model: cfg.device_model()?,
            device: UpstreamClient::new(cfg.upstream(Endpoint::Device).clone(), grace)?,
            server: UpstreamClient::new(cfg.upstream(Endpoint::Server).clone(), grace)?,
            store,
            cfg,
            draining: AtomicBool::new(false),
            active: AtomicUsize::new(0),
            seq: AtomicU64::new(0),
        }))
    }

    pub fn upstream(&self, e: Endpoint) -> &UpstreamClient {
        match e {
            Endpoint::Device => &self.device,
            Endpoint::Server => &self.server,
        }
    }

    pub fn active_sessions(&self) -> usize {
        self.active.load(Ordering::SeqCst)
    }

    /// Stops accepting new sessions; in-flight ones run to completion.
    pub fn start_drain(&self) {
        self.draining.store(true, Ordering::SeqCst);
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/health", get(health))
        .route("/admin/refresh", post(refresh))
        .route("/admin/policy", get(policy))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then drains in-flight streams.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), GatewayError> {
    if state.cfg.refresh_interval_ms > 0 {
        let s = state.clone();
        let every = Duration::from_millis(state.cfg.refresh_interval_ms);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            tick.tick().await;
            loop {
                tick.tick().await;
                if let Err(e) = s.store.refresh() {
                    tracing::warn!("periodic refresh failed: {e}");
                }
            }
        });
    }
    let drain_state = state.clone();
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async move {
            shutdown.await;
            drain_state.start_drain();
            tracing::info!("draining {} active sessions", drain_state.active_sessions());
        })
        .await?;
    Ok(())
}

/// Decrements the active-session count when the session task ends.
struct ActiveGuard(Arc<AppState>);

impl Drop for ActiveGuard {
    fn drop(&mut self) {
        self.0.active.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Debug, Deserialize)]
struct ChatRequest {
    #[serde(default)]
    model: Option<String>,
    messages: Vec<Value>,
    #[serde(default)]
    stream: bool,
    #[serde(default)]
    max_tokens: Option<u32>,
    #[serde(default)]
    max_completion_tokens: Option<u32>,
}

fn message_text(m: &Value) -> String {
    match m.get("content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Array(parts)) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        _ => String::new(),
    }
}

fn api_error(status: StatusCode, msg: impl Into<String>) -> Response {
    (
        status,
        Json(json!({"error": {"message": msg.into(), "type": "invalid_request_error"}})),
    )
        .into_response()
}

async fn chat(State(app): State<Arc<AppState>>, headers: HeaderMap, body: String) -> Response {
    if app.draining.load(Ordering::SeqCst) {
        return api_error(StatusCode::SERVICE_UNAVAILABLE, "gateway is draining");
    }
    let req: ChatRequest = match serde_json::from_str(&body) {
        Ok(r) => r,
        Err(e) => return api_error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    if !req.stream {
        return api_error(StatusCode::BAD_REQUEST, "only \"stream\": true is supported");
    }
    let prompt_text = req
        .messages
        .iter()
        .map(message_text)
        .collect::<Vec<_>>()
        .join("\n");
    if prompt_text.trim().is_empty() {
        return api_error(StatusCode::BAD_REQUEST, "prompt is empty");
    }
    let lambda = match headers.get("x-disco-lambda").map(|v| v.to_str().map(str::parse::<f64>)) {
        None => None,
        Some(Ok(Ok(v))) if v.is_finite() && v >= 0.0 => Some(v),
        Some(_) => return api_error(StatusCode::BAD_REQUEST, "x-disco-lambda must be a non-negative number"),
    };
    let max_tokens = req
        .max_completion_tokens
        .or(req.max_tokens)
        .unwrap_or(app.cfg.default_max_tokens)
        .max(1);
    let prompt_len = estimate_prompt_tokens(&prompt_text);
    app.store.observe_prompt_len(prompt_len);
    let id = app.seq.fetch_add(1, Ordering::SeqCst);
    let prepared = session_task::Prepared {
        req_id: format!("chatcmpl-disco-{id}"),
        model: req.model.unwrap_or_else(|| "disco".into()),
        messages: req.messages,
        prompt_text,
        prompt_len,
        max_tokens,
        lambda,
    };

    // the session keeps this snapshot even if a refresh swaps it
    let snap = app.store.current();
    let (tx, rx) = mpsc::channel::<Option<Value>>(64);
    app.active.fetch_add(1, Ordering::SeqCst);
    let guard = ActiveGuard(app.clone());
    tokio::spawn(async move {
        let _guard = guard;
        session_task::run(app, snap, prepared, tx).await;
    });
    let events = futures::stream::unfold(rx, |mut rx| async move {
        let ev = match rx.recv().await? {
            Some(v) => Event::default().data(v.to_string()),
            None => Event::default().data("[DONE]"),
        };
        Some((Ok::<_, Infallible>(ev), rx))
    });
    Sse::new(events).into_response()
}

async fn health(State(app): State<Arc<AppState>>) -> Json<Value> {
    let snap = app.store.current();
    Json(json!({
        "status": if app.draining.load(Ordering::SeqCst) { "draining" } else { "ok" },
        "snapshot_id": snap.id,
        "active_sessions": app.active_sessions(),
        "window": app.store.ttft_window.len(),
    }))
}

async fn refresh(State(app): State<Arc<AppState>>) -> Response {
    match app.store.refresh() {
        Ok(r) => Json(r).into_response(),
        Err(e) => api_error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn policy(State(app): State<Arc<AppState>>) -> Json<Value> {
    let snap = app.store.current();
    Json(json!({"id": snap.id, "policy": snap.audit()}))
}
