//! Scripted OpenAI-compatible upstream for tests and `serve --mock`.
//!
//! Token `i` of a response is the text `t{i} `. A continuation request
//! (`x_disco_transfer.next_index = k`) resumes numbering at `k`, so a
//! migrated stream reads the same as an unmigrated one.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use parking_lot::{Mutex, RwLock};
use serde_json::{json, Value};
use tokio::net::TcpListener;

use crate::estimate_prompt_tokens;

/// Time to first token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MockTtft {
    Fixed(Duration),
    /// `k * tokens + c` over the whole context (prompt plus any prefix).
    Linear { k_s: f64, c_s: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockScript {
    pub ttft: MockTtft,
    pub token_interval: Duration,
    /// Used when the request has no `max_tokens`.
    pub default_tokens: u32,
    /// Answer every request with 503.
    pub fail: bool,
}

impl MockScript {
    pub fn fixed(ttft: Duration, token_interval: Duration) -> Self {
        Self {
            ttft: MockTtft::Fixed(ttft),
            token_interval,
            default_tokens: 16,
            fail: false,
        }
    }

    pub fn linear(k_s: f64, c_s: f64, token_interval: Duration) -> Self {
        Self {
            ttft: MockTtft::Linear { k_s, c_s },
            token_interval,
            default_tokens: 16,
            fail: false,
        }
    }
}

#[derive(Debug)]
pub struct MockStats {
    pub requests: AtomicUsize,
    /// Streams dropped by the client before they finished.
    pub cancelled: AtomicUsize,
    pub completed: AtomicUsize,
    pub tokens_sent: AtomicUsize,
}

#[derive(Debug)]
struct Shared {
    script: RwLock<MockScript>,
    latency_scale_bits: AtomicU64,
    stats: MockStats,
    bodies: Mutex<Vec<Value>>,
}

/// A running mock upstream.
#[derive(Debug, Clone)]
pub struct MockUpstream {
    pub addr: SocketAddr,
    shared: Arc<Shared>,
}

impl MockUpstream {
    pub async fn start(script: MockScript) -> std::io::Result<Self> {
        Self::bind("127.0.0.1:0", script).await
    }

    pub async fn bind(addr: &str, script: MockScript) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            script: RwLock::new(script),
            latency_scale_bits: AtomicU64::new(1f64.to_bits()),
            stats: MockStats {
                requests: AtomicUsize::new(0),
                cancelled: AtomicUsize::new(0),
                completed: AtomicUsize::new(0),
                tokens_sent: AtomicUsize::new(0),
            },
            bodies: Mutex::new(Vec::new()),
        });
        let app = Router::new()
            .route("/v1/chat/completions", post(handle))
            .with_state(shared.clone());
        tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        Ok(Self { addr, shared })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stats(&self) -> &MockStats {
        &self.shared.stats
    }

    /// Request bodies received so far.
    pub fn bodies(&self) -> Vec<Value> {
        self.shared.bodies.lock().clone()
    }

    /// Multiplies every TTFT from now on.
    pub fn set_latency_scale(&self, s: f64) {
        self.shared.latency_scale_bits.store(s.to_bits(), Ordering::SeqCst);
    }

    pub fn set_fail(&self, fail: bool) {
        self.shared.script.write().fail = fail;
    }
}

fn context_text(body: &Value) -> String {
    body.get("messages")
        .and_then(Value::as_array)
        .map(|ms| {
            ms.iter()
                .filter_map(|m| m.get("content").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join("\n")
        })
        .unwrap_or_default()
}

/// Counts a stream as cancelled if it is dropped before the last chunk.
struct Guard {
    shared: Arc<Shared>,
    finished: bool,
}

impl Drop for Guard {
    fn drop(&mut self) {
        let c = if self.finished {
            &self.shared.stats.completed
        } else {
            &self.shared.stats.cancelled
        };
        c.fetch_add(1, Ordering::SeqCst);
    }
}

async fn handle(State(shared): State<Arc<Shared>>, Json(body): Json<Value>) -> Response {
    shared.stats.requests.fetch_add(1, Ordering::SeqCst);
    shared.bodies.lock().push(body.clone());
    let script = shared.script.read().clone();
    if script.fail {
        return (StatusCode::SERVICE_UNAVAILABLE, "mock upstream down").into_response();
    }
    let scale = f64::from_bits(shared.latency_scale_bits.load(Ordering::SeqCst));
    let ttft = match script.ttft {
        MockTtft::Fixed(d) => d.as_secs_f64(),
        MockTtft::Linear { k_s, c_s } => k_s * estimate_prompt_tokens(&context_text(&body)) as f64 + c_s,
    } * scale;
    let start = body
        .pointer("/x_disco_transfer/next_index")
        .and_then(Value::as_u64)
        .unwrap_or(0);
    let n = body
        .get("max_tokens")
        .and_then(Value::as_u64)
        .unwrap_or(script.default_tokens as u64);
    let interval = script.token_interval;

    let state = (
        Guard { shared, finished: false },
        0u64,
        Duration::from_secs_f64(ttft.max(0.0)),
    );
    let stream = futures::stream::unfold(state, move |(mut guard, i, first)| async move {
        if guard.finished {
            return None;
        }
        if i < n {
            tokio::time::sleep(if i == 0 { first } else { interval }).await;
            guard.shared.stats.tokens_sent.fetch_add(1, Ordering::SeqCst);
            let chunk = json!({
                "id": "mock",
                "object": "chat.completion.chunk",
                "choices": [{"index": 0, "delta": {"content": format!("t{} ", start + i)}, "finish_reason": null}],
            });
            Some((Ok::<_, Infallible>(Bytes::from(format!("data: {chunk}\n\n"))), (guard, i + 1, first)))
        } else {
            guard.finished = true;
            let end = json!({
                "id": "mock",
                "object": "chat.completion.chunk",
                "choices": [{"index": 0, "delta": {}, "finish_reason": "stop"}],
            });
            Some((Ok(Bytes::from(format!("data: {end}\n\ndata: [DONE]\n\n"))), (guard, i, first)))
        }
    });
    Response::builder()
        .header(header::CONTENT_TYPE, "text/event-stream")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(Body::from_stream(stream))
        .expect("static response parts")
}
