#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use disco_core::cost::CostRates;
use disco_core::Endpoint;
use disco_gateway::config::{BudgetConfig, DeviceConfig, MigrationConfig, ServerConfig, UpstreamConfig};
use disco_gateway::mock::{MockScript, MockUpstream};
use disco_gateway::{AppState, GatewayConfig};
use eventsource_stream::Eventsource;
use futures::StreamExt;
use serde_json::{json, Value};
use tokio::sync::oneshot;

pub fn upstream(name: &str, role: Endpoint, url: String) -> UpstreamConfig {
    UpstreamConfig {
        name: name.into(),
        role,
        base_url: url,
        model: None,
        auth_env: None,
        timeout_ms: 10_000,
        shared_vocab: false,
    }
}

/// Device decode priced well above server decode.
pub fn device_pricey() -> CostRates {
    CostRates::new(1e-7, 1e-7, 1e6, 1e6, 1.0).unwrap()
}

pub fn config(device: &MockUpstream, server: &MockUpstream, budget: BudgetConfig) -> GatewayConfig {
    GatewayConfig {
        listen: "127.0.0.1:0".into(),
        upstreams: vec![
            upstream("phone", Endpoint::Device, device.base_url()),
            upstream("api", Endpoint::Server, server.base_url()),
        ],
        rates: device_pricey(),
        budget,
        device: DeviceConfig {
            k: 0.01,
            c: 0.1,
            decode_rate: 100.0,
        },
        server: ServerConfig {
            ttft_samples: vec![0.05, 0.06, 0.07, 0.08, 0.09, 0.1, 0.1, 0.1],
            tbt_s: 0.01,
        },
        migration: MigrationConfig::default(),
        r_c: Some(20.0),
        passthrough: false,
        cancel_grace_ms: 50,
        refresh_window: 16,
        refresh_interval_ms: 0,
        default_max_tokens: 16,
        prompt_lengths: vec![4, 8, 16, 32, 64],
    }
}

pub fn budget(b: f64, constraint: Endpoint) -> BudgetConfig {
    BudgetConfig {
        b,
        alpha: 0.05,
        constraint,
    }
}

pub struct Running {
    pub addr: SocketAddr,
    pub app: Arc<AppState>,
    stop: Option<oneshot::Sender<()>>,
    pub handle: tokio::task::JoinHandle<()>,
}

impl Running {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    /// Triggers graceful shutdown and waits for the drain to finish.
    pub async fn shutdown(mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        let _ = self.handle.await;
    }
}

pub async fn start(cfg: GatewayConfig) -> Running {
    let app = AppState::new(cfg).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = oneshot::channel::<()>();
    let a = app.clone();
    let handle = tokio::spawn(async move {
        disco_gateway::serve(listener, a, async {
            let _ = rx.await;
        })
        .await
        .unwrap();
    });
    Running {
        addr,
        app,
        stop: Some(tx),
        handle,
    }
}

/// One SSE payload and when it arrived.
#[derive(Debug, Clone)]
pub struct Chunk {
    pub data: String,
    pub at: Instant,
}

#[derive(Debug)]
pub struct Streamed {
    pub chunks: Vec<Chunk>,
}

impl Streamed {
    pub fn json(&self) -> Vec<Value> {
        self.chunks
            .iter()
            .filter(|c| c.data != "[DONE]")
            .map(|c| serde_json::from_str(&c.data).unwrap())
            .collect()
    }

    pub fn tokens(&self) -> Vec<(u64, String, String, Instant)> {
        self.chunks
            .iter()
            .filter(|c| c.data != "[DONE]")
            .filter_map(|c| {
                let v: Value = serde_json::from_str(&c.data).unwrap();
                let text = v.pointer("/choices/0/delta/content")?.as_str()?.to_string();
                let idx = v.pointer("/x_disco/index")?.as_u64()?;
                let ep = v.pointer("/x_disco/endpoint")?.as_str()?.to_string();
                Some((idx, text, ep, c.at))
            })
            .collect()
    }

    pub fn summary(&self) -> Value {
        self.json()
            .into_iter()
            .rev()
            .find_map(|v| v.get("x_disco").filter(|x| x.get("winner").is_some()).cloned())
            .expect("final chunk carries x_disco summary")
    }

    pub fn error(&self) -> Option<Value> {
        self.json().into_iter().find_map(|v| v.get("error").cloned())
    }

    /// Indices are 0..n in order, exactly one `[DONE]` and it comes last.
    pub fn check_well_formed(&self) -> Result<(), String> {
        let done = self.chunks.iter().filter(|c| c.data == "[DONE]").count();
        if done != 1 {
            return Err(format!("{done} [DONE] markers"));
        }
        if self.chunks.last().map(|c| c.data.as_str()) != Some("[DONE]") {
            return Err("[DONE] is not the last event".into());
        }
        for (i, (idx, ..)) in self.tokens().iter().enumerate() {
            if *idx != i as u64 {
                return Err(format!("token {i} carries index {idx}"));
            }
        }
        Ok(())
    }

    pub fn max_gap(&self) -> Duration {
        self.tokens()
            .windows(2)
            .map(|w| w[1].3 - w[0].3)
            .max()
            .unwrap_or_default()
    }
}

pub fn chat_body(prompt: &str, max_tokens: u32) -> Value {
    json!({
        "model": "test",
        "stream": true,
        "max_tokens": max_tokens,
        "messages": [{"role": "user", "content": prompt}],
    })
}

pub async fn chat(run: &Running, prompt: &str, max_tokens: u32) -> Streamed {
    chat_with(run, chat_body(prompt, max_tokens)).await
}

pub async fn chat_with(run: &Running, body: Value) -> Streamed {
    let resp = reqwest::Client::new()
        .post(run.url("/v1/chat/completions"))
        .json(&body)
        .send()
        .await
        .unwrap();
    assert!(resp.status().is_success(), "status {}", resp.status());
    let mut events = resp.bytes_stream().eventsource();
    let mut chunks = Vec::new();
    while let Some(ev) = events.next().await {
        let ev = ev.unwrap();
        chunks.push(Chunk {
            data: ev.data,
            at: Instant::now(),
        });
    }
    Streamed { chunks }
}

pub async fn mocks(device: MockScript, server: MockScript) -> (MockUpstream, MockUpstream) {
    (
        MockUpstream::start(device).await.unwrap(),
        MockUpstream::start(server).await.unwrap(),
    )
}

pub fn ms(v: u64) -> Duration {
    Duration::from_millis(v)
}

/// Polls until `f` holds or `timeout` passes.
pub async fn eventually(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let end = Instant::now() + timeout;
    while Instant::now() < end {
        if f() {
            return true;
        }
        tokio::time::sleep(ms(5)).await;
    }
    f()
}
