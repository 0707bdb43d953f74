//! Streaming client for one OpenAI-compatible upstream.

use std::time::{Duration, Instant};

use eventsource_stream::Eventsource;
use futures::StreamExt;
use serde_json::Value;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;

use crate::config::UpstreamConfig;
use crate::GatewayError;

#[derive(Debug, Clone, PartialEq)]
pub enum UpEvent {
    Token(String),
    Done,
    Failed(String),
}

/// A live upstream request. Dropping it aborts the connection.
#[derive(Debug)]
pub struct UpstreamStream {
    pub rx: mpsc::Receiver<UpEvent>,
    pub issued: Instant,
    cancel: CancellationToken,
    task: Option<JoinHandle<()>>,
    grace: Duration,
}

impl UpstreamStream {
    pub async fn recv(&mut self) -> UpEvent {
        self.rx.recv().await.unwrap_or(UpEvent::Done)
    }

    /// Aborts the request. The task gets `grace` to unwind before it is
    /// killed outright.
    pub fn cancel(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.cancel.cancel();
        if let Some(task) = self.task.take() {
            let grace = self.grace;
            tokio::spawn(async move {
                let abort = task.abort_handle();
                if tokio::time::timeout(grace, task).await.is_err() {
                    abort.abort();
                }
            });
        }
    }
}

impl Drop for UpstreamStream {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[derive(Debug, Clone)]
pub struct UpstreamClient {
    pub cfg: UpstreamConfig,
    http: reqwest::Client,
    token: Option<String>,
    grace: Duration,
}

impl UpstreamClient {
    pub fn new(cfg: UpstreamConfig, cancel_grace: Duration) -> Result<Self, GatewayError> {
        let http = reqwest::Client::builder()
            .connect_timeout(cfg.timeout())
            .read_timeout(cfg.timeout())
            .build()
            .map_err(|e| GatewayError::Config(format!("upstream `{}`: {e}", cfg.name)))?;
        let token = cfg.auth_token();
        Ok(Self {
            cfg,
            http,
            token,
            grace: cancel_grace,
        })
    }

    /// Starts a streaming completion; tokens arrive on the returned channel.
    pub fn open(&self, body: Value) -> UpstreamStream {
        let (tx, rx) = mpsc::channel(256);
        let cancel = CancellationToken::new();
        let mut req = self.http.post(self.cfg.completions_url()).json(&body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let name = self.cfg.name.clone();
        let child = cancel.clone();
        let task = tokio::spawn(async move {
            tokio::select! {
                _ = child.cancelled() => {}
                _ = pump(req, &tx) => {}
            }
            tracing::debug!(upstream = %name, "upstream stream closed");
        });
        UpstreamStream {
            rx,
            issued: Instant::now(),
            cancel,
            task: Some(task),
            grace: self.grace,
        }
    }
}

/// Text of `choices[0].delta.content`, if any.
pub fn chunk_content(v: &Value) -> Option<&str> {
    v.get("choices")?
        .get(0)?
        .get("delta")?
        .get("content")?
        .as_str()
        .filter(|s| !s.is_empty())
}

async fn pump(req: reqwest::RequestBuilder, tx: &mpsc::Sender<UpEvent>) {
    let resp = match req.send().await {
        Ok(r) => r,
        Err(e) => {
            let _ = tx.send(UpEvent::Failed(e.to_string())).await;
            return;
        }
    };
    if !resp.status().is_success() {
        let _ = tx
            .send(UpEvent::Failed(format!("upstream status {}", resp.status())))
            .await;
        return;
    }
    let mut events = resp.bytes_stream().eventsource();
    while let Some(ev) = events.next().await {
        let ev = match ev {
            Ok(ev) => ev,
            Err(e) => {
                let _ = tx.send(UpEvent::Failed(e.to_string())).await;
                return;
            }
        };
        if ev.data.trim() == "[DONE]" {
            break;
        }
        let v: Value = match serde_json::from_str(&ev.data) {
            Ok(v) => v,
            Err(e) => {
                let _ = tx.send(UpEvent::Failed(format!("bad chunk: {e}"))).await;
                return;
            }
        };
        if let Some(err) = v.get("error") {
            let _ = tx.send(UpEvent::Failed(err.to_string())).await;
            return;
        }
        if let Some(text) = chunk_content(&v) {
            if tx.send(UpEvent::Token(text.to_string())).await.is_err() {
                return;
            }
        }
    }
    let _ = tx.send(UpEvent::Done).await;
}
