//! One streaming session: race, cancel the loser, pace, migrate once.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::{Duration, Instant};

use disco_core::cost::Phase as CostPhase;
use disco_core::dispatch::DispatchDecision;
use disco_core::migration::{buffer_target, delayed_tokens, migration_gain, should_migrate, PrefixPayload, PromptPayload, TransferPayload};
use disco_core::sim::Ledger;
use disco_core::Endpoint;
use serde::Serialize;
use serde_json::{json, Value};
use tokio::sync::mpsc;

use crate::policy::Snapshot;
use crate::session::{Phase, SessionState};
use crate::upstream::{UpEvent, UpstreamStream};
use crate::AppState;

/// Client request after validation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub req_id: String,
    pub model: String,
    pub messages: Vec<Value>,
    pub prompt_text: String,
    pub prompt_len: u32,
    pub max_tokens: u32,
    pub lambda: Option<f64>,
}

/// `x_disco` block of the final chunk.
#[derive(Debug, Clone, Serialize)]
pub struct DiscoSummary {
    pub winner: Endpoint,
    pub migrated: bool,
    pub delayed_tokens: u32,
    pub unified_cost: f64,
    pub snapshot_id: u64,
    pub prompt_tokens: u32,
    pub decision: DispatchDecision,
    pub discarded_tokens: u32,
    pub ledger: Ledger,
}

/// Outgoing SSE payloads; `None` is the `[DONE]` terminator.
pub type Outbox = mpsc::Sender<Option<Value>>;

struct Emitter<'a> {
    tx: &'a Outbox,
    req_id: &'a str,
    model: &'a str,
    created: u64,
    times: Vec<Instant>,
}

impl Emitter<'_> {
    fn chunk(&self, delta: Value, finish: Option<&str>) -> Value {
        json!({
            "id": self.req_id,
            "object": "chat.completion.chunk",
            "created": self.created,
            "model": self.model,
            "choices": [{"index": 0, "delta": delta, "finish_reason": finish}],
        })
    }

    /// False when the client has gone away.
    async fn token(&mut self, text: &str, producer: Endpoint) -> bool {
        let mut c = self.chunk(json!({"content": text}), None);
        c["x_disco"] = json!({"index": self.times.len(), "endpoint": producer});
        self.times.push(Instant::now());
        self.tx.send(Some(c)).await.is_ok()
    }

    async fn send(&self, v: Value) -> bool {
        self.tx.send(Some(v)).await.is_ok()
    }

    async fn done(&self) {
        let _ = self.tx.send(None).await;
    }
}

fn upstream_body(p: &Prepared, model: Option<&str>, max_tokens: u32, prefix: Option<(&str, u32)>) -> Value {
    let mut messages = p.messages.clone();
    let mut body = json!({
        "model": model.unwrap_or(&p.model),
        "stream": true,
        "max_tokens": max_tokens,
    });
    if let Some((text, next)) = prefix {
        messages.push(json!({"role": "assistant", "content": text}));
        body["continue_final_message"] = json!(true);
        body["add_generation_prompt"] = json!(false);
        let payload = TransferPayload {
            req_id: p.req_id.clone(),
            prompt: PromptPayload::Text(p.prompt_text.clone()),
            prefix: PrefixPayload::Text {
                prefix_text: text.to_string(),
            },
            next_index: next as usize,
        };
        body["x_disco_transfer"] = serde_json::to_value(payload).expect("payload serializes");
    }
    body["messages"] = Value::Array(messages);
    body
}

async fn recv(s: &mut Option<UpstreamStream>) -> UpEvent {
    match s {
        Some(s) => s.recv().await,
        None => std::future::pending().await,
    }
}

/// Planned migration, decided once when the winner is known.
struct MigrationPlan {
    target: Endpoint,
    buffer: usize,
}

pub async fn run(app: Arc<AppState>, snap: Arc<Snapshot>, p: Prepared, tx: Outbox) {
    let cfg = &app.cfg;
    let mut rates = cfg.rates;
    if let Some(lambda) = p.lambda {
        rates = rates.with_lambda(lambda);
    }
    let l = p.prompt_len;
    let decision = snap.decide(l);
    let mut state = SessionState::new(&p.req_id, snap.id);
    let mut ledger = Ledger::default();
    let mut out = Emitter {
        tx: &tx,
        req_id: &p.req_id,
        model: &p.model,
        created: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        times: Vec::new(),
    };
    let prefill_s = app.device_model.predict(l);
    let t0 = Instant::now();

    // ---- race ----
    let _ = state.advance(Phase::Racing);
    let mut server = decision.server_issue.then(|| {
        ledger.server_prefill_tokens = l;
        let up = app.upstream(Endpoint::Server);
        up.open(upstream_body(&p, up.cfg.model.as_deref(), p.max_tokens, None))
    });
    let mut device: Option<UpstreamStream> = None;
    let mut device_started: Option<Instant> = None;
    let wait = decision.device_start_delay_s.map(Duration::from_secs_f64);
    let timer = tokio::time::sleep(wait.unwrap_or(Duration::MAX / 4));
    tokio::pin!(timer);
    let mut device_pending = wait.is_some();
    let mut errors: Vec<String> = Vec::new();

    let (winner, first) = loop {
        if server.is_none() && device.is_none() && !device_pending {
            let _ = state.advance(Phase::Failed);
            let msg = if errors.is_empty() { "no upstream was issued".to_string() } else { errors.join("; ") };
            out.send(json!({"error": {"message": msg, "type": "upstream_error"}})).await;
            out.done().await;
            return;
        }
        tokio::select! {
            ev = recv(&mut server) => match ev {
                UpEvent::Token(t) => {
                    app.store.observe_server_ttft(t0.elapsed().as_secs_f64());
                    break (Endpoint::Server, t);
                }
                UpEvent::Done => { errors.push("server: empty response".into()); server = None; }
                UpEvent::Failed(e) => { errors.push(format!("server: {e}")); server = None; }
            },
            _ = &mut timer, if device_pending => {
                device_pending = false;
                device_started = Some(Instant::now());
                ledger.device_prefill_tokens = l;
                let up = app.upstream(Endpoint::Device);
                device = Some(up.open(upstream_body(&p, up.cfg.model.as_deref(), p.max_tokens, None)));
            },
            ev = recv(&mut device) => match ev {
                UpEvent::Token(t) => break (Endpoint::Device, t),
                UpEvent::Done => { errors.push("device: empty response".into()); device = None; }
                UpEvent::Failed(e) => { errors.push(format!("device: {e}")); device = None; }
            },
        }
    };

    // winner known: cancel the loser before anything else
    let mut source = match winner {
        Endpoint::Server => {
            if let Some(d) = device.take() {
                d.cancel();
            }
            server.take()
        }
        Endpoint::Device => {
            if let Some(s) = server.take() {
                s.cancel();
            }
            device.take()
        }
    };
    if let Some(started) = device_started {
        let frac = if winner == Endpoint::Device || prefill_s <= 0.0 {
            1.0
        } else {
            (started.elapsed().as_secs_f64() / prefill_s).min(1.0)
        };
        ledger.device_prefill_flops = frac * rates.device_prefill * l as f64;
    }
    state.winner = Some(winner);
    let _ = state.advance(Phase::Decoding);

    // ---- migration decision, once ----
    let pacing = cfg.pacing();
    let n = p.max_tokens as usize;
    let plan = pacing.and_then(|r_c| {
        if !cfg.migration.enabled || n < 2 {
            return None;
        }
        let target = winner.other();
        let c_src = rates.per_token_usd(winner, CostPhase::Decode);
        let c_tgt = rates.per_token_usd(target, CostPhase::Decode);
        let rate = |e| match e {
            Endpoint::Device => cfg.device.decode_rate,
            Endpoint::Server => 1.0 / cfg.server.tbt_s,
        };
        let r_g = rate(winner);
        if c_src <= c_tgt || r_g <= r_c {
            return None;
        }
        let t_m = match target {
            Endpoint::Device => app.device_model.predict(l + 1),
            Endpoint::Server => snap.server_ttft.quantile(cfg.migration.server_tm_quantile),
        };
        let b = buffer_target(r_c, t_m) as usize;
        // the buffer grows at r_g - r_c, so the trigger lands near token b r_g / (r_g - r_c)
        let j = ((b as f64 * r_g / (r_g - r_c)).ceil() as usize).min(n - 1);
        let prefix = (j + 1) as u32;
        let prefill = match target {
            Endpoint::Server => rates.server_prefill * (l + prefix) as f64,
            Endpoint::Device => rates.flops_to_usd(rates.device_prefill * (l + prefix) as f64),
        };
        let overhead = prefill + c_src * (r_g * t_m).ceil();
        let gain = migration_gain(c_src - c_tgt, n.saturating_sub(j + 1) as f64);
        should_migrate(gain, overhead).then_some(MigrationPlan { target, buffer: b.max(1) })
    });

    // ---- decode ----
    let slot = pacing.map(|r| Duration::from_secs_f64(1.0 / r));
    let mut buf: VecDeque<(String, Endpoint)> = VecDeque::new();
    let mut source_text = String::new();
    let mut surplus: Vec<String> = Vec::new();
    let mut target: Option<UpstreamStream> = None;
    let mut triggered_at: Option<usize> = None;
    let mut migrated = false;
    let mut discarded = 0u32;
    let mut source_done = false;
    let mut target_done = false;
    let mut produced = 1usize;
    let decode_tokens = |e: Endpoint, ledger: &mut Ledger| match e {
        Endpoint::Server => ledger.server_decode_tokens += 1,
        Endpoint::Device => {
            ledger.device_decode_tokens += 1;
            ledger.device_decode_flops += rates.device_decode;
        }
    };
    decode_tokens(winner, &mut ledger);
    source_text.push_str(&first);
    buf.push_back((first, winner));
    let mut next_emit = Instant::now();
    let mut failure: Option<String> = None;

    loop {
        let active = source.is_some() || target.is_some();
        if buf.is_empty() && !active {
            break;
        }
        tokio::select! {
            biased;
            _ = tokio::time::sleep_until(next_emit.into()), if !buf.is_empty() => {
                let (text, from) = buf.pop_front().expect("non-empty buffer");
                if !out.token(&text, from).await {
                    // client went away; dropping the streams aborts upstreams
                    return;
                }
                state.emitted();
                next_emit = Instant::now() + slot.unwrap_or_default();
            },
            ev = recv(&mut source) => match ev {
                UpEvent::Token(t) => {
                    decode_tokens(winner, &mut ledger);
                    if triggered_at.is_some() {
                        surplus.push(t);
                    } else if produced < n {
                        produced += 1;
                        source_text.push_str(&t);
                        buf.push_back((t, winner));
                        if let Some(plan) = &plan {
                            if buf.len() >= plan.buffer && produced < n {
                                let up = app.upstream(plan.target);
                                let body = upstream_body(&p, up.cfg.model.as_deref(), (n - produced) as u32, Some((&source_text, produced as u32)));
                                let prefix = l + produced as u32;
                                match plan.target {
                                    Endpoint::Server => ledger.server_migration_prefill_tokens = prefix,
                                    Endpoint::Device => ledger.device_migration_prefill_flops = rates.device_prefill * prefix as f64,
                                }
                                target = Some(up.open(body));
                                triggered_at = Some(produced - 1);
                                let _ = state.advance(Phase::Migrating);
                            }
                        }
                    }
                }
                UpEvent::Done => {
                    source_done = true;
                    source = None;
                    if let Some(t) = target.take() {
                        // the source finished first: its surplus completes the stream
                        t.cancel();
                        for s in surplus.drain(..) {
                            if produced < n { produced += 1; buf.push_back((s, winner)); }
                        }
                        if state.phase == Phase::Migrating { let _ = state.advance(Phase::Decoding); }
                    }
                }
                UpEvent::Failed(e) => {
                    source = None;
                    if target.is_none() { failure = Some(format!("{winner}: {e}")); }
                }
            },
            ev = recv(&mut target) => match ev {
                UpEvent::Token(t) => {
                    let to = winner.other();
                    decode_tokens(to, &mut ledger);
                    if !migrated {
                        // stop barrier: the source's extra tokens are dropped
                        migrated = true;
                        discarded = surplus.len() as u32;
                        surplus.clear();
                        if let Some(s) = source.take() { s.cancel(); }
                        let _ = state.advance(Phase::Decoding);
                    }
                    if produced < n {
                        produced += 1;
                        buf.push_back((t, to));
                    }
                }
                UpEvent::Done => { target_done = true; target = None; }
                UpEvent::Failed(e) => {
                    target = None;
                    if migrated {
                        failure = Some(format!("{}: {e}", winner.other()));
                    } else {
                        // fall back to the source and its surplus
                        for s in surplus.drain(..) {
                            if produced < n { produced += 1; buf.push_back((s, winner)); }
                        }
                        triggered_at = None;
                        let _ = state.advance(Phase::Decoding);
                    }
                }
            },
        }
        if failure.is_some() && buf.is_empty() {
            break;
        }
    }
    let _ = (source_done, target_done);

    let delayed = match (migrated, triggered_at, pacing) {
        (true, Some(j), Some(r_c)) => {
            let base = out.times[0];
            let secs: Vec<f64> = out.times.iter().map(|t| t.duration_since(base).as_secs_f64()).collect();
            delayed_tokens(&secs, j, r_c)
        }
        _ => 0,
    };
    let summary = DiscoSummary {
        winner,
        migrated,
        delayed_tokens: delayed,
        unified_cost: ledger.usage().cost(&rates),
        snapshot_id: snap.id,
        prompt_tokens: l,
        decision,
        discarded_tokens: discarded,
        ledger,
    };
    if let Some(msg) = failure {
        let _ = state.advance(Phase::Failed);
        out.send(json!({"error": {"message": msg, "type": "upstream_error"}, "x_disco": summary}))
            .await;
        out.done().await;
        return;
    }
    let _ = state.advance(Phase::Done);
    let emitted = out.times.len() as u32;
    let mut last = out.chunk(json!({}), Some("stop"));
    last["usage"] = json!({
        "prompt_tokens": l,
        "completion_tokens": emitted,
        "total_tokens": l + emitted,
    });
    last["x_disco"] = serde_json::to_value(&summary).expect("summary serializes");
    out.send(last).await;
    out.done().await;
}
