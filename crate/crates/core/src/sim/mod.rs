//! Deterministic trace simulator.
//!
//! Each request is dispatched at its arrival time. The server's first token
//! comes after a sampled TTFT, the device's after its wait plus `k l + c`.
//! The earlier one wins and decodes; the loser is cancelled at the winner's
//! first token. After the winner is known, migration is evaluated once.

mod experiment;
mod metrics;

pub use experiment::{
    baseline_stoch, run_experiment, simulate_trace, stoch_decisions, Baseline, ExperimentConfig,
    ExperimentReport, Method, ReportRow,
};
pub use metrics::{metrics, Metrics};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{flops_per_token_total, request_prefill_flops, CostRates, ModelArch, Phase, Usage};
use crate::dispatch::DispatchDecision;
use crate::migration::{
    migration_gain, pace, schedule_handoff, should_migrate, HandoffState, MigrationParams,
};
use crate::profiles::{DeviceTtftModel, Profiles, ServerTbt, ServerTtftEcdf};
use crate::workload::Request;
use crate::{Endpoint, Error, Result};

/// How server TTFTs are obtained for each request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerSampling {
    /// Resample the ECDF i.i.d.
    #[default]
    Bootstrap,
    /// Use the trace's recorded `ttft_s` / `tbt_s`, falling back to
    /// resampling when a request has none.
    Replay,
}

/// Performance models of both endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointModel {
    pub device_ttft: DeviceTtftModel,
    /// tokens/s
    pub device_decode_rate: f64,
    pub server_ttft: ServerTtftEcdf,
    pub server_tbt: ServerTbt,
    pub sampling: ServerSampling,
}

impl EndpointModel {
    pub fn from_profiles(p: &Profiles, sampling: ServerSampling) -> Self {
        Self {
            device_ttft: p.device_ttft,
            device_decode_rate: p.decode.device_rate,
            server_ttft: p.server_ttft.clone(),
            server_tbt: p.decode.server_tbt.clone(),
            sampling,
        }
    }

    pub fn server_rate(&self) -> f64 {
        1.0 / self.server_tbt.mean()
    }

    fn rate(&self, e: Endpoint) -> f64 {
        match e {
            Endpoint::Device => self.device_decode_rate,
            Endpoint::Server => self.server_rate(),
        }
    }

    fn sample_tbt(&self, rng: &mut ChaCha8Rng) -> f64 {
        match &self.server_tbt {
            ServerTbt::Fixed(v) => *v,
            ServerTbt::Samples(s) => s[rng.random_range(0..s.len())],
        }
    }

    fn sample_ttft(&self, rng: &mut ChaCha8Rng) -> f64 {
        let s = self.server_ttft.samples();
        s[rng.random_range(0..s.len())]
    }

    /// Server randomness for one request. Drawn whether or not the server is
    /// issued so every method sees the same samples.
    pub fn draw_server(&self, req: &Request, output_len: u32, rng: &mut ChaCha8Rng) -> ServerDraw {
        let boot_ttft = self.sample_ttft(rng);
        let migration_ttft = self.sample_ttft(rng);
        let mut tbt: Vec<f64> = (1..output_len).map(|_| self.sample_tbt(rng)).collect();
        let ttft_s = match (self.sampling, req.ttft_s) {
            (ServerSampling::Replay, Some(t)) => t,
            _ => boot_ttft,
        };
        if let (ServerSampling::Replay, Some(rec)) = (self.sampling, &req.tbt_s) {
            for (slot, v) in tbt.iter_mut().zip(rec) {
                *slot = *v;
            }
        }
        ServerDraw {
            ttft_s,
            tbt_s: tbt,
            migration_ttft_s: migration_ttft,
        }
    }

    /// One independent draw per request, from a single stream seeded by `seed`.
    pub fn draw_all(&self, requests: &[Request], output_lens: &[u32], seed: u64) -> Vec<ServerDraw> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        requests
            .iter()
            .zip(output_lens)
            .map(|(r, n)| self.draw_server(r, *n, &mut rng))
            .collect()
    }
}

/// Sampled server behaviour for one request.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerDraw {
    pub ttft_s: f64,
    /// Interval before each token after the first.
    pub tbt_s: Vec<f64>,
    /// TTFT of a continuation request if decode migrates to the server.
    pub migration_ttft_s: f64,
}

/// How device FLOPs are charged.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DeviceCostMode {
    /// `device_prefill * l` and `device_decode` per token from [`CostRates`].
    #[default]
    ConstantRate,
    /// Per-token FLOPs from the calculator at the actual sequence length.
    Calculator { arch: ModelArch },
}

/// How long migration really takes in the simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MigrationLatency {
    /// `factor * t_m`; 1.0 means the estimate is exact.
    Estimate { factor: f64 },
    /// Server target: a fresh TTFT sample. Device target: `k (l + prefix) + c`.
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MigrationConfig {
    pub enabled: bool,
    /// Quantile of server TTFT used as `t_m` when the server is the target.
    pub server_tm_quantile: f64,
    pub latency: MigrationLatency,
}

impl Default for MigrationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            server_tm_quantile: 0.9,
            latency: MigrationLatency::Sampled,
        }
    }
}

/// Default consumer pacing rate (tokens/s).
pub const DEFAULT_R_C: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Consumer pacing; `None` delivers tokens as soon as they are generated
    /// and disables migration.
    pub r_c: Option<f64>,
    pub migration: MigrationConfig,
    pub device_cost: DeviceCostMode,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            r_c: Some(DEFAULT_R_C),
            migration: MigrationConfig::default(),
            device_cost: DeviceCostMode::ConstantRate,
        }
    }
}

impl SimConfig {
    pub fn without_migration(&self) -> Self {
        let mut c = self.clone();
        c.migration.enabled = false;
        c
    }

    fn device_prefill_flops(&self, rates: &CostRates, tokens: u32) -> f64 {
        match &self.device_cost {
            DeviceCostMode::ConstantRate => rates.device_prefill * tokens as f64,
            DeviceCostMode::Calculator { arch } => request_prefill_flops(arch, tokens as u64) as f64,
        }
    }

    /// FLOPs for decoding output indices `from..to` after a prompt of `prompt_len`.
    fn device_decode_flops(&self, rates: &CostRates, prompt_len: u32, from: usize, to: usize) -> f64 {
        match &self.device_cost {
            DeviceCostMode::ConstantRate => rates.device_decode * (to - from) as f64,
            DeviceCostMode::Calculator { arch } => (from..to)
                .map(|i| flops_per_token_total(arch, prompt_len as u64 + i as u64 + 1, Phase::Decode) as f64)
                .sum(),
        }
    }

    fn decode_usd_per_token(&self, rates: &CostRates, e: Endpoint, prompt_len: u32) -> f64 {
        match (e, &self.device_cost) {
            (Endpoint::Device, DeviceCostMode::Calculator { arch }) => rates.flops_to_usd(
                flops_per_token_total(arch, prompt_len as u64, Phase::Decode) as f64,
            ),
            _ => rates.per_token_usd(e, Phase::Decode),
        }
    }

    fn prefill_usd(&self, rates: &CostRates, e: Endpoint, tokens: u32) -> f64 {
        match e {
            Endpoint::Server => rates.server_prefill * tokens as f64,
            Endpoint::Device => rates.flops_to_usd(self.device_prefill_flops(rates, tokens)),
        }
    }
}

/// Tokens and FLOPs billed for one request, split by endpoint and purpose.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    /// Prompt tokens submitted to the server at dispatch.
    pub server_prefill_tokens: u32,
    /// Prompt + prefix tokens submitted to the server by a migration.
    pub server_migration_prefill_tokens: u32,
    pub server_decode_tokens: u32,
    /// Prompt tokens of a device prefill that started (charged in full).
    pub device_prefill_tokens: u32,
    /// Device prefill FLOPs, proportional to the elapsed prefill fraction.
    pub device_prefill_flops: f64,
    pub device_migration_prefill_flops: f64,
    pub device_decode_tokens: u32,
    pub device_decode_flops: f64,
}

impl Ledger {
    pub fn usage(&self) -> Usage {
        Usage {
            server_prefill_tokens: (self.server_prefill_tokens + self.server_migration_prefill_tokens) as f64,
            server_decode_tokens: self.server_decode_tokens as f64,
            device_prefill_flops: self.device_prefill_flops + self.device_migration_prefill_flops,
            device_decode_flops: self.device_decode_flops,
        }
    }
}

/// Delivered tokens of one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTimeline {
    pub arrival_s: f64,
    pub deliver_s: Vec<f64>,
    pub producer: Vec<Endpoint>,
}

impl TokenTimeline {
    pub fn ttft(&self) -> f64 {
        self.deliver_s[0] - self.arrival_s
    }

    pub fn gaps(&self) -> impl Iterator<Item = f64> + '_ {
        self.deliver_s.windows(2).map(|w| w[1] - w[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MigrationEvent {
    pub from: Endpoint,
    pub buffer_target: u32,
    pub start_after_token: usize,
    pub source_stop_token: usize,
    pub trigger_s: f64,
    pub target_ready_s: f64,
    pub t_m_estimate: f64,
    pub actual_latency_s: f64,
    pub delayed_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub id: String,
    pub prompt_len: u32,
    pub output_len: u32,
    pub ttft_s: f64,
    pub winner: Endpoint,
    pub device_started: bool,
    pub server_issued: bool,
    pub migration: Option<MigrationEvent>,
    /// Migration was triggered but the source finished first.
    pub migration_wasted: bool,
    pub ledger: Ledger,
    pub unified_cost: f64,
    pub timeline: TokenTimeline,
}

impl RequestOutcome {
    pub fn migrated(&self) -> bool {
        self.migration.is_some()
    }

    pub fn delayed_tokens(&self) -> u32 {
        self.migration.map_or(0, |m| m.delayed_tokens)
    }
}

/// Simulates one request end to end.
pub fn simulate_request(
    req: &Request,
    output_len: u32,
    decision: DispatchDecision,
    draw: &ServerDraw,
    models: &EndpointModel,
    rates: &CostRates,
    cfg: &SimConfig,
) -> Result<RequestOutcome> {
    if output_len == 0 {
        return Err(Error::param("output_len", "must be >= 1"));
    }
    let l = req.prompt_len;
    let arrival = req.arrival_s;
    let prefill_s = models.device_ttft.predict(l);

    // times are relative to arrival so `ttft_s` carries no rounding from it
    let server_rel = decision.server_issue.then_some(draw.ttft_s);
    let device_wait = decision.device_start_delay_s.filter(|wait| {
        // a waiting device never starts once the server has answered
        !(decision.server_issue && draw.ttft_s <= *wait)
    });
    let device_rel = device_wait.map(|wait| wait + prefill_s);
    let (winner, ttft_s) = match (device_rel, server_rel) {
        (Some(d), Some(s)) if d <= s => (Endpoint::Device, d),
        (_, Some(s)) => (Endpoint::Server, s),
        (Some(d), None) => (Endpoint::Device, d),
        (None, None) => {
            return Err(Error::param(
                "decision",
                "neither endpoint participates in the request",
            ))
        }
    };
    let first_s = arrival + ttft_s;

    let mut ledger = Ledger::default();
    if decision.server_issue {
        ledger.server_prefill_tokens = l;
    }
    if let Some(wait) = device_wait {
        let frac = if winner == Endpoint::Device || prefill_s <= 0.0 {
            1.0
        } else {
            ((ttft_s - wait).max(0.0) / prefill_s).min(1.0)
        };
        ledger.device_prefill_tokens = l;
        ledger.device_prefill_flops = frac * cfg.device_prefill_flops(rates, l);
    }

    let n = output_len as usize;
    let source_gen: Vec<f64> = match winner {
        Endpoint::Device => (0..n)
            .map(|i| first_s + i as f64 / models.device_decode_rate)
            .collect(),
        Endpoint::Server => {
            let mut t = first_s;
            let mut v = Vec::with_capacity(n);
            v.push(t);
            for dt in draw.tbt_s.iter().take(n - 1) {
                t += dt;
                v.push(t);
            }
            while v.len() < n {
                t += models.server_tbt.mean();
                v.push(t);
            }
            v
        }
    };

    let mut migration = None;
    let mut migration_wasted = false;
    let mut gen_s = source_gen.clone();
    let mut producer = vec![winner; n];
    let mut deliver_s = None;
    let mut source_tokens = n;
    let mut target_tokens = 0usize;

    if let (true, Some(r_c)) = (cfg.migration.enabled, cfg.r_c) {
        let target = winner.other();
        let c_src = cfg.decode_usd_per_token(rates, winner, l);
        let c_tgt = cfg.decode_usd_per_token(rates, target, l);
        let r_g = models.rate(winner);
        if n >= 2 && c_src > c_tgt && r_g > r_c {
            let t_m = match target {
                Endpoint::Device => models.device_ttft.predict(l + 1),
                Endpoint::Server => models.server_ttft.quantile(cfg.migration.server_tm_quantile),
            };
            let mut params = MigrationParams {
                r_c,
                r_g_source: r_g,
                t_m,
                delta_decode_cost: c_src - c_tgt,
                overhead_cost: 0.0,
            };
            let target_interval = 1.0 / models.rate(target);
            let estimated = schedule_handoff(
                &params,
                &HandoffState {
                    source: winner,
                    source_gen_s: &source_gen,
                    actual_latency_s: t_m,
                    target_interval_s: target_interval,
                },
            )?;
            if let Some(est) = estimated {
                let prefix = est.start_after_token as u32 + 1;
                params.overhead_cost = cfg.prefill_usd(rates, target, l + prefix)
                    + c_src * est.discarded_source_tokens() as f64;
                let gain = migration_gain(params.delta_decode_cost, est.target_tokens() as f64);
                if should_migrate(gain, params.overhead_cost) {
                    let actual = match cfg.migration.latency {
                        MigrationLatency::Estimate { factor } => t_m * factor,
                        MigrationLatency::Sampled => match target {
                            Endpoint::Device => models.device_ttft.predict(l + prefix),
                            Endpoint::Server => draw.migration_ttft_s,
                        },
                    };
                    let realized = schedule_handoff(
                        &params,
                        &HandoffState {
                            source: winner,
                            source_gen_s: &source_gen,
                            actual_latency_s: actual,
                            target_interval_s: target_interval,
                        },
                    )?;
                    // the target is prefilled either way
                    match target {
                        Endpoint::Server => ledger.server_migration_prefill_tokens = l + prefix,
                        Endpoint::Device => {
                            ledger.device_migration_prefill_flops =
                                cfg.device_prefill_flops(rates, l + prefix)
                        }
                    }
                    match realized {
                        Some(plan) => {
                            source_tokens = plan.source_stop_token + 1;
                            target_tokens = plan.target_tokens();
                            migration = Some(MigrationEvent {
                                from: winner,
                                buffer_target: plan.buffer_target,
                                start_after_token: plan.start_after_token,
                                source_stop_token: plan.source_stop_token,
                                trigger_s: plan.trigger_s,
                                target_ready_s: plan.target_ready_s,
                                t_m_estimate: t_m,
                                actual_latency_s: actual,
                                delayed_tokens: plan.delayed_tokens,
                            });
                            gen_s = plan.gen_s;
                            producer = plan.producer;
                            deliver_s = Some(plan.deliver_s);
                        }
                        None => migration_wasted = true,
                    }
                }
            }
        }
    }

    let deliver_s = deliver_s.unwrap_or_else(|| pace(&gen_s, cfg.r_c));
    for (e, count, from) in [
        (winner, source_tokens, 0usize),
        (winner.other(), target_tokens, n - target_tokens),
    ] {
        match e {
            Endpoint::Server => ledger.server_decode_tokens += count as u32,
            Endpoint::Device => {
                ledger.device_decode_tokens += count as u32;
                ledger.device_decode_flops += cfg.device_decode_flops(rates, l, from, from + count);
            }
        }
    }

    let unified_cost = ledger.usage().cost(rates);
    Ok(RequestOutcome {
        id: req.id.clone(),
        prompt_len: l,
        output_len,
        ttft_s,
        winner,
        device_started: device_wait.is_some(),
        server_issued: decision.server_issue,
        migration,
        migration_wasted,
        ledger,
        unified_cost,
        timeline: TokenTimeline {
            arrival_s: arrival,
            deliver_s,
            producer,
        },
    })
}
