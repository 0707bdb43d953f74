use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{metrics, simulate_request, EndpointModel, Metrics, RequestOutcome, SimConfig};
use crate::cost::CostRates;
use crate::dispatch::{
    decide, ConstraintKind, DispatchDecision, DispatchPolicy, LengthDist, PolicySnapshot,
    DEFAULT_ALPHA,
};
use crate::workload::Trace;
use crate::{Error, Result};

/// Comparison methods besides the policy itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Policy with migration switched off.
    NoMigration,
    /// Stoch-S or Stoch-D, matching the constraint kind.
    Stoch,
    ServerOnly,
    DeviceOnly,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [
        Baseline::NoMigration,
        Baseline::Stoch,
        Baseline::ServerOnly,
        Baseline::DeviceOnly,
    ];
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "no-migration" | "nomig" => Ok(Baseline::NoMigration),
            "stoch" => Ok(Baseline::Stoch),
            "server-only" => Ok(Baseline::ServerOnly),
            "device-only" => Ok(Baseline::DeviceOnly),
            other => Err(Error::param("baseline", format!("unknown baseline `{other}`"))),
        }
    }
}

/// A dispatch method evaluated by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Disco { migration: bool },
    Stoch,
    ServerOnly,
    DeviceOnly,
}

impl Method {
    pub fn label(self, kind: ConstraintKind) -> String {
        match self {
            Method::Disco { migration: true } => format!("disco-{}", kind.suffix()),
            Method::Disco { migration: false } => format!("disco-{}-nomig", kind.suffix()),
            Method::Stoch => format!("stoch-{}", kind.suffix()),
            Method::ServerOnly => "server-only".into(),
            Method::DeviceOnly => "device-only".into(),
        }
    }

    fn depends_on_budget(self) -> bool {
        matches!(self, Method::Disco { .. } | Method::Stoch)
    }
}

/// Stoch-S: concurrent with probability `b`, else device-only.
/// Stoch-D: server always; the device joins immediately with probability `b`.
pub fn stoch_decisions(n: usize, b: f64, kind: ConstraintKind, seed: u64) -> Result<Vec<DispatchDecision>> {
    if !(0.0..=1.0).contains(&b) {
        return Err(Error::param("b", format!("budget ratio must be in [0, 1], got {b}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    Ok((0..n)
        .map(|_| {
            let hit = rng.random::<f64>() < b;
            match (kind, hit) {
                (ConstraintKind::ServerConstrained, true) => DispatchDecision::CONCURRENT,
                (ConstraintKind::ServerConstrained, false) => DispatchDecision::DEVICE_ONLY,
                (ConstraintKind::DeviceConstrained, true) => DispatchDecision::CONCURRENT,
                (ConstraintKind::DeviceConstrained, false) => DispatchDecision::SERVER_ONLY,
            }
        })
        .collect())
}

/// Simulates every request of `trace` under the given per-request decisions.
pub fn simulate_trace(
    trace: &Trace,
    decisions: &[DispatchDecision],
    models: &EndpointModel,
    rates: &CostRates,
    sim: &SimConfig,
    seed: u64,
) -> Result<Vec<RequestOutcome>> {
    if decisions.len() != trace.len() {
        return Err(Error::param("decisions", "one decision per request is required"));
    }
    let reqs = trace.requests();
    let out_lens: Vec<u32> = reqs.iter().map(|r| trace.effective_output_len(r)).collect();
    let draws = models.draw_all(reqs, &out_lens, seed);
    reqs.iter()
        .zip(&out_lens)
        .zip(decisions)
        .zip(&draws)
        .map(|(((r, n), d), draw)| simulate_request(r, *n, *d, draw, models, rates, sim))
        .collect()
}

/// One run of the Stoch baseline at budget `b`.
pub fn baseline_stoch(
    trace: &Trace,
    b: f64,
    kind: ConstraintKind,
    models: &EndpointModel,
    rates: &CostRates,
    sim: &SimConfig,
    seed: u64,
) -> Result<Metrics> {
    let decisions = stoch_decisions(trace.len(), b, kind, seed)?;
    metrics(&simulate_trace(trace, &decisions, models, rates, sim, seed)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub constraint: ConstraintKind,
    pub grid: Vec<f64>,
    pub baselines: Vec<Baseline>,
    pub runs: u32,
    pub master_seed: u64,
    pub alpha: f64,
    pub sim: SimConfig,
}

impl ExperimentConfig {
    pub fn new(constraint: ConstraintKind, grid: Vec<f64>) -> Self {
        Self {
            constraint,
            grid,
            baselines: Baseline::ALL.to_vec(),
            runs: 10,
            master_seed: 0,
            alpha: DEFAULT_ALPHA,
            sim: SimConfig::default(),
        }
    }

    fn methods(&self) -> Vec<Method> {
        let mut m = vec![Method::Disco { migration: true }];
        let mut bl = self.baselines.clone();
        bl.sort();
        bl.dedup();
        for b in bl {
            m.push(match b {
                Baseline::NoMigration => Method::Disco { migration: false },
                Baseline::Stoch => Method::Stoch,
                Baseline::ServerOnly => Method::ServerOnly,
                Baseline::DeviceOnly => Method::DeviceOnly,
            });
        }
        m
    }
}

/// Run-averaged metrics of one method at one budget point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub b: f64,
    /// `(metric, mean over runs)`; metrics undefined in every run are left out.
    pub values: Vec<(String, f64)>,
}

impl ReportRow {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.values.iter().find(|(m, _)| m == metric).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub constraint: ConstraintKind,
    pub runs: u32,
    pub master_seed: u64,
    pub policies: Vec<PolicySnapshot>,
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn row(&self, method: &str, b: f64) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.b == b)
    }

    pub fn methods(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method.as_str()) {
                out.push(&r.method);
            }
        }
        out
    }

    /// Long format: `method,b,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,b,metric,value\n");
        for r in &self.rows {
            for (m, v) in &r.values {
                writeln!(out, "{},{},{},{}", r.method, r.b, m, v).expect("write to string");
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn average(runs: &[Metrics]) -> Vec<(String, f64)> {
    let names = runs[0].entries().map(|(n, _)| n);
    names
        .iter()
        .enumerate()
        .filter_map(|(i, name)| {
            let vals: Vec<f64> = runs.iter().filter_map(|m| m.entries()[i].1).collect();
            (!vals.is_empty()).then(|| (name.to_string(), vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect()
}

/// Replays `trace` for every budget point and method, `cfg.runs` times with
/// seeds `master_seed + 0 .. runs`, and averages the metrics.
pub fn run_experiment(
    trace: &Trace,
    models: &EndpointModel,
    rates: &CostRates,
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport> {
    if let Some(b) = cfg.grid.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(Error::param("grid", format!("budget ratio must be in [0, 1], got {b}")));
    }
    if cfg.runs == 0 {
        return Err(Error::param("runs", "must be >= 1"));
    }
    rates.validate()?;
    let kind = cfg.constraint;
    let dist = LengthDist::from_lengths(trace.prompt_lens())?;
    let policies: Vec<DispatchPolicy> = cfg
        .grid
        .iter()
        .map(|b| DispatchPolicy::plan(kind, &dist, &models.server_ttft, *b, cfg.alpha))
        .collect::<Result<_>>()?;
    let methods = cfg.methods();
    let no_mig = cfg.sim.without_migration();

    // per run: metrics[method][grid index]
    let per_run: Vec<Vec<Vec<Metrics>>> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| -> Result<Vec<Vec<Metrics>>> {
            let seed = cfg.master_seed.wrapping_add(run as u64);
            let mut out = Vec::with_capacity(methods.len());
            for m in &methods {
                let sim = match m {
                    Method::Disco { migration: false } => &no_mig,
                    _ => &cfg.sim,
                };
                let fixed = match m {
                    Method::ServerOnly => Some(DispatchDecision::SERVER_ONLY),
                    Method::DeviceOnly => Some(DispatchDecision::DEVICE_ONLY),
                    _ => None,
                };
                let mut row = Vec::with_capacity(cfg.grid.len());
                if let Some(d) = fixed {
                    let once = metrics(&simulate_trace(trace, &vec![d; trace.len()], models, rates, sim, seed)?)?;
                    row.resize(cfg.grid.len(), once);
                } else {
                    for (b, policy) in cfg.grid.iter().zip(&policies) {
                        let decisions: Vec<DispatchDecision> = match m {
                            Method::Stoch => stoch_decisions(trace.len(), *b, kind, seed)?,
                            _ => trace.prompt_lens().map(|l| decide(policy, l)).collect(),
                        };
                        row.push(metrics(&simulate_trace(trace, &decisions, models, rates, sim, seed)?)?);
                    }
                }
                out.push(row);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (mi, m) in methods.iter().enumerate() {
        debug_assert!(m.depends_on_budget() || per_run[0][mi].windows(2).all(|w| w[0] == w[1]));
        for (bi, b) in cfg.grid.iter().enumerate() {
            let runs: Vec<Metrics> = per_run.iter().map(|r| r[mi][bi]).collect();
            rows.push(ReportRow {
                method: m.label(kind),
                b: *b,
                values: average(&runs),
            });
        }
    }
    Ok(ExperimentReport {
        constraint: kind,
        runs: cfg.runs,
        master_seed: cfg.master_seed,
        policies: cfg
            .grid
            .iter()
            .zip(&policies)
            .map(|(b, p)| PolicySnapshot::new(p, *b, cfg.alpha))
            .collect(),
        rows,
    })
}
