//! Run configuration for the offline subcommands.
//!
//! ```toml
//! constraint = "server"
//! alpha = 0.05
//! grid = [0.1, 0.3, 0.5, 0.7, 0.9]
//! runs = 10
//! baselines = ["no-migration", "stoch", "server-only", "device-only"]
//!
//! [rates]
//! server_prefill = 1.5e-7
//! server_decode = 6e-7
//! device_prefill = 1.2e9
//! device_decode = 8.2e8
//! lambda = 5e-7
//!
//! [sim]
//! r_c = 4.0
//! migration = true
//! server_tm_quantile = 0.9
//! ```
//!
//! Every field is optional; flags override the file.

use std::path::Path;

use disco_core::cost::{
    default_pricing, find_pricing, CostRates, ModelArch, LAMBDA_SERVER_CONSTRAINED,
};
use disco_core::dispatch::{classify, ConstraintKind, DEFAULT_ALPHA};
use disco_core::sim::{
    Baseline, DeviceCostMode, MigrationConfig, MigrationLatency, SimConfig, DEFAULT_R_C,
};
use disco_core::Endpoint;
use serde::Deserialize;

use crate::error::{read_to_string, CliError, Result};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub constraint: Option<Endpoint>,
    pub alpha: Option<f64>,
    pub grid: Option<Vec<f64>>,
    pub runs: Option<u32>,
    pub baselines: Option<Vec<String>>,
    pub rates: Option<CostRates>,
    #[serde(default)]
    pub sim: SimSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    /// Consumer pacing rate; ignored with `passthrough`.
    pub r_c: f64,
    pub passthrough: bool,
    pub migration: bool,
    pub server_tm_quantile: f64,
    /// Realise migrations with `factor * t_m` instead of a sampled latency.
    pub tm_factor: Option<f64>,
    /// Bill device FLOPs with the calculator for this architecture.
    pub device_arch: Option<String>,
}

impl Default for SimSection {
    fn default() -> Self {
        let m = MigrationConfig::default();
        Self {
            r_c: DEFAULT_R_C,
            passthrough: false,
            migration: m.enabled,
            server_tm_quantile: m.server_tm_quantile,
            tm_factor: None,
            device_arch: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => toml::from_str(&read_to_string(p)?)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display()))),
        }
    }

    /// GPT-4o-mini prices and Qwen1.5-0.5B FLOPs at 128 tokens unless the
    /// file gives rates.
    pub fn rates(&self) -> Result<CostRates> {
        match self.rates {
            Some(r) => {
                r.validate()?;
                Ok(r)
            }
            None => {
                let table = default_pricing();
                let pricing = find_pricing(&table, "GPT-4o-mini").expect("built-in pricing row");
                Ok(CostRates::from_arch(
                    pricing,
                    &ModelArch::qwen1_5_0b5(),
                    128,
                    LAMBDA_SERVER_CONSTRAINED,
                )?)
            }
        }
    }

    /// Flag, then file, then whichever endpoint is dearer under the rates.
    pub fn constraint(&self, flag: Option<Endpoint>, rates: &CostRates) -> ConstraintKind {
        match flag.or(self.constraint) {
            Some(e) => ConstraintKind::from_endpoint(e),
            None => classify(rates),
        }
    }

    pub fn alpha(&self, flag: Option<f64>) -> f64 {
        flag.or(self.alpha).unwrap_or(DEFAULT_ALPHA)
    }

    pub fn baselines(&self) -> Result<Vec<Baseline>> {
        match &self.baselines {
            None => Ok(Baseline::ALL.to_vec()),
            Some(v) => v.iter().map(|s| Ok(s.parse()?)).collect(),
        }
    }

    pub fn sim(&self) -> Result<SimConfig> {
        let s = &self.sim;
        let device_cost = match &s.device_arch {
            None => DeviceCostMode::ConstantRate,
            Some(name) => DeviceCostMode::Calculator {
                arch: ModelArch::preset(name)
                    .ok_or_else(|| CliError::Data(format!("unknown architecture `{name}`")))?,
            },
        };
        if !s.passthrough && !(s.r_c.is_finite() && s.r_c > 0.0) {
            return Err(CliError::Data(format!("sim.r_c must be > 0, got {}", s.r_c)));
        }
        Ok(SimConfig {
            r_c: (!s.passthrough).then_some(s.r_c),
            migration: MigrationConfig {
                enabled: s.migration,
                server_tm_quantile: s.server_tm_quantile,
                latency: match s.tm_factor {
                    Some(factor) => MigrationLatency::Estimate { factor },
                    None => MigrationLatency::Sampled,
                },
            },
            device_cost,
        })
    }
}

/// Budget grid from a flag: `0.1,0.5,0.9` or an inclusive range
/// `start:end:step`.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = |m: String| CliError::Usage(format!("invalid grid `{s}`: {m}"));
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| bad(format!("`{t}`: {e}")));
    let grid = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        let [start, end, step] = parts.as_slice() else {
            return Err(bad("a range is start:end:step".into()));
        };
        let (start, end, step) = (num(start)?, num(end)?, num(step)?);
        if !(step > 0.0 && end >= start) {
            return Err(bad("need step > 0 and end >= start".into()));
        }
        let n = ((end - start) / step + 1e-9).floor() as usize;
        // round so 0.1 * 3 prints as 0.3
        (0..=n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect()
    } else {
        s.split(',').map(num).collect::<Result<Vec<f64>>>()?
    };
    check_grid(&grid)?;
    Ok(grid)
}

pub fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(CliError::Usage("budget grid is empty".into()));
    }
    if let Some(b) = grid.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(CliError::Usage(format!("budget ratio {b} is outside [0, 1]")));
    }
    Ok(())
}
