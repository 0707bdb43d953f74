use serde::{Deserialize, Serialize};

use super::RequestOutcome;
use crate::profiles::quantile_sorted;
use crate::{Error, Result};

/// Aggregates over one simulated run.
///
/// TBT is pooled over every inter-token gap of every request, migrated or
/// not; `p99_tbt_migrated_s` restricts the pool to migrated requests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub requests: usize,
    pub mean_ttft_s: f64,
    pub p99_ttft_s: f64,
    pub max_ttft_s: f64,
    pub p99_tbt_s: Option<f64>,
    pub p99_tbt_migrated_s: Option<f64>,
    pub migrations: usize,
    pub mean_delayed_tokens: Option<f64>,
    pub p99_delayed_tokens: Option<f64>,
    pub total_cost: f64,
    /// Server dispatch prompt tokens over all prompt tokens.
    pub server_prefill_share: f64,
    /// Started device prompt tokens over all prompt tokens.
    pub device_prefill_share: f64,
}

impl Metrics {
    /// `(name, value)` pairs in report order; `None` when undefined.
    pub fn entries(&self) -> [(&'static str, Option<f64>); 11] {
        [
            ("mean_ttft_s", Some(self.mean_ttft_s)),
            ("p99_ttft_s", Some(self.p99_ttft_s)),
            ("max_ttft_s", Some(self.max_ttft_s)),
            ("p99_tbt_s", self.p99_tbt_s),
            ("p99_tbt_migrated_s", self.p99_tbt_migrated_s),
            ("migrations", Some(self.migrations as f64)),
            ("mean_delayed_tokens", self.mean_delayed_tokens),
            ("p99_delayed_tokens", self.p99_delayed_tokens),
            ("total_cost", Some(self.total_cost)),
            ("server_prefill_share", Some(self.server_prefill_share)),
            ("device_prefill_share", Some(self.device_prefill_share)),
        ]
    }
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn p99(v: Vec<f64>) -> Option<f64> {
    (!v.is_empty()).then(|| quantile_sorted(&sorted(v), 0.99))
}

pub fn metrics(outcomes: &[RequestOutcome]) -> Result<Metrics> {
    if outcomes.is_empty() {
        return Err(Error::param("outcomes", "cannot summarise an empty run"));
    }
    let n = outcomes.len();
    let ttfts: Vec<f64> = outcomes.iter().map(|o| o.ttft_s).collect();
    let mean_ttft_s = ttfts.iter().sum::<f64>() / n as f64;
    let ttfts = sorted(ttfts);

    let tbt: Vec<f64> = outcomes.iter().flat_map(|o| o.timeline.gaps()).collect();
    let tbt_mig: Vec<f64> = outcomes
        .iter()
        .filter(|o| o.migrated())
        .flat_map(|o| o.timeline.gaps())
        .collect();
    let delayed: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| o.migration.map(|m| m.delayed_tokens as f64))
        .collect();
    let migrations = delayed.len();
    let mean_delayed_tokens = (migrations > 0).then(|| delayed.iter().sum::<f64>() / migrations as f64);

    let prompt_tokens: f64 = outcomes.iter().map(|o| o.prompt_len as f64).sum();
    let server_tokens: f64 = outcomes.iter().map(|o| o.ledger.server_prefill_tokens as f64).sum();
    let device_tokens: f64 = outcomes.iter().map(|o| o.ledger.device_prefill_tokens as f64).sum();

    Ok(Metrics {
        requests: n,
        mean_ttft_s,
        p99_ttft_s: quantile_sorted(&ttfts, 0.99),
        max_ttft_s: ttfts[n - 1],
        p99_tbt_s: p99(tbt),
        p99_tbt_migrated_s: p99(tbt_mig),
        migrations,
        mean_delayed_tokens,
        p99_delayed_tokens: p99(delayed),
        total_cost: outcomes.iter().map(|o| o.unified_cost).sum(),
        server_prefill_share: server_tokens / prompt_tokens,
        device_prefill_share: device_tokens / prompt_tokens,
    })
}
