//! TOML configuration.
//!
//! ```toml
//! listen = "127.0.0.1:8080"
//! r_c = 4.0
//!
//! [[upstreams]]
//! name = "phone"
//! role = "device"
//! base_url = "http://127.0.0.1:9001"
//!
//! [[upstreams]]
//! name = "api"
//! role = "server"
//! base_url = "https://api.example.com"
//! auth_env = "SERVER_API_KEY"
//!
//! [rates]
//! server_prefill = 1.5e-7
//! server_decode = 6e-7
//! device_prefill = 1.2e9
//! device_decode = 8.2e8
//! lambda = 5e-7
//!
//! [budget]
//! b = 0.5
//! constraint = "device"
//!
//! [device]
//! k = 0.0125
//! c = 0.15
//! decode_rate = 21.47
//!
//! [server]
//! ttft_samples = [0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.2, 2.5]
//! tbt_s = 0.02
//! ```

use std::path::Path;
use std::time::Duration;

use disco_core::cost::CostRates;
use disco_core::dispatch::{ConstraintKind, DEFAULT_ALPHA};
use disco_core::profiles::{DeviceTtftModel, ServerTtftEcdf};
use disco_core::Endpoint;
use serde::{Deserialize, Serialize};

use crate::GatewayError;

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_r_c() -> Option<f64> {
    Some(disco_core::sim::DEFAULT_R_C)
}
fn default_cancel_grace_ms() -> u64 {
    50
}
fn default_window() -> usize {
    64
}
fn default_max_tokens() -> u32 {
    disco_core::workload::DEFAULT_GEN_CAP
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_quantile() -> f64 {
    0.9
}
fn default_true() -> bool {
    true
}
fn default_prompt_lengths() -> Vec<u32> {
    // a spread of chat-sized prompts until real traffic replaces it
    vec![8, 16, 32, 48, 64, 96, 128, 192, 256, 384, 512, 1024]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpstreamConfig {
    pub name: String,
    pub role: Endpoint,
    pub base_url: String,
    /// Model name sent upstream; the client's model is forwarded when unset.
    #[serde(default)]
    pub model: Option<String>,
    /// Environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Both upstreams share a tokenizer, so migration can hand over token ids.
    #[serde(default)]
    pub shared_vocab: bool,
}

impl UpstreamConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn auth_token(&self) -> Option<String> {
        self.auth_env.as_ref().and_then(|v| std::env::var(v).ok())
    }

    pub fn completions_url(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    pub b: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Which endpoint the budget limits.
    pub constraint: Endpoint,
}

impl BudgetConfig {
    pub fn kind(&self) -> ConstraintKind {
        ConstraintKind::from_endpoint(self.constraint)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub k: f64,
    pub c: f64,
    pub decode_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    /// Initial TTFT observations, seconds.
    pub ttft_samples: Vec<f64>,
    /// Mean inter-token time, seconds.
    pub tbt_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MigrationConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Quantile of server TTFT used as `t_m` when the server is the target.
    #[serde(default = "default_quantile")]
    pub server_tm_quantile: f64,
}

impl Default for MigrationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            server_tm_quantile: default_quantile(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub upstreams: Vec<UpstreamConfig>,
    pub rates: CostRates,
    pub budget: BudgetConfig,
    pub device: DeviceConfig,
    pub server: ServerConfig,
    #[serde(default)]
    pub migration: MigrationConfig,
    /// Consumer pacing in tokens/s; absent with `passthrough = true`.
    #[serde(default = "default_r_c")]
    pub r_c: Option<f64>,
    #[serde(default)]
    pub passthrough: bool,
    #[serde(default = "default_cancel_grace_ms")]
    pub cancel_grace_ms: u64,
    /// Server TTFT observations kept for refresh; also the minimum needed.
    #[serde(default = "default_window")]
    pub refresh_window: usize,
    /// Periodic refresh; 0 disables it.
    #[serde(default)]
    pub refresh_interval_ms: u64,
    #[serde(default = "default_max_tokens")]
    pub default_max_tokens: u32,
    /// Prompt lengths the policy is planned over until live traffic fills
    /// the window.
    #[serde(default = "default_prompt_lengths")]
    pub prompt_lengths: Vec<u32>,
}

impl GatewayConfig {
    pub fn from_toml(s: &str) -> Result<Self, GatewayError> {
        let cfg: Self = toml::from_str(s).map_err(|e| GatewayError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&s)
    }

    /// Effective pacing rate; `None` in passthrough mode.
    pub fn pacing(&self) -> Option<f64> {
        if self.passthrough {
            None
        } else {
            self.r_c
        }
    }

    pub fn upstream(&self, role: Endpoint) -> &UpstreamConfig {
        self.upstreams
            .iter()
            .find(|u| u.role == role)
            .expect("validated config has both roles")
    }

    pub fn device_model(&self) -> Result<DeviceTtftModel, GatewayError> {
        Ok(DeviceTtftModel::new(self.device.k, self.device.c)?)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::Config(m));
        for role in [Endpoint::Device, Endpoint::Server] {
            let n = self.upstreams.iter().filter(|u| u.role == role).count();
            if n != 1 {
                return bad(format!("exactly one {role} upstream is required, found {n}"));
            }
        }
        for u in &self.upstreams {
            if !(u.base_url.starts_with("http://") || u.base_url.starts_with("https://")) {
                return bad(format!("upstream `{}`: base_url must be http(s)", u.name));
            }
        }
        if !(0.0..=1.0).contains(&self.budget.b) {
            return bad(format!("budget.b must be in [0, 1], got {}", self.budget.b));
        }
        if !(self.budget.alpha > 0.0 && self.budget.alpha < 1.0) {
            return bad(format!("budget.alpha must be in (0, 1), got {}", self.budget.alpha));
        }
        if let Some(r) = self.r_c {
            if !(r.is_finite() && r > 0.0) {
                return bad(format!("r_c must be > 0, got {r}"));
            }
        }
        if self.r_c.is_none() && !self.passthrough {
            return bad("r_c is required unless passthrough = true".into());
        }
        if !(self.device.decode_rate.is_finite() && self.device.decode_rate > 0.0) {
            return bad("device.decode_rate must be > 0".into());
        }
        if !(self.server.tbt_s.is_finite() && self.server.tbt_s > 0.0) {
            return bad("server.tbt_s must be > 0".into());
        }
        if self.refresh_window < 8 {
            return bad("refresh_window must be >= 8".into());
        }
        if self.prompt_lengths.is_empty() || self.prompt_lengths.contains(&0) {
            return bad("prompt_lengths must be non-empty and positive".into());
        }
        if self.default_max_tokens == 0 {
            return bad("default_max_tokens must be >= 1".into());
        }
        self.rates.validate()?;
        self.device_model()?;
        ServerTtftEcdf::new(self.server.ttft_samples.clone())?;
        Ok(())
    }
}
