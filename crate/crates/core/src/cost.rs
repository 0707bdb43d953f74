//! Unified cost accounting.
//!
//! Server usage is billed in dollars per token. Device usage is counted in
//! FLOPs and converted to dollars through an exchange rate `lambda`
//! expressed in dollars per million FLOPs.

use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::{Endpoint, Error, Result};

/// Exchange rate used when the server is the constrained endpoint.
pub const LAMBDA_SERVER_CONSTRAINED: f64 = 0.3;
/// Exchange rate used when the device is the constrained endpoint.
pub const LAMBDA_DEVICE_CONSTRAINED: f64 = 5.0;

/// Decoder-only transformer dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub name: String,
    pub n_layers: u64,
    pub d_model: u64,
    pub n_heads: u64,
    pub d_ffn: u64,
    pub vocab: u64,
}

impl ModelArch {
    pub fn new(
        name: impl Into<String>,
        n_layers: u64,
        d_model: u64,
        n_heads: u64,
        d_ffn: u64,
        vocab: u64,
    ) -> Result<Self> {
        let arch = Self {
            name: name.into(),
            n_layers,
            d_model,
            n_heads,
            d_ffn,
            vocab,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.n_layers, self.d_model, self.n_heads, self.d_ffn, self.vocab].contains(&0) {
            return Err(Error::param("arch", "all dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::param(
                "arch",
                format!(
                    "d_model {} is not divisible by n_heads {}",
                    self.d_model, self.n_heads
                ),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> u64 {
        self.d_model / self.n_heads
    }

    pub fn bloom_1b1() -> Self {
        Self::new("bloom-1.1b", 24, 1024, 16, 4096, 250_880).unwrap()
    }

    pub fn bloom_560m() -> Self {
        Self::new("bloom-560m", 24, 512, 8, 2048, 250_880).unwrap()
    }

    pub fn qwen1_5_0b5() -> Self {
        Self::new("qwen1.5-0.5b", 24, 768, 12, 2048, 151_936).unwrap()
    }

    pub fn presets() -> Vec<Self> {
        vec![Self::bloom_1b1(), Self::bloom_560m(), Self::qwen1_5_0b5()]
    }

    pub fn preset(name: &str) -> Option<Self> {
        Self::presets().into_iter().find(|a| a.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

/// Per-layer attention FLOPs during prefill at sequence length `l`, scores
/// counted for a single head: `n_layers * (3d^2 + l^2 d / h + l d + d^2)`.
pub fn flops_attention_prefill(arch: &ModelArch, l: u64) -> u128 {
    attention(arch, l, Phase::Prefill, AttentionCount::PerHead)
}

/// Decode attention at context length `l`; the KV cache removes the
/// quadratic term: `n_layers * (3d^2 + l d / h + l d + d^2)`.
pub fn flops_attention_decode(arch: &ModelArch, l: u64) -> u128 {
    attention(arch, l, Phase::Decode, AttentionCount::PerHead)
}

/// How the score/context term of attention is counted.
///
/// `PerHead` is the closed form above (one head's `d/h` slice). `AllHeads`
/// sums that term over every head, which is what the published per-token
/// totals correspond to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionCount {
    PerHead,
    #[default]
    AllHeads,
}

fn attention(arch: &ModelArch, l: u64, phase: Phase, count: AttentionCount) -> u128 {
    let d = arch.d_model as u128;
    let l = l as u128;
    let per_head = arch.head_dim() as u128;
    let heads = match count {
        AttentionCount::PerHead => 1,
        AttentionCount::AllHeads => arch.n_heads as u128,
    };
    let score = match phase {
        Phase::Prefill => l * l * per_head * heads,
        Phase::Decode => l * per_head * heads,
    };
    arch.n_layers as u128 * (3 * d * d + score + l * d + d * d)
}

/// FLOPs per token split by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub attention: u128,
    pub ffn: u128,
    pub layer_norm: u128,
    pub embedding: u128,
    pub output: u128,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u128 {
        self.attention + self.ffn + self.layer_norm + self.embedding + self.output
    }

    /// Component shares in percent, in field order.
    pub fn shares_pct(&self) -> [f64; 5] {
        let t = self.total() as f64;
        [
            self.attention,
            self.ffn,
            self.layer_norm,
            self.embedding,
            self.output,
        ]
        .map(|v| 100.0 * v as f64 / t)
    }
}

pub fn flops_breakdown(
    arch: &ModelArch,
    l: u64,
    phase: Phase,
    count: AttentionCount,
) -> FlopsBreakdown {
    let layers = arch.n_layers as u128;
    let d = arch.d_model as u128;
    FlopsBreakdown {
        attention: attention(arch, l, phase, count),
        // up and down projections
        ffn: layers * 2 * d * arch.d_ffn as u128,
        // two norms per layer, scale + shift
        layer_norm: layers * 2 * (2 * d),
        embedding: d * arch.vocab as u128,
        output: d * arch.vocab as u128,
    }
}

/// Total FLOPs for one token at sequence length `l`.
pub fn flops_per_token_total(arch: &ModelArch, l: u64, phase: Phase) -> u128 {
    flops_breakdown(arch, l, phase, AttentionCount::default()).total()
}

/// Prefill FLOPs of a whole prompt, approximated as `l` tokens at the
/// per-token cost for length `l`.
pub fn request_prefill_flops(arch: &ModelArch, prompt_len: u64) -> u128 {
    flops_per_token_total(arch, prompt_len, Phase::Prefill) * prompt_len as u128
}

/// Decode FLOPs for tokens generated at contexts `prompt_len + 1 ..= prompt_len + n`.
pub fn request_decode_flops(arch: &ModelArch, prompt_len: u64, n: u64) -> u128 {
    (1..=n)
        .map(|i| flops_per_token_total(arch, prompt_len + i, Phase::Decode))
        .sum()
}

/// One row of a pricing table (USD per million tokens).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pricing {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vendor: Option<String>,
    pub input_per_mtok: f64,
    pub output_per_mtok: f64,
}

impl Pricing {
    fn row(model: &str, vendor: &str, input: f64, output: f64) -> Self {
        Self {
            model: model.into(),
            vendor: Some(vendor.into()),
            input_per_mtok: input,
            output_per_mtok: output,
        }
    }

    pub fn input_per_token(&self) -> f64 {
        self.input_per_mtok / 1e6
    }

    pub fn output_per_token(&self) -> f64 {
        self.output_per_mtok / 1e6
    }
}

/// Public list prices (October 2024).
pub fn default_pricing() -> Vec<Pricing> {
    vec![
        Pricing::row("DeepSeek-V2.5", "DeepSeek", 0.14, 0.28),
        Pricing::row("GPT-4o-mini", "OpenAI", 0.15, 0.60),
        Pricing::row("LLaMa-3.1-70b", "Hyperbolic", 0.40, 0.40),
        Pricing::row("LLaMa-3.1-70b", "Amazon", 0.99, 0.99),
        Pricing::row("Command", "Cohere", 1.25, 2.00),
        Pricing::row("GPT-4o", "OpenAI", 2.50, 10.0),
        Pricing::row("Claude-3.5-Sonnet", "Anthropic", 3.00, 15.0),
        Pricing::row("o1-preview", "OpenAI", 15.0, 60.0),
    ]
}

/// First row whose model name matches (case-insensitive).
pub fn find_pricing<'a>(table: &'a [Pricing], model: &str) -> Option<&'a Pricing> {
    table.iter().find(|p| p.model.eq_ignore_ascii_case(model))
}

pub fn parse_pricing(json: &str) -> Result<Vec<Pricing>> {
    let table: Vec<Pricing> = serde_json::from_str(json)?;
    for p in &table {
        if !(p.input_per_mtok >= 0.0 && p.output_per_mtok >= 0.0) {
            return Err(Error::param("pricing", format!("negative price for {}", p.model)));
        }
    }
    Ok(table)
}

/// Per-token costs of both endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRates {
    /// $/token
    pub server_prefill: f64,
    /// $/token
    pub server_decode: f64,
    /// FLOPs/token
    pub device_prefill: f64,
    /// FLOPs/token
    pub device_decode: f64,
    /// $ per million FLOPs
    pub lambda: f64,
}

impl CostRates {
    pub fn new(
        server_prefill: f64,
        server_decode: f64,
        device_prefill: f64,
        device_decode: f64,
        lambda: f64,
    ) -> Result<Self> {
        let rates = Self {
            server_prefill,
            server_decode,
            device_prefill,
            device_decode,
            lambda,
        };
        rates.validate()?;
        Ok(rates)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.server_prefill,
            self.server_decode,
            self.device_prefill,
            self.device_decode,
            self.lambda,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::param("rates", "all cost rates must be finite and >= 0"));
        }
        Ok(())
    }

    /// Server prices from a pricing row, device FLOPs from the calculator at
    /// reference length `ref_len`.
    pub fn from_arch(pricing: &Pricing, arch: &ModelArch, ref_len: u64, lambda: f64) -> Result<Self> {
        Self::new(
            pricing.input_per_token(),
            pricing.output_per_token(),
            flops_per_token_total(arch, ref_len, Phase::Prefill) as f64,
            flops_per_token_total(arch, ref_len, Phase::Decode) as f64,
            lambda,
        )
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn flops_to_usd(&self, flops: f64) -> f64 {
        self.lambda * flops / 1e6
    }

    /// Unified $/token for a phase on an endpoint.
    pub fn per_token_usd(&self, endpoint: Endpoint, phase: Phase) -> f64 {
        match (endpoint, phase) {
            (Endpoint::Server, Phase::Prefill) => self.server_prefill,
            (Endpoint::Server, Phase::Decode) => self.server_decode,
            (Endpoint::Device, Phase::Prefill) => self.flops_to_usd(self.device_prefill),
            (Endpoint::Device, Phase::Decode) => self.flops_to_usd(self.device_decode),
        }
    }
}

/// Token and FLOPs counts billed for one or more requests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub server_prefill_tokens: f64,
    pub server_decode_tokens: f64,
    pub device_prefill_flops: f64,
    pub device_decode_flops: f64,
}

impl Add for Usage {
    type Output = Usage;

    fn add(self, o: Usage) -> Usage {
        Usage {
            server_prefill_tokens: self.server_prefill_tokens + o.server_prefill_tokens,
            server_decode_tokens: self.server_decode_tokens + o.server_decode_tokens,
            device_prefill_flops: self.device_prefill_flops + o.device_prefill_flops,
            device_decode_flops: self.device_decode_flops + o.device_decode_flops,
        }
    }
}

impl Usage {
    pub fn cost(&self, rates: &CostRates) -> f64 {
        unified_request_cost(
            rates,
            self.server_prefill_tokens,
            self.server_decode_tokens,
            self.device_prefill_flops,
            self.device_decode_flops,
        )
    }
}

/// `c_s^p * sp + c_s^d * sd + lambda * (dp + dd) / 1e6`.
pub fn unified_request_cost(
    rates: &CostRates,
    server_prefill_toks: f64,
    server_decode_toks: f64,
    device_prefill_flops: f64,
    device_decode_flops: f64,
) -> f64 {
    rates.server_prefill * server_prefill_toks
        + rates.server_decode * server_decode_toks
        + rates.flops_to_usd(device_prefill_flops + device_decode_flops)
}

/// Budget ratio, tail ratio and which endpoint the budget applies to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub b: f64,
    pub alpha: f64,
    pub constrained: Endpoint,
}

impl BudgetSpec {
    pub fn new(b: f64, alpha: f64, constrained: Endpoint) -> Result<Self> {
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::param("b", format!("budget ratio must be in [0, 1], got {b}")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::param("alpha", format!("tail ratio must be in (0, 1), got {alpha}")));
        }
        Ok(Self { b, alpha, constrained })
    }
}
