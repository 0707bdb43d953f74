//! Mid-stream decode migration.
//!
//! The source endpoint keeps decoding while the consumer drains tokens at a
//! paced rate `r_c`. Once the undelivered buffer holds `B = ceil(r_c * t_m)`
//! tokens the target is triggered with the prefix so far; the source keeps
//! producing until the target's first token arrives, then stops. Delivered
//! tokens are the source prefix up to the trigger followed by the target's
//! continuation; source tokens produced after the trigger are a fallback
//! only and get dropped at the stop barrier.

use serde::{Deserialize, Serialize};

use crate::{Endpoint, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MigrationParams {
    /// Consumer pacing rate, tokens/s.
    pub r_c: f64,
    /// Source generation rate, tokens/s.
    pub r_g_source: f64,
    /// Estimated time for the target to produce its first token.
    pub t_m: f64,
    /// Unified $/token decode saving.
    pub delta_decode_cost: f64,
    /// Unified $ to bring the target online.
    pub overhead_cost: f64,
}

impl MigrationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_c.is_finite() && self.r_c > 0.0) {
            return Err(Error::param("r_c", "must be > 0"));
        }
        if !(self.t_m.is_finite() && self.t_m >= 0.0) {
            return Err(Error::param("t_m", "must be >= 0"));
        }
        if self.r_g_source <= self.r_c {
            return Err(Error::param(
                "r_g_source",
                format!(
                    "source rate {} tok/s does not exceed consumption rate {} tok/s; no buffer can build",
                    self.r_g_source, self.r_c
                ),
            ));
        }
        Ok(())
    }
}

/// Projected saving: `delta_decode_cost * l_remaining`.
pub fn migration_gain(delta_decode_cost: f64, l_remaining: f64) -> f64 {
    delta_decode_cost * l_remaining
}

/// Migrate only when the saving strictly exceeds the overhead.
pub fn should_migrate(gain: f64, overhead_cost: f64) -> bool {
    gain > overhead_cost
}

/// `ceil(r_c * t_m)`, never negative.
pub fn buffer_target(r_c: f64, t_m: f64) -> u32 {
    let b = (r_c * t_m).max(0.0);
    // 4.5 * 1.0 must be 5 but 0.1 * 30.0 must stay 3
    let r = b.round();
    let v = if (b - r).abs() <= 1e-9 * r.max(1.0) { r } else { b.ceil() };
    v as u32
}

/// Paced delivery times: token `i` is released no earlier than it is
/// generated and at least `1 / r_c` after token `i - 1`.
pub fn pace(gen_s: &[f64], r_c: Option<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(gen_s.len());
    let slot = r_c.map(|r| 1.0 / r);
    for (i, g) in gen_s.iter().enumerate() {
        let d = match (i, slot) {
            (0, _) | (_, None) => *g,
            (_, Some(slot)) => g.max(out[i - 1] + slot),
        };
        out.push(d);
    }
    out
}

/// Timing inputs for one handoff.
#[derive(Debug, Clone, Copy)]
pub struct HandoffState<'a> {
    pub source: Endpoint,
    /// Generation time of every token the source would produce without
    /// migration; index 0 is the first token.
    pub source_gen_s: &'a [f64],
    /// Real time from trigger until the target's first token.
    pub actual_latency_s: f64,
    /// Seconds between target tokens once it is decoding.
    pub target_interval_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandoffPlan {
    pub buffer_target: u32,
    /// Last token index produced by the source that is delivered; the target
    /// continues from `start_after_token + 1`.
    pub start_after_token: usize,
    /// Last token index the source generated before it was stopped.
    pub source_stop_token: usize,
    pub trigger_s: f64,
    pub target_ready_s: f64,
    pub delayed_tokens: u32,
    /// Generation time and producer of every delivered token.
    pub gen_s: Vec<f64>,
    pub producer: Vec<Endpoint>,
    /// Paced delivery times.
    pub deliver_s: Vec<f64>,
}

impl HandoffPlan {
    /// Source tokens generated after the trigger and discarded.
    pub fn discarded_source_tokens(&self) -> usize {
        self.source_stop_token - self.start_after_token
    }

    pub fn target_tokens(&self) -> usize {
        self.gen_s.len() - self.start_after_token - 1
    }
}

/// Index of the first source token at whose generation instant the
/// undelivered buffer holds at least `b` tokens. Only indices that leave at
/// least one token for the target qualify.
pub fn find_trigger(source_gen_s: &[f64], deliver_s: &[f64], b: u32) -> Option<usize> {
    let n = source_gen_s.len();
    let mut delivered = 0usize;
    for j in 0..n.saturating_sub(1) {
        let now = source_gen_s[j];
        while delivered < n && deliver_s[delivered] <= now {
            delivered += 1;
        }
        let buffered = (j + 1).saturating_sub(delivered);
        if buffered >= b as usize {
            return Some(j);
        }
    }
    None
}

/// Number of pacing slots the handoff adds to the consumer's lag.
///
/// Lag of token `i` is `deliver_i - (deliver_0 + i / r_c)`; with rate-capped
/// pacing it never shrinks, so the added lag from the trigger token to the
/// last token, expressed in slots, counts the tokens pushed late.
pub fn delayed_tokens(deliver_s: &[f64], from: usize, r_c: f64) -> u32 {
    if deliver_s.is_empty() || from >= deliver_s.len() {
        return 0;
    }
    let lag = |i: usize| deliver_s[i] - (deliver_s[0] + i as f64 / r_c);
    let added = lag(deliver_s.len() - 1) - lag(from);
    (added * r_c - 1e-9).ceil().max(0.0) as u32
}

/// Plans the handoff, or `None` when the buffer never reaches `B` before the
/// source would finish (the source then completes the request alone).
pub fn schedule_handoff(params: &MigrationParams, state: &HandoffState<'_>) -> Result<Option<HandoffPlan>> {
    params.validate()?;
    if !(state.actual_latency_s.is_finite() && state.actual_latency_s >= 0.0) {
        return Err(Error::param("actual_latency_s", "must be >= 0"));
    }
    if !(state.target_interval_s.is_finite() && state.target_interval_s > 0.0) {
        return Err(Error::param("target_interval_s", "must be > 0"));
    }
    let src = state.source_gen_s;
    let n = src.len();
    if n < 2 {
        return Ok(None);
    }
    let b = buffer_target(params.r_c, params.t_m);
    let source_deliver = pace(src, Some(params.r_c));
    let Some(j) = find_trigger(src, &source_deliver, b) else {
        return Ok(None);
    };
    let trigger_s = src[j];
    let target_ready_s = trigger_s + state.actual_latency_s;

    let mut stop = j;
    while stop + 1 < n && src[stop + 1] < target_ready_s {
        stop += 1;
    }
    if stop + 1 >= n && src[n - 1] < target_ready_s {
        // source finished before the target came online
        return Ok(None);
    }

    let mut gen_s = Vec::with_capacity(n);
    let mut producer = Vec::with_capacity(n);
    gen_s.extend_from_slice(&src[..=j]);
    producer.extend(std::iter::repeat_n(state.source, j + 1));
    for k in 0..(n - j - 1) {
        gen_s.push(target_ready_s + k as f64 * state.target_interval_s);
        producer.push(state.source.other());
    }
    let deliver_s = pace(&gen_s, Some(params.r_c));
    let delayed = delayed_tokens(&deliver_s, j, params.r_c);
    Ok(Some(HandoffPlan {
        buffer_target: b,
        start_after_token: j,
        source_stop_token: stop,
        trigger_s,
        target_ready_s,
        delayed_tokens: delayed,
        gen_s,
        producer,
        deliver_s,
    }))
}

/// Prefix handed to the target endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PrefixPayload {
    Ids { prefix_ids: Vec<u32> },
    Text { prefix_text: String },
}

/// Migration transfer payload. Only the prompt and generated prefix travel;
/// there is no field for KV cache or other intermediate state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPayload {
    pub req_id: String,
    pub prompt: PromptPayload,
    #[serde(flatten)]
    pub prefix: PrefixPayload,
    pub next_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptPayload {
    Ids(Vec<u32>),
    Text(String),
}

/// Token IDs when both endpoints share a vocabulary, detokenized text
/// otherwise.
pub fn token_id_payload(
    req_id: &str,
    prompt: PromptPayload,
    tokens: &[u32],
    shared_vocab: bool,
    detokenize: impl Fn(&[u32]) -> String,
) -> TransferPayload {
    let prefix = if shared_vocab {
        PrefixPayload::Ids {
            prefix_ids: tokens.to_vec(),
        }
    } else {
        PrefixPayload::Text {
            prefix_text: detokenize(tokens),
        }
    };
    TransferPayload {
        req_id: req_id.to_string(),
        prompt,
        prefix,
        next_index: tokens.len(),
    }
}
