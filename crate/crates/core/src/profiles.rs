//! Endpoint performance models: device TTFT line, server TTFT ECDF, decode speeds.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Minimum number of samples for a server TTFT distribution.
pub const MIN_ECDF_SAMPLES: usize = 8;

/// Device TTFT as `k * prompt_len + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceTtftModel {
    /// Seconds per prompt token.
    pub k: f64,
    /// Fixed overhead in seconds.
    pub c: f64,
}

impl DeviceTtftModel {
    pub fn new(k: f64, c: f64) -> Result<Self> {
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::InvalidProfile(format!("device k must be > 0, got {k}")));
        }
        if !(c.is_finite() && c >= 0.0) {
            return Err(Error::InvalidProfile(format!("device c must be >= 0, got {c}")));
        }
        Ok(Self { k, c })
    }

    /// Model whose slope is the reciprocal of a prefill throughput.
    pub fn from_prefill_rate(tokens_per_s: f64, c: f64) -> Result<Self> {
        Self::new(1.0 / tokens_per_s, c)
    }

    pub fn predict(&self, prompt_len: u32) -> f64 {
        self.k * prompt_len as f64 + self.c
    }
}

/// Ordinary least squares over `(prompt_len, ttft_s)` pairs.
///
/// A negative intercept is clamped to zero and the slope refit as the line
/// through the origin and the centroid, so short prompts never predict a
/// negative TTFT.
pub fn fit_device_linear(pairs: &[(u32, f64)]) -> Result<DeviceTtftModel> {
    if pairs.len() < 2 {
        return Err(Error::Degenerate("need at least 2 profiling pairs".into()));
    }
    if let Some((_, t)) = pairs.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::InvalidProfile(format!("non-finite ttft {t}")));
    }
    let n = pairs.len() as f64;
    let mean_x = pairs.iter().map(|(l, _)| *l as f64).sum::<f64>() / n;
    let mean_y = pairs.iter().map(|(_, t)| *t).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|(l, _)| (*l as f64 - mean_x).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate(
            "all prompt lengths are identical; slope is undefined".into(),
        ));
    }
    let sxy: f64 = pairs
        .iter()
        .map(|(l, t)| (*l as f64 - mean_x) * (t - mean_y))
        .sum();
    let mut k = sxy / sxx;
    let mut c = mean_y - k * mean_x;
    if c < 0.0 {
        c = 0.0;
        k = mean_y / mean_x;
    }
    if !(k > 0.0) {
        return Err(Error::Degenerate(format!(
            "fitted slope {k} is not positive; device data is not linear in prompt length"
        )));
    }
    DeviceTtftModel::new(k, c)
}

/// Smallest element whose rank `r` (1-based) satisfies `r / n >= q`.
///
/// `sorted` must be ascending and non-empty. `q <= 0` yields the minimum and
/// `q >= 1` the maximum.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let n = sorted.len();
    if q <= 0.0 {
        return sorted[0];
    }
    if q >= 1.0 {
        return sorted[n - 1];
    }
    let nf = n as f64;
    let mut rank = ((q * nf).ceil() as usize).clamp(1, n);
    // Undo float round-up in q*n: keep the smallest rank with rank/n >= q.
    while rank > 1 && ((rank - 1) as f64 / nf) >= q {
        rank -= 1;
    }
    while rank < n && (rank as f64 / nf) < q {
        rank += 1;
    }
    sorted[rank - 1]
}

/// Empirical distribution of server TTFTs (right-continuous step function).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ServerTtftEcdf {
    samples: Vec<f64>,
}

impl ServerTtftEcdf {
    pub fn new(mut samples: Vec<f64>) -> Result<Self> {
        if samples.len() < MIN_ECDF_SAMPLES {
            return Err(Error::InvalidProfile(format!(
                "server TTFT distribution needs at least {MIN_ECDF_SAMPLES} samples, got {}",
                samples.len()
            )));
        }
        if let Some(bad) = samples.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidProfile(format!(
                "server TTFT samples must be positive, got {bad}"
            )));
        }
        samples.sort_by(f64::total_cmp);
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.samples[0]
    }

    pub fn max(&self) -> f64 {
        self.samples[self.samples.len() - 1]
    }

    /// `F^{-1}(q)`: smallest sample at rank `ceil(q n)`.
    pub fn quantile(&self, q: f64) -> f64 {
        quantile_sorted(&self.samples, q)
    }

    /// `F(t)`: fraction of samples `<= t`.
    pub fn eval(&self, t: f64) -> f64 {
        self.count_le(t) as f64 / self.samples.len() as f64
    }

    pub(crate) fn count_le(&self, t: f64) -> usize {
        self.samples.partition_point(|s| *s <= t)
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Returns a copy with every sample multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.samples.iter().map(|s| s * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for ServerTtftEcdf {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ServerTtftEcdf> for Vec<f64> {
    fn from(e: ServerTtftEcdf) -> Self {
        e.samples
    }
}

pub fn ecdf_quantile(f: &ServerTtftEcdf, q: f64) -> f64 {
    f.quantile(q)
}

pub fn ecdf_eval(f: &ServerTtftEcdf, t: f64) -> f64 {
    f.eval(t)
}

/// Pearson product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::param(
            "ys",
            format!("length {} differs from xs length {}", ys.len(), xs.len()),
        ));
    }
    if xs.len() < 2 {
        return Err(Error::Degenerate("pearson needs at least 2 points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance in pearson input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Server inter-token timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ServerTbt {
    Fixed(f64),
    Samples(Vec<f64>),
}

impl ServerTbt {
    pub fn mean(&self) -> f64 {
        match self {
            ServerTbt::Fixed(v) => *v,
            ServerTbt::Samples(s) => s.iter().sum::<f64>() / s.len() as f64,
        }
    }
}

/// Decode speeds of both endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeProfile {
    /// Device decode throughput in tokens/s.
    pub device_rate: f64,
    pub server_tbt: ServerTbt,
}

impl DecodeProfile {
    pub fn new(device_rate: f64, server_tbt: ServerTbt) -> Result<Self> {
        if !(device_rate.is_finite() && device_rate > 0.0) {
            return Err(Error::InvalidProfile(format!(
                "device decode rate must be > 0, got {device_rate}"
            )));
        }
        match &server_tbt {
            ServerTbt::Fixed(v) if !(v.is_finite() && *v > 0.0) => {
                return Err(Error::InvalidProfile(format!(
                    "server TBT must be > 0, got {v}"
                )))
            }
            ServerTbt::Samples(s) if s.is_empty() => {
                return Err(Error::InvalidProfile("server TBT samples are empty".into()))
            }
            ServerTbt::Samples(s) if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) => {
                return Err(Error::InvalidProfile(
                    "server TBT samples must be positive".into(),
                ))
            }
            _ => {}
        }
        Ok(Self {
            device_rate,
            server_tbt,
        })
    }

    pub fn server_rate(&self) -> f64 {
        1.0 / self.server_tbt.mean()
    }
}

/// Device preset measured on a phone: prefill/decode throughput.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DevicePreset {
    pub name: &'static str,
    pub prefill_tok_s: f64,
    pub decode_tok_s: f64,
}

pub const PIXEL7PRO_BLOOM_1B1: DevicePreset = DevicePreset {
    name: "pixel7pro-bloom-1.1b",
    prefill_tok_s: 31.32,
    decode_tok_s: 13.93,
};

pub const PIXEL7PRO_BLOOM_560M: DevicePreset = DevicePreset {
    name: "pixel7pro-bloom-560m",
    prefill_tok_s: 51.80,
    decode_tok_s: 20.14,
};

pub const XIAOMI14_QWEN_0B5: DevicePreset = DevicePreset {
    name: "xiaomi14-qwen1.5-0.5b",
    prefill_tok_s: 79.90,
    decode_tok_s: 21.47,
};

pub const DEVICE_PRESETS: [DevicePreset; 3] =
    [PIXEL7PRO_BLOOM_1B1, PIXEL7PRO_BLOOM_560M, XIAOMI14_QWEN_0B5];

pub fn device_preset(name: &str) -> Option<DevicePreset> {
    DEVICE_PRESETS.iter().copied().find(|p| p.name == name)
}

/// Profile snapshot file.
///
/// ```json
/// {"device": {"k": 0.03, "c": 0.2, "decode_rate": 13.93},
///  "server": {"ttft_samples": [0.4, 0.5], "tbt_samples": [0.02]}}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSnapshot {
    pub device: DeviceSection,
    pub server: ServerSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSection {
    pub k: f64,
    pub c: f64,
    pub decode_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerSection {
    pub ttft_samples: Vec<f64>,
    pub tbt_samples: Vec<f64>,
}

/// Validated models built from a [`ProfileSnapshot`].
#[derive(Debug, Clone, PartialEq)]
pub struct Profiles {
    pub device_ttft: DeviceTtftModel,
    pub server_ttft: ServerTtftEcdf,
    pub decode: DecodeProfile,
}

impl Profiles {
    pub fn from_snapshot(snap: &ProfileSnapshot) -> Result<Self> {
        let server_tbt = match snap.server.tbt_samples.as_slice() {
            [] => return Err(Error::InvalidProfile("server.tbt_samples is empty".into())),
            [one] => ServerTbt::Fixed(*one),
            many => ServerTbt::Samples(many.to_vec()),
        };
        Ok(Self {
            device_ttft: DeviceTtftModel::new(snap.device.k, snap.device.c)?,
            server_ttft: ServerTtftEcdf::new(snap.server.ttft_samples.clone())?,
            decode: DecodeProfile::new(snap.device.decode_rate, server_tbt)?,
        })
    }

    pub fn to_snapshot(&self) -> ProfileSnapshot {
        ProfileSnapshot {
            device: DeviceSection {
                k: self.device_ttft.k,
                c: self.device_ttft.c,
                decode_rate: self.decode.device_rate,
            },
            server: ServerSection {
                ttft_samples: self.server_ttft.samples().to_vec(),
                tbt_samples: match &self.decode.server_tbt {
                    ServerTbt::Fixed(v) => vec![*v],
                    ServerTbt::Samples(s) => s.clone(),
                },
            },
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_snapshot(&serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_snapshot()).expect("profile serializes")
    }
}
