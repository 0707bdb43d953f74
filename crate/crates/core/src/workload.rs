//! Request traces: ingestion, log-normal fitting and synthetic generation.

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default generation-length cap used for cost experiments.
pub const DEFAULT_GEN_CAP: u32 = 128;

/// One streaming inference job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: String,
    pub arrival_s: f64,
    pub prompt_len: u32,
    pub output_len: u32,
    /// Measured server TTFT, used when replaying recorded traces.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ttft_s: Option<f64>,
    /// Measured server inter-token intervals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tbt_s: Option<Vec<f64>>,
}

impl Request {
    pub fn new(id: impl Into<String>, arrival_s: f64, prompt_len: u32, output_len: u32) -> Self {
        Self {
            id: id.into(),
            arrival_s,
            prompt_len,
            output_len,
            ttft_s: None,
            tbt_s: None,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.prompt_len == 0 {
            return Err(format!("request `{}`: prompt_len must be >= 1", self.id));
        }
        if self.output_len == 0 {
            return Err(format!("request `{}`: output_len must be >= 1", self.id));
        }
        if !self.arrival_s.is_finite() || self.arrival_s < 0.0 {
            return Err(format!(
                "request `{}`: arrival_s must be a non-negative number",
                self.id
            ));
        }
        if let Some(t) = self.ttft_s {
            if !t.is_finite() || t <= 0.0 {
                return Err(format!("request `{}`: ttft_s must be positive", self.id));
            }
        }
        if let Some(tbt) = &self.tbt_s {
            if tbt.iter().any(|t| !t.is_finite() || *t <= 0.0) {
                return Err(format!("request `{}`: tbt_s entries must be positive", self.id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub source: String,
    pub gen_cap: Option<u32>,
}

/// Requests sorted by arrival time. Never empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    requests: Vec<Request>,
    pub meta: TraceMeta,
}

impl Trace {
    /// Validates every request and stably sorts by arrival.
    pub fn new(mut requests: Vec<Request>, meta: TraceMeta) -> Result<Self> {
        if requests.is_empty() {
            return Err(Error::EmptyTrace);
        }
        let mut seen = HashSet::with_capacity(requests.len());
        for (i, r) in requests.iter().enumerate() {
            r.validate().map_err(|msg| Error::Parse { line: i + 1, msg })?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate request id `{}`", r.id),
                });
            }
        }
        requests.sort_by(|a, b| a.arrival_s.total_cmp(&b.arrival_s));
        Ok(Self { requests, meta })
    }

    pub fn requests(&self) -> &[Request] {
        &self.requests
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn prompt_lens(&self) -> impl Iterator<Item = u32> + '_ {
        self.requests.iter().map(|r| r.prompt_len)
    }

    /// Output length after applying the generation cap, if any.
    pub fn effective_output_len(&self, r: &Request) -> u32 {
        match self.meta.gen_cap {
            Some(cap) => r.output_len.min(cap).max(1),
            None => r.output_len,
        }
    }

    /// Recorded server TTFTs, in trace order.
    pub fn recorded_ttfts(&self) -> Vec<f64> {
        self.requests.iter().filter_map(|r| r.ttft_s).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.requests {
            out.push_str(&serde_json::to_string(r).expect("request serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Jsonl,
}

impl std::str::FromStr for TraceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "ndjson" => Ok(TraceFormat::Jsonl),
            other => Err(Error::param("format", format!("unknown trace format `{other}`"))),
        }
    }
}

pub fn load_trace(path: &Path, format: TraceFormat) -> Result<Trace> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let source = path.display().to_string();
    match format {
        TraceFormat::Jsonl => parse_jsonl(reader, &source),
    }
}

/// Parses one request per line. Blank lines are skipped; unknown fields ignored.
pub fn parse_jsonl<R: BufRead>(reader: R, source: &str) -> Result<Trace> {
    let mut requests = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let req: Request = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        req.validate().map_err(|msg| Error::Parse { line: line_no, msg })?;
        requests.push(req);
        lines.push(line_no);
    }
    if requests.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut seen = HashSet::with_capacity(requests.len());
    for (r, line) in requests.iter().zip(&lines) {
        if !seen.insert(r.id.clone()) {
            return Err(Error::Parse {
                line: *line,
                msg: format!("duplicate request id `{}`", r.id),
            });
        }
    }
    Trace::new(
        requests,
        TraceMeta {
            source: source.to_string(),
            gen_cap: None,
        },
    )
}

/// Log-normal parameters over natural-log values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalSpec {
    pub mu: f64,
    pub sigma: f64,
    pub n: usize,
    pub seed: u64,
}

impl LogNormalSpec {
    pub fn new(mu: f64, sigma: f64, n: usize, seed: u64) -> Result<Self> {
        let spec = Self { mu, sigma, n, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() {
            return Err(Error::InvalidDistribution("mu must be finite".into()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if self.n == 0 {
            return Err(Error::InvalidDistribution("n must be >= 1".into()));
        }
        Ok(())
    }

    fn dist(&self) -> LogNormal<f64> {
        LogNormal::new(self.mu, self.sigma).expect("validated log-normal parameters")
    }

    /// Draws `n` real values with the spec's own seed.
    pub fn sample(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let dist = self.dist();
        Ok((0..self.n).map(|_| dist.sample(&mut rng)).collect())
    }
}

/// Fits mean and population standard deviation of `ln x`.
pub fn fit_lognormal(samples: &[f64]) -> Result<LogNormalSpec> {
    if samples.len() < 2 {
        return Err(Error::InvalidDistribution(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    if let Some(bad) = samples.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
        return Err(Error::InvalidDistribution(format!(
            "samples must be positive, got {bad}"
        )));
    }
    let n = samples.len() as f64;
    let mu = samples.iter().map(|x| x.ln()).sum::<f64>() / n;
    let var = samples.iter().map(|x| (x.ln() - mu).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if sigma <= 1e-12 {
        return Err(Error::Degenerate(format!(
            "log-values have zero spread (mu = {mu})"
        )));
    }
    Ok(LogNormalSpec {
        mu,
        sigma,
        n: samples.len(),
        seed: 0,
    })
}

/// Ceil to a whole token count, floor 1. Values within 1e-9 relative of an
/// integer snap to it so `exp(ln 100)` stays 100.
pub fn to_token_count(x: f64) -> u32 {
    let r = x.round();
    let v = if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x.ceil()
    };
    v.clamp(1.0, u32::MAX as f64) as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputLen {
    Fixed { tokens: u32 },
    LogNormal { mu: f64, sigma: f64, cap: u32 },
}

impl Default for OutputLen {
    fn default() -> Self {
        OutputLen::Fixed {
            tokens: DEFAULT_GEN_CAP,
        }
    }
}

/// Full description of a synthetic trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub prompt: LogNormalSpec,
    pub mean_interarrival_s: f64,
    #[serde(default)]
    pub output: OutputLen,
    /// When set, each request carries a recorded server TTFT drawn from this
    /// log-normal (seconds).
    #[serde(default)]
    pub server_ttft: Option<LogNormalSpec>,
}

impl SyntheticSpec {
    pub fn generate(&self, seed: u64) -> Result<Trace> {
        self.prompt.validate()?;
        if !(self.mean_interarrival_s.is_finite() && self.mean_interarrival_s > 0.0) {
            return Err(Error::param(
                "mean_interarrival_s",
                "must be a positive number of seconds",
            ));
        }
        let out_dist = match self.output {
            OutputLen::Fixed { tokens } if tokens == 0 => {
                return Err(Error::param("output", "fixed output length must be >= 1"))
            }
            OutputLen::Fixed { .. } => None,
            OutputLen::LogNormal { mu, sigma, cap } => {
                if cap == 0 {
                    return Err(Error::param("output", "cap must be >= 1"));
                }
                Some(
                    LogNormal::new(mu, sigma)
                        .map_err(|e| Error::InvalidDistribution(e.to_string()))?,
                )
            }
        };
        let ttft_dist = match &self.server_ttft {
            Some(spec) => {
                spec.validate()?;
                Some(spec.dist())
            }
            None => None,
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompt_dist = self.prompt.dist();
        let gaps = Exp::new(1.0 / self.mean_interarrival_s)
            .map_err(|e| Error::InvalidDistribution(e.to_string()))?;

        let mut t = 0.0;
        let mut requests = Vec::with_capacity(self.prompt.n);
        for i in 0..self.prompt.n {
            if i > 0 {
                t += gaps.sample(&mut rng);
            }
            let prompt_len = to_token_count(prompt_dist.sample(&mut rng));
            let output_len = match (&self.output, &out_dist) {
                (OutputLen::Fixed { tokens }, _) => *tokens,
                (OutputLen::LogNormal { cap, .. }, Some(d)) => {
                    to_token_count(d.sample(&mut rng)).min(*cap)
                }
                _ => unreachable!(),
            };
            let mut req = Request::new(format!("req-{i:06}"), t, prompt_len, output_len);
            if let Some(d) = &ttft_dist {
                req.ttft_s = Some(d.sample(&mut rng).max(1e-6));
            }
            requests.push(req);
        }
        let gen_cap = match self.output {
            OutputLen::Fixed { tokens } => Some(tokens),
            OutputLen::LogNormal { cap, .. } => Some(cap),
        };
        Trace::new(
            requests,
            TraceMeta {
                source: format!("synthetic(seed={seed})"),
                gen_cap,
            },
        )
    }
}

/// Log-normal prompt lengths, exponential inter-arrivals, fixed output length
/// at the default generation cap.
pub fn gen_synthetic(
    spec_len: &LogNormalSpec,
    mean_interarrival_s: f64,
    seed: u64,
) -> Result<Trace> {
    SyntheticSpec {
        prompt: *spec_len,
        mean_interarrival_s,
        output: OutputLen::default(),
        server_ttft: None,
    }
    .generate(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;
    use std::io::Cursor;

    fn jsonl(rows: &[&str]) -> Result<Trace> {
        parse_jsonl(Cursor::new(rows.join("\n")), "test")
    }

    #[test]
    fn three_valid_rows_in_order() {
        let t = jsonl(&[
            r#"{"id":"a","arrival_s":0.0,"prompt_len":10,"output_len":5}"#,
            r#"{"id":"b","arrival_s":1.5,"prompt_len":20,"output_len":5,"extra":true}"#,
            r#"{"id":"c","arrival_s":3.0,"prompt_len":30,"output_len":5,"ttft_s":0.4,"tbt_s":[0.05,0.06]}"#,
        ])
        .unwrap();
        let ids: Vec<_> = t.requests().iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(t.requests()[2].ttft_s, Some(0.4));
        assert_eq!(t.requests()[2].tbt_s.as_deref(), Some(&[0.05, 0.06][..]));
    }

    #[test]
    fn zero_prompt_len_names_the_row() {
        let err = jsonl(&[
            r#"{"id":"a","arrival_s":0.0,"prompt_len":10,"output_len":5}"#,
            r#"{"id":"b","arrival_s":1.0,"prompt_len":0,"output_len":5}"#,
        ])
        .unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("prompt_len"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let err = jsonl(&[
            r#"{"id":"a","arrival_s":0.0,"prompt_len":10,"output_len":5}"#,
            "",
            r#"{"id":"b","arrival_s":1.0,"#,
        ])
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = jsonl(&[
            r#"{"id":"a","arrival_s":0.0,"prompt_len":10,"output_len":5}"#,
            r#"{"id":"a","arrival_s":1.0,"prompt_len":10,"output_len":5}"#,
        ])
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(jsonl(&["", "  "]), Err(Error::EmptyTrace)));
    }

    #[test]
    fn out_of_order_rows_sorted_stably() {
        let rows = [
            (5.0, "a"),
            (1.0, "b"),
            (5.0, "c"),
            (0.5, "d"),
            (1.0, "e"),
        ];
        let lines: Vec<String> = rows
            .iter()
            .map(|(t, id)| {
                format!(r#"{{"id":"{id}","arrival_s":{t},"prompt_len":3,"output_len":2}}"#)
            })
            .collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let trace = jsonl(&refs).unwrap();

        // Oracle: insertion sort, which is stable by construction.
        let mut oracle: Vec<(f64, &str)> = Vec::new();
        for &(t, id) in &rows {
            let pos = oracle.iter().position(|(u, _)| *u > t).unwrap_or(oracle.len());
            oracle.insert(pos, (t, id));
        }
        let got: Vec<(f64, &str)> = trace
            .requests()
            .iter()
            .map(|r| (r.arrival_s, r.id.as_str()))
            .collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn fit_rejects_zero_spread() {
        assert!(matches!(fit_lognormal(&[E, E, E]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn fit_two_points() {
        let spec = fit_lognormal(&[1.0, E * E]).unwrap();
        assert!((spec.mu - 1.0).abs() < 1e-12);
        assert!((spec.sigma - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_input_errors() {
        assert!(fit_lognormal(&[1.0]).is_err());
        assert!(fit_lognormal(&[1.0, 0.0]).is_err());
        assert!(fit_lognormal(&[1.0, -2.0]).is_err());
    }

    #[test]
    fn fit_round_trip_monte_carlo() {
        let spec = LogNormalSpec::new(0.5, 0.8, 100_000, 7).unwrap();
        let fitted = fit_lognormal(&spec.sample().unwrap()).unwrap();
        assert!((fitted.mu - 0.5).abs() <= 0.02, "mu {}", fitted.mu);
        assert!((fitted.sigma - 0.8).abs() <= 0.02, "sigma {}", fitted.sigma);
    }

    #[test]
    fn synthetic_mean_interarrival() {
        let spec = LogNormalSpec::new(4.0, 0.5, 1000, 0).unwrap();
        let trace = gen_synthetic(&spec, 30.0, 11).unwrap();
        let reqs = trace.requests();
        let mean = (reqs.last().unwrap().arrival_s - reqs[0].arrival_s) / (reqs.len() - 1) as f64;
        assert!((27.0..=33.0).contains(&mean), "mean inter-arrival {mean}");
    }

    #[test]
    fn synthetic_deterministic() {
        let spec = LogNormalSpec::new(4.0, 0.9, 500, 0).unwrap();
        let a = gen_synthetic(&spec, 2.0, 99).unwrap();
        let b = gen_synthetic(&spec, 2.0, 99).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        let c = gen_synthetic(&spec, 2.0, 100).unwrap();
        assert_ne!(a.to_jsonl(), c.to_jsonl());
    }

    #[test]
    fn synthetic_degenerate_lengths() {
        let spec = LogNormalSpec::new(100f64.ln(), 1e-12, 200, 0).unwrap();
        let trace = gen_synthetic(&spec, 1.0, 3).unwrap();
        assert!(trace.prompt_lens().all(|l| l == 100));
    }

    #[test]
    fn synthetic_rejects_bad_interarrival() {
        let spec = LogNormalSpec::new(1.0, 1.0, 10, 0).unwrap();
        assert!(gen_synthetic(&spec, 0.0, 1).is_err());
        assert!(LogNormalSpec::new(1.0, 0.0, 10, 0).is_err());
        assert!(LogNormalSpec::new(1.0, 1.0, 0, 0).is_err());
    }

    #[test]
    fn token_count_rounding() {
        assert_eq!(to_token_count(0.2), 1);
        assert_eq!(to_token_count(1.0), 1);
        assert_eq!(to_token_count(1.5), 2);
        assert_eq!(to_token_count(100f64.ln().exp()), 100);
    }

    #[test]
    fn synthetic_server_ttft_and_output_cap() {
        let spec = SyntheticSpec {
            prompt: LogNormalSpec::new(4.0, 0.7, 300, 0).unwrap(),
            mean_interarrival_s: 1.0,
            output: OutputLen::LogNormal {
                mu: 5.0,
                sigma: 1.0,
                cap: 128,
            },
            server_ttft: Some(LogNormalSpec::new(-0.5, 0.8, 1, 0).unwrap()),
        };
        let trace = spec.generate(5).unwrap();
        assert!(trace.requests().iter().all(|r| r.output_len <= 128));
        assert_eq!(trace.recorded_ttfts().len(), 300);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ingestion_preserves_multiset(rows in proptest::collection::vec(
                (0.0f64..1000.0, 1u32..5000, 1u32..500), 1..40)
            ) {
                let lines: Vec<String> = rows.iter().enumerate().map(|(i, (t, p, o))| {
                    serde_json::to_string(&Request::new(format!("r{i}"), *t, *p, *o)).unwrap()
                }).collect();
                let trace = parse_jsonl(Cursor::new(lines.join("\n")), "p").unwrap();
                let mut want: Vec<(u64, u32, u32)> =
                    rows.iter().map(|(t, p, o)| (t.to_bits(), *p, *o)).collect();
                let mut got: Vec<(u64, u32, u32)> = trace.requests().iter()
                    .map(|r| (r.arrival_s.to_bits(), r.prompt_len, r.output_len)).collect();
                want.sort();
                got.sort();
                prop_assert_eq!(want, got);
                prop_assert!(trace.requests().windows(2).all(|w| w[0].arrival_s <= w[1].arrival_s));
            }
        }
    }
}
