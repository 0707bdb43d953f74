//! Dispatch policies.
//!
//! Which endpoint is the constrained one decides the policy shape:
//!
//! * server-constrained: a length threshold. Prompts up to `l_th` run on the
//!   device only; longer prompts race both endpoints.
//! * device-constrained: a wait schedule. The server is always issued; the
//!   device starts after `w(l)` seconds unless the server has already
//!   produced its first token.
//!
//! Both are tabulated over the empirical prompt-length support.

use serde::{Deserialize, Serialize};

use crate::cost::CostRates;
use crate::profiles::ServerTtftEcdf;
use crate::{Endpoint, Error, Result};

/// Default reserved tail ratio.
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    DeviceConstrained,
    ServerConstrained,
}

impl ConstraintKind {
    pub fn constrained(self) -> Endpoint {
        match self {
            ConstraintKind::DeviceConstrained => Endpoint::Device,
            ConstraintKind::ServerConstrained => Endpoint::Server,
        }
    }

    pub fn from_endpoint(e: Endpoint) -> Self {
        match e {
            Endpoint::Device => ConstraintKind::DeviceConstrained,
            Endpoint::Server => ConstraintKind::ServerConstrained,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            ConstraintKind::DeviceConstrained => "d",
            ConstraintKind::ServerConstrained => "s",
        }
    }
}

/// Device-constrained iff the cheapest device phase costs strictly more per
/// token than the dearest server phase. Ties go to server-constrained.
pub fn classify(rates: &CostRates) -> ConstraintKind {
    let device_min = rates
        .flops_to_usd(rates.device_prefill)
        .min(rates.flops_to_usd(rates.device_decode));
    let server_max = rates.server_prefill.max(rates.server_decode);
    if device_min > server_max {
        ConstraintKind::DeviceConstrained
    } else {
        ConstraintKind::ServerConstrained
    }
}

/// Empirical prompt-length distribution: ascending distinct lengths with
/// non-negative weights (counts or probabilities).
#[derive(Debug, Clone, PartialEq)]
pub struct LengthDist {
    lens: Vec<u32>,
    weights: Vec<f64>,
}

impl LengthDist {
    pub fn from_lengths(lengths: impl IntoIterator<Item = u32>) -> Result<Self> {
        let mut all: Vec<u32> = lengths.into_iter().collect();
        if all.is_empty() {
            return Err(Error::InvalidDistribution("empty length distribution".into()));
        }
        if all.contains(&0) {
            return Err(Error::InvalidDistribution("lengths must be >= 1".into()));
        }
        all.sort_unstable();
        let mut lens = Vec::new();
        let mut weights = Vec::new();
        for l in all {
            if lens.last() == Some(&l) {
                *weights.last_mut().unwrap() += 1.0;
            } else {
                lens.push(l);
                weights.push(1.0);
            }
        }
        Ok(Self { lens, weights })
    }

    /// Builds from `(length, weight)` pairs; duplicate lengths are merged.
    pub fn from_weights(pairs: impl IntoIterator<Item = (u32, f64)>) -> Result<Self> {
        let mut pairs: Vec<(u32, f64)> = pairs.into_iter().collect();
        if pairs.is_empty() {
            return Err(Error::InvalidDistribution("empty length distribution".into()));
        }
        if pairs.iter().any(|(l, w)| *l == 0 || !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidDistribution(
                "lengths must be >= 1 and weights >= 0".into(),
            ));
        }
        pairs.sort_by_key(|(l, _)| *l);
        let mut lens = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (l, w) in pairs {
            if lens.last() == Some(&l) {
                *weights.last_mut().unwrap() += w;
            } else {
                lens.push(l);
                weights.push(w);
            }
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidDistribution("total weight is zero".into()));
        }
        Ok(Self { lens, weights })
    }

    pub fn lens(&self) -> &[u32] {
        &self.lens
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.lens.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `sum l * w(l)`; the token mass in weight units.
    pub fn token_mass(&self) -> f64 {
        self.iter().map(|(l, w)| l as f64 * w).sum()
    }

    pub fn mean(&self) -> f64 {
        self.token_mass() / self.total_weight()
    }

    pub fn max_len(&self) -> u32 {
        *self.lens.last().unwrap()
    }
}

/// Server-constrained execution plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecPlan {
    /// Prompts with `len <= l_th` run device-only, longer ones race both
    /// endpoints. `None` means unbounded: everything is device-only.
    pub l_th: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    DeviceOnly,
    Concurrent,
}

impl ExecPlan {
    pub fn mode(&self, prompt_len: u32) -> ExecMode {
        match self.l_th {
            Some(th) if prompt_len > th => ExecMode::Concurrent,
            _ => ExecMode::DeviceOnly,
        }
    }
}

/// Smallest support length whose cumulative token mass reaches `(1 - b)` of
/// the total. That crossing length is itself device-only, so the server's
/// token share never exceeds `b`.
pub fn plan_server_constrained(dist: &LengthDist, b: f64) -> Result<ExecPlan> {
    check_budget(b)?;
    if b >= 1.0 {
        return Ok(ExecPlan { l_th: Some(0) });
    }
    if b <= 0.0 {
        return Ok(ExecPlan { l_th: None });
    }
    let total = dist.token_mass();
    let mut cum = 0.0;
    for (l, w) in dist.iter() {
        cum += l as f64 * w;
        if total - cum <= b * total {
            return Ok(ExecPlan { l_th: Some(l) });
        }
    }
    Ok(ExecPlan {
        l_th: Some(dist.max_len()),
    })
}

/// Device-constrained wait schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaitSchedule {
    /// `(prompt_len, wait_s)`, ascending by length.
    pub entries: Vec<(u32, f64)>,
    pub w_tail: f64,
    /// Longest length with a zero wait, if any.
    pub l_th: Option<u32>,
}

impl WaitSchedule {
    /// Wait for the nearest tabulated length at or below `prompt_len`;
    /// `w_tail` outside the tabulated support.
    pub fn wait_for(&self, prompt_len: u32) -> f64 {
        let (Some(first), Some(last)) = (self.entries.first(), self.entries.last()) else {
            return self.w_tail;
        };
        if prompt_len < first.0 || prompt_len > last.0 {
            return self.w_tail;
        }
        let idx = self.entries.partition_point(|(l, _)| *l <= prompt_len);
        self.entries[idx - 1].1
    }

    /// Expected fraction of prompt tokens prefilled on the device, charging a
    /// request iff the server has not answered by its wait.
    pub fn expected_device_share(&self, dist: &LengthDist, f: &ServerTtftEcdf) -> f64 {
        let charged: f64 = dist
            .iter()
            .map(|(l, w)| l as f64 * w * (1.0 - f.eval(self.wait_for(l))))
            .sum();
        charged / dist.token_mass()
    }
}

/// Two-phase wait schedule.
///
/// Phase 1 reserves `min(alpha, b)` of the budget for the tail: every length
/// starts at `w_tail = F^{-1}(1 - min(alpha, b))`. Phase 2 spends the
/// remaining `b - alpha` on ascending lengths. A length costs
/// `p(l) * l * (1 - alpha)` to start immediately; the first one that does not
/// fit gets the smallest ECDF grid wait whose incremental charge
/// `p(l) * l * ((1 - alpha) - F(w))` fits what is left.
pub fn plan_device_constrained(
    dist: &LengthDist,
    f: &ServerTtftEcdf,
    b: f64,
    alpha: f64,
) -> Result<WaitSchedule> {
    check_budget(b)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param("alpha", format!("must be in (0, 1), got {alpha}")));
    }
    let w_tail = f.quantile(1.0 - alpha.min(b));
    let mut entries: Vec<(u32, f64)> = dist.lens().iter().map(|l| (*l, w_tail)).collect();
    let mut schedule_l_th = None;
    if b <= alpha {
        return Ok(WaitSchedule {
            entries,
            w_tail,
            l_th: None,
        });
    }

    let keep = 1.0 - alpha;
    let mut available = (b - alpha) * dist.token_mass();
    let samples = f.samples();
    for (i, (l, w)) in dist.iter().enumerate() {
        let mass = l as f64 * w;
        let length_cost = mass * keep;
        if available >= length_cost {
            entries[i].1 = 0.0;
            available -= length_cost;
            schedule_l_th = Some(l);
        } else {
            // Bisection over the sample grid for the first wait whose
            // incremental charge fits.
            let over_budget = |t: f64| mass * (keep - f.eval(t)) > available;
            let idx = samples.partition_point(|s| *s <= w_tail && over_budget(*s));
            let w_star = samples.get(idx).copied().unwrap_or(w_tail).min(w_tail);
            entries[i].1 = w_star;
            break;
        }
    }
    Ok(WaitSchedule {
        entries,
        w_tail,
        l_th: schedule_l_th,
    })
}

fn check_budget(b: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&b) {
        return Err(Error::param("b", format!("budget ratio must be in [0, 1], got {b}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DispatchPolicy {
    Exec(ExecPlan),
    Wait(WaitSchedule),
}

impl DispatchPolicy {
    pub fn kind(&self) -> ConstraintKind {
        match self {
            DispatchPolicy::Exec(_) => ConstraintKind::ServerConstrained,
            DispatchPolicy::Wait(_) => ConstraintKind::DeviceConstrained,
        }
    }

    /// Computes the policy for `kind` over `dist`.
    pub fn plan(
        kind: ConstraintKind,
        dist: &LengthDist,
        f: &ServerTtftEcdf,
        b: f64,
        alpha: f64,
    ) -> Result<Self> {
        Ok(match kind {
            ConstraintKind::ServerConstrained => {
                DispatchPolicy::Exec(plan_server_constrained(dist, b)?)
            }
            ConstraintKind::DeviceConstrained => {
                DispatchPolicy::Wait(plan_device_constrained(dist, f, b, alpha)?)
            }
        })
    }
}

/// What to do with one request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispatchDecision {
    /// Seconds after dispatch before device prefill starts; `None` = never.
    pub device_start_delay_s: Option<f64>,
    pub server_issue: bool,
}

impl DispatchDecision {
    pub const DEVICE_ONLY: Self = Self {
        device_start_delay_s: Some(0.0),
        server_issue: false,
    };
    pub const SERVER_ONLY: Self = Self {
        device_start_delay_s: None,
        server_issue: true,
    };
    pub const CONCURRENT: Self = Self {
        device_start_delay_s: Some(0.0),
        server_issue: true,
    };
}

pub fn decide(policy: &DispatchPolicy, prompt_len: u32) -> DispatchDecision {
    match policy {
        DispatchPolicy::Exec(plan) => match plan.mode(prompt_len) {
            ExecMode::DeviceOnly => DispatchDecision::DEVICE_ONLY,
            ExecMode::Concurrent => DispatchDecision::CONCURRENT,
        },
        DispatchPolicy::Wait(schedule) => DispatchDecision {
            device_start_delay_s: Some(schedule.wait_for(prompt_len)),
            server_issue: true,
        },
    }
}

/// Audit view of a computed policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub constraint: ConstraintKind,
    pub b: f64,
    pub alpha: f64,
    pub w_tail: Option<f64>,
    pub l_th: Option<u32>,
    /// `(prompt_len, wait_s)`; empty for server-constrained plans.
    pub table: Vec<(u32, f64)>,
}

impl PolicySnapshot {
    pub fn new(policy: &DispatchPolicy, b: f64, alpha: f64) -> Self {
        match policy {
            DispatchPolicy::Exec(plan) => Self {
                constraint: ConstraintKind::ServerConstrained,
                b,
                alpha,
                w_tail: None,
                l_th: plan.l_th,
                table: Vec::new(),
            },
            DispatchPolicy::Wait(s) => Self {
                constraint: ConstraintKind::DeviceConstrained,
                b,
                alpha,
                w_tail: Some(s.w_tail),
                l_th: s.l_th,
                table: s.entries.clone(),
            },
        }
    }

    pub fn to_policy(&self) -> Result<DispatchPolicy> {
        match self.constraint {
            ConstraintKind::ServerConstrained => Ok(DispatchPolicy::Exec(ExecPlan { l_th: self.l_th })),
            ConstraintKind::DeviceConstrained => {
                let w_tail = self
                    .w_tail
                    .ok_or_else(|| Error::param("w_tail", "missing for device-constrained policy"))?;
                Ok(DispatchPolicy::Wait(WaitSchedule {
                    entries: self.table.clone(),
                    w_tail,
                    l_th: self.l_th,
                }))
            }
        }
    }
}
