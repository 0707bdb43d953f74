//! Immutable policy snapshots and the profiling window that refreshes them.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use disco_core::dispatch::{
    decide, ConstraintKind, DispatchDecision, DispatchPolicy, LengthDist, PolicySnapshot,
};
use disco_core::profiles::ServerTtftEcdf;
use parking_lot::{Mutex, RwLock};
use serde::Serialize;

use crate::GatewayError;

/// Everything a session needs to dispatch, frozen at session start.
#[derive(Debug, Serialize)]
pub struct Snapshot {
    pub id: u64,
    pub b: f64,
    pub alpha: f64,
    #[serde(skip)]
    pub policy: DispatchPolicy,
    #[serde(skip)]
    pub server_ttft: ServerTtftEcdf,
}

impl Snapshot {
    pub fn build(
        id: u64,
        kind: ConstraintKind,
        lengths: &[u32],
        server_ttft: ServerTtftEcdf,
        b: f64,
        alpha: f64,
    ) -> Result<Self, GatewayError> {
        let dist = LengthDist::from_lengths(lengths.iter().copied())?;
        let policy = DispatchPolicy::plan(kind, &dist, &server_ttft, b, alpha)?;
        Ok(Self {
            id,
            b,
            alpha,
            policy,
            server_ttft,
        })
    }

    pub fn decide(&self, prompt_len: u32) -> DispatchDecision {
        decide(&self.policy, prompt_len)
    }

    pub fn audit(&self) -> PolicySnapshot {
        PolicySnapshot::new(&self.policy, self.b, self.alpha)
    }

    pub fn w_tail(&self) -> Option<f64> {
        match &self.policy {
            DispatchPolicy::Wait(s) => Some(s.w_tail),
            DispatchPolicy::Exec(_) => None,
        }
    }
}

/// Fixed-capacity FIFO of recent observations.
#[derive(Debug)]
pub struct Window<T> {
    cap: usize,
    items: Mutex<VecDeque<T>>,
}

impl<T: Copy> Window<T> {
    pub fn new(cap: usize) -> Self {
        Self {
            cap,
            items: Mutex::new(VecDeque::with_capacity(cap)),
        }
    }

    pub fn push(&self, v: T) {
        let mut q = self.items.lock();
        if q.len() == self.cap {
            q.pop_front();
        }
        q.push_back(v);
    }

    pub fn snapshot(&self) -> Vec<T> {
        self.items.lock().iter().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.items.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.items.lock().clear();
    }
}

/// Outcome of a refresh attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Refresh {
    Swapped { id: u64 },
    /// Too few observations; the current snapshot stays.
    Kept { id: u64, observations: usize, needed: usize },
}

/// Holds the current snapshot behind a short-lived lock; readers clone the
/// `Arc` and never hold the lock across I/O.
#[derive(Debug)]
pub struct PolicyStore {
    current: RwLock<Arc<Snapshot>>,
    next_id: AtomicU64,
    kind: ConstraintKind,
    b: f64,
    alpha: f64,
    min_window: usize,
    base_lengths: Vec<u32>,
    pub ttft_window: Window<f64>,
    pub length_window: Window<u32>,
}

impl PolicyStore {
    pub fn new(
        kind: ConstraintKind,
        b: f64,
        alpha: f64,
        initial_ttft: ServerTtftEcdf,
        lengths: Vec<u32>,
        window: usize,
    ) -> Result<Self, GatewayError> {
        let first = Snapshot::build(1, kind, &lengths, initial_ttft, b, alpha)?;
        Ok(Self {
            current: RwLock::new(Arc::new(first)),
            next_id: AtomicU64::new(2),
            kind,
            b,
            alpha,
            min_window: window,
            base_lengths: lengths,
            ttft_window: Window::new(window),
            length_window: Window::new(window.max(1024)),
        })
    }

    pub fn current(&self) -> Arc<Snapshot> {
        self.current.read().clone()
    }

    pub fn observe_server_ttft(&self, secs: f64) {
        if secs.is_finite() && secs > 0.0 {
            self.ttft_window.push(secs);
        }
    }

    pub fn observe_prompt_len(&self, len: u32) {
        if len > 0 {
            self.length_window.push(len);
        }
    }

    /// Rebuilds the policy from the current windows and swaps it in.
    pub fn refresh(&self) -> Result<Refresh, GatewayError> {
        let samples = self.ttft_window.snapshot();
        if samples.len() < self.min_window {
            let id = self.current().id;
            tracing::info!(
                observations = samples.len(),
                needed = self.min_window,
                "profile refresh skipped; keeping snapshot {id}"
            );
            return Ok(Refresh::Kept {
                id,
                observations: samples.len(),
                needed: self.min_window,
            });
        }
        let ecdf = ServerTtftEcdf::new(samples)?;
        let observed = self.length_window.snapshot();
        let lengths = if observed.len() >= self.min_window {
            observed
        } else {
            self.base_lengths.clone()
        };
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let snap = Arc::new(Snapshot::build(id, self.kind, &lengths, ecdf, self.b, self.alpha)?);
        *self.current.write() = snap;
        tracing::info!(id, "policy snapshot swapped");
        Ok(Refresh::Swapped { id })
    }
}
