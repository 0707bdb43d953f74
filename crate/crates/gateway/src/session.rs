use disco_core::Endpoint;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Dispatched,
    Racing,
    Decoding,
    Migrating,
    Done,
    Failed,
}

impl Phase {
    fn may_enter(self, next: Phase) -> bool {
        use Phase::*;
        matches!(
            (self, next),
            (Dispatched, Racing)
                | (Racing, Decoding)
                | (Decoding, Migrating)
                | (Migrating, Decoding)
                | (Decoding, Done)
                | (Dispatched | Racing | Decoding | Migrating, Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("illegal session transition {from:?} -> {to:?}")]
pub struct IllegalTransition {
    pub from: Phase,
    pub to: Phase,
}

/// Per-request state machine; owned by the session task.
#[derive(Debug, Clone, Serialize)]
pub struct SessionState {
    pub req_id: String,
    pub phase: Phase,
    pub winner: Option<Endpoint>,
    pub tokens_emitted: u32,
    pub buffer_depth: usize,
    pub snapshot_id: u64,
}

impl SessionState {
    pub fn new(req_id: impl Into<String>, snapshot_id: u64) -> Self {
        Self {
            req_id: req_id.into(),
            phase: Phase::Dispatched,
            winner: None,
            tokens_emitted: 0,
            buffer_depth: 0,
            snapshot_id,
        }
    }

    pub fn advance(&mut self, to: Phase) -> Result<(), IllegalTransition> {
        if !self.phase.may_enter(to) {
            return Err(IllegalTransition { from: self.phase, to });
        }
        self.phase = to;
        Ok(())
    }

    pub fn emitted(&mut self) {
        self.tokens_emitted += 1;
    }
}
