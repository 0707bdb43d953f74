//! Cost-constrained device/server cooperative LLM serving.
//!
//! The crate is organised bottom-up:
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`workload`] | request/trace types, JSONL ingestion, log-normal synthetic traces |
//! | [`profiles`] | device linear TTFT model, server TTFT ECDF, decode profiles |
//! | [`cost`] | FLOPs calculator, pricing, unified $ accounting |
//! | [`dispatch`] | constraint classification, wait schedules and length thresholds |
//! | [`migration`] | decode handoff trigger, buffer sizing, handoff timeline |
//! | [`sim`] | discrete-event replay of traces through policies and baselines |

pub mod cost;
pub mod dispatch;
pub mod error;
pub mod migration;
pub mod profiles;
pub mod sim;
pub mod workload;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// One of the two inference endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Device,
    Server,
}

impl Endpoint {
    pub fn other(self) -> Self {
        match self {
            Endpoint::Device => Endpoint::Server,
            Endpoint::Server => Endpoint::Device,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Endpoint::Device => "device",
            Endpoint::Server => "server",
        }
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "device" => Ok(Endpoint::Device),
            "server" => Ok(Endpoint::Server),
            other => Err(Error::param("endpoint", format!("unknown endpoint `{other}`"))),
        }
    }
}
