//! Training-side event recording and offline analysis.
//!
//! Ranks call [`Recorder::record`], which only enqueues; a background thread
//! appends batches to `<producer>.events.jsonl` spool files. [`ingest`] loads
//! a spool directory into a [`TelemetryStore`], deduplicating on
//! `(producer, seq)`, and the analysis functions run over that store.

mod analysis;
mod recorder;
mod store;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use analysis::{
    data_distribution, detect_stragglers, effective_training_time, failure_stats, restart_decision,
    restart_decision_from_store, DataDistribution, Decision, EffectiveTime, FailureStats, StragglerReport,
    DEFAULT_QUORUM, DEFAULT_STRAGGLER_K, MIN_ITERATIONS, MIN_RANKS,
};
pub use recorder::{Recorder, RecorderConfig, RecorderStats};
pub use store::{ingest, EventKey, Quarantined, SpoolLine, TelemetryStore, SPOOL_SUFFIX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Forward,
    Backward,
    Optimizer,
    Dataloader,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Forward, Stage::Backward, Stage::Optimizer, Stage::Dataloader];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Forward => "forward",
            Stage::Backward => "backward",
            Stage::Optimizer => "optimizer",
            Stage::Dataloader => "dataloader",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?} (expected forward, backward, optimizer or dataloader)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultClass {
    Fatal,
    NonFatal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalName {
    TrafficDisrupted,
    LowGpuPower,
    LogsStale,
}

impl SignalName {
    pub const ALL: [SignalName; 3] = [SignalName::TrafficDisrupted, SignalName::LowGpuPower, SignalName::LogsStale];
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub id: String,
    pub frames: u32,
    pub height: u32,
    pub width: u32,
    pub source_url: String,
}

/// Kind-specific payload; serialized with a `kind` tag so each record carries
/// exactly the fields of its kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventBody {
    Timer { stage: Stage, duration_ns: u64 },
    Data { sample_meta: SampleMeta },
    Fault { fault_class: FaultClass, transient: bool },
    Signal { signal_name: SignalName, active: bool },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub rank: u32,
    pub iteration: u64,
    /// Event start, nanoseconds since the epoch of the job clock.
    pub wall_ns: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

impl EventRecord {
    pub fn timer(rank: u32, iteration: u64, stage: Stage, wall_ns: u64, duration_ns: u64) -> Self {
        Self {
            rank,
            iteration,
            wall_ns,
            body: EventBody::Timer { stage, duration_ns },
        }
    }

    pub fn data(rank: u32, iteration: u64, wall_ns: u64, sample_meta: SampleMeta) -> Self {
        Self {
            rank,
            iteration,
            wall_ns,
            body: EventBody::Data { sample_meta },
        }
    }

    pub fn fault(rank: u32, iteration: u64, wall_ns: u64, fault_class: FaultClass, transient: bool) -> Self {
        Self {
            rank,
            iteration,
            wall_ns,
            body: EventBody::Fault { fault_class, transient },
        }
    }

    pub fn signal(rank: u32, iteration: u64, wall_ns: u64, signal_name: SignalName, active: bool) -> Self {
        Self {
            rank,
            iteration,
            wall_ns,
            body: EventBody::Signal { signal_name, active },
        }
    }

    /// Wall time at which the event ends (start plus duration for timers).
    pub fn end_ns(&self) -> u64 {
        match self.body {
            EventBody::Timer { duration_ns, .. } => self.wall_ns.saturating_add(duration_ns),
            _ => self.wall_ns,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TelemetryError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("zero wall-clock span")]
    ZeroSpan,
    #[error("no fault events")]
    NoFaults,
    #[error("quorum must be >= 1")]
    BadQuorum,
}
