//! Master/worker recording cluster.
//!
//! The [`Coordinator`] owns the lifecycle and talks to one thread per worker
//! over ordered in-process channels carrying encoded [`wire`] frames. Workers
//! own their sensors and chunk stores; nothing is shared between them.

pub mod chunk;
mod coordinator;
pub mod run;
pub mod wire;
mod worker;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use chunk::{collect_store, decode_chunk, encode_chunk, ChunkError, CollectedChunk, RecordChunk};
pub use coordinator::{ClusterSnapshot, Coordinator, StopSummary, SyncReport};
pub use wire::{Frame, MessageType, NodeStatus, NodeSummary, Payload, SensorSummary, WireError};

use crate::config::{Diagnostic, NodeRole};
use crate::time::Nanos;
use crate::timebase::ClockState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    PoweredOff,
    MasterUp,
    ClusterUp,
    TimeSynced,
    SensorsUp,
    Recording,
    Finished,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::PoweredOff => "PoweredOff",
            Phase::MasterUp => "MasterUp",
            Phase::ClusterUp => "ClusterUp",
            Phase::TimeSynced => "TimeSynced",
            Phase::SensorsUp => "SensorsUp",
            Phase::Recording => "Recording",
            Phase::Finished => "Finished",
        }
    }

    /// Declared order, plus Recording back to SensorsUp for repeated runs.
    pub fn can_advance_to(self, next: Phase) -> bool {
        use Phase::*;
        matches!(
            (self, next),
            (PoweredOff, MasterUp)
                | (MasterUp, ClusterUp)
                | (ClusterUp, TimeSynced)
                | (TimeSynced, SensorsUp)
                | (SensorsUp, Recording)
                | (Recording, SensorsUp)
                | (SensorsUp, Finished)
        )
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLifecycle {
    pub phase: Phase,
    /// Every phase entered, with the simulated master time of entry.
    pub transitions: Vec<(Phase, Nanos)>,
}

impl Default for RunLifecycle {
    fn default() -> Self {
        Self {
            phase: Phase::PoweredOff,
            transitions: vec![(Phase::PoweredOff, 0)],
        }
    }
}

impl RunLifecycle {
    pub fn advance(&mut self, next: Phase, at: Nanos) -> Result<(), ClusterError> {
        if !self.phase.can_advance_to(next) {
            return Err(ClusterError::Transition { from: self.phase, to: next });
        }
        self.phase = next;
        self.transitions.push((next, at));
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub node_id: u8,
    pub role: NodeRole,
    pub assigned_sensors: Vec<String>,
    pub storage_capacity_bytes: u64,
    pub clock: ClockState,
    pub last_status: Option<NodeStatus>,
    pub degraded: Option<String>,
}

/// Pushed to observers (gateway, CLI) as the run progresses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClusterEvent {
    PhaseChanged {
        phase: Phase,
        at_ns: Nanos,
    },
    Heartbeat {
        node_id: u8,
        at_ns: Nanos,
        clock_offset_s: f64,
        storage_used: u64,
        sensors_ok: u16,
        sensors_fault: u16,
        records: u64,
    },
    RecordCounts {
        at_ns: Nanos,
        counts: Vec<(String, u64)>,
    },
    DropAlert {
        sensor_id: String,
        dropped_trigger_indices: Vec<u64>,
    },
    NodeDegraded {
        node_id: u8,
        reason: String,
    },
}

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("{op} is not allowed in phase {phase}")]
    Phase { op: &'static str, phase: Phase },
    #[error("illegal transition {from} -> {to}")]
    Transition { from: Phase, to: Phase },
    #[error("invalid config: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Config(Vec<Diagnostic>),
    #[error("duplicate node id {0}")]
    DuplicateNode(u8),
    #[error("node {node}: {reason}")]
    SensorLimit { node: u8, reason: String },
    #[error("node {node}: no HELLO within {timeout_s} s (boot takes {boot_s} s)")]
    HelloTimeout { node: u8, boot_s: f64, timeout_s: f64 },
    #[error("clock sync did not converge: {}", .0.iter().map(|(n, r)| format!("node {n} residual {:.3} ms", r * 1e3)).collect::<Vec<_>>().join(", "))]
    SyncFailed(Vec<(u8, f64)>),
    #[error("node {node} refused {op}: {reason}")]
    Nack { node: u8, op: &'static str, reason: String },
    #[error("node {node} sent an unexpected {got} reply")]
    Protocol { node: u8, got: &'static str },
    #[error("node {0} is unreachable")]
    WorkerGone(u8),
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}
