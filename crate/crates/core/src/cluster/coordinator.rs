use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::chunk::{collect_store, CollectedChunk};
use super::wire::{NodeStatus, NodeSummary, Payload};
use super::worker::WorkerLink;
use super::{ClusterError, ClusterEvent, NodeDescriptor, Phase, RunLifecycle};
use crate::config::{NodeRole, RunConfig};
use crate::seed::{digest64, rng_for};
use crate::time::{secs_to_nanos, Nanos, NANOS_PER_SEC};
use crate::timebase::{ClockState, SyncRound, SyncServo};
use crate::trigger::{BoardCommand, SyncboardState, TriggerEvent};

/// Clock verification result for one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    pub node_id: u8,
    pub rounds: Vec<SyncRound>,
    /// True clock error before the first round, seconds.
    pub pre_offset_s: f64,
    /// True clock error after the last correction, seconds.
    pub post_offset_s: f64,
    pub converged: bool,
}

impl SyncReport {
    pub fn rounds_used(&self) -> usize {
        self.rounds.len()
    }

    pub fn last_measured_offset_s(&self) -> f64 {
        self.rounds.last().map_or(0.0, |r| r.measured.offset)
    }
}

/// Result of one recording run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopSummary {
    pub run_label: String,
    /// Syncboard running interval `[start, stop)`.
    pub trigger_start_ns: Nanos,
    pub trigger_stop_ns: Nanos,
    pub last_trigger_ns: Option<Nanos>,
    pub stop_rec_dispatch_ns: Nanos,
    pub nodes: Vec<(u8, NodeSummary)>,
}

impl StopSummary {
    pub fn sensor_counts(&self) -> BTreeMap<String, u64> {
        self.nodes
            .iter()
            .flat_map(|(_, n)| n.sensors.iter().map(|s| (s.sensor_id.clone(), s.records)))
            .collect()
    }

    pub fn injected_drops(&self) -> BTreeMap<String, Vec<u64>> {
        self.nodes
            .iter()
            .flat_map(|(_, n)| n.sensors.iter().map(|s| (s.sensor_id.clone(), s.injected_drops.clone())))
            .collect()
    }

    pub fn degraded_nodes(&self) -> Vec<(u8, String)> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.degraded)
            .map(|(id, n)| (*id, n.detail.clone()))
            .collect()
    }
}

/// Serializable view of the whole cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSnapshot {
    pub phase: Phase,
    pub now_ns: Nanos,
    pub transitions: Vec<(Phase, Nanos)>,
    pub trigger_running: bool,
    pub nodes: Vec<NodeDescriptor>,
    pub sync_reports: Vec<SyncReport>,
    pub last_summary: Option<StopSummary>,
}

type EventSink = Box<dyn Fn(&ClusterEvent) + Send>;

/// Owns the lifecycle; every mutation goes through its methods.
pub struct Coordinator {
    config: RunConfig,
    root: PathBuf,
    lifecycle: RunLifecycle,
    now_ns: Nanos,
    registry: BTreeMap<u8, NodeDescriptor>,
    links: Vec<WorkerLink>,
    board: SyncboardState,
    sync_reports: Vec<SyncReport>,
    run_label: Option<String>,
    runs: Vec<StopSummary>,
    events: Vec<ClusterEvent>,
    sink: Option<EventSink>,
}

impl std::fmt::Debug for Coordinator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Coordinator")
            .field("phase", &self.lifecycle.phase)
            .field("now_ns", &self.now_ns)
            .field("nodes", &self.registry.len())
            .finish()
    }
}

impl Coordinator {
    /// A powered-off cluster that will keep chunk stores under `root`.
    pub fn new(config: RunConfig, root: impl Into<PathBuf>) -> Result<Self, ClusterError> {
        let board = config
            .syncboard_state()
            .map_err(|e| ClusterError::Other(format!("syncboard: {e}")))?;
        Ok(Self {
            config,
            root: root.into(),
            lifecycle: RunLifecycle::default(),
            now_ns: 0,
            registry: BTreeMap::new(),
            links: Vec::new(),
            board,
            sync_reports: Vec::new(),
            run_label: None,
            runs: Vec::new(),
            events: Vec::new(),
            sink: None,
        })
    }

    pub fn set_event_sink(&mut self, sink: impl Fn(&ClusterEvent) + Send + 'static) {
        self.sink = Some(Box::new(sink));
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn store_root(&self) -> &Path {
        &self.root
    }

    pub fn phase(&self) -> Phase {
        self.lifecycle.phase
    }

    pub fn lifecycle(&self) -> &RunLifecycle {
        &self.lifecycle
    }

    pub fn now_ns(&self) -> Nanos {
        self.now_ns
    }

    pub fn registry(&self) -> &BTreeMap<u8, NodeDescriptor> {
        &self.registry
    }

    pub fn board(&self) -> &SyncboardState {
        &self.board
    }

    pub fn sync_reports(&self) -> &[SyncReport] {
        &self.sync_reports
    }

    pub fn runs(&self) -> &[StopSummary] {
        &self.runs
    }

    pub fn events(&self) -> &[ClusterEvent] {
        &self.events
    }

    pub fn snapshot(&self) -> ClusterSnapshot {
        ClusterSnapshot {
            phase: self.lifecycle.phase,
            now_ns: self.now_ns,
            transitions: self.lifecycle.transitions.clone(),
            trigger_running: self.board.running,
            nodes: self.registry.values().cloned().collect(),
            sync_reports: self.sync_reports.clone(),
            last_summary: self.runs.last().cloned(),
        }
    }

    fn latency_ns(&self) -> Nanos {
        secs_to_nanos(self.config.cluster.message_latency_s)
    }

    fn emit(&mut self, ev: ClusterEvent) {
        if let Some(sink) = &self.sink {
            sink(&ev);
        }
        self.events.push(ev);
    }

    fn enter(&mut self, phase: Phase, at: Nanos) -> Result<(), ClusterError> {
        self.lifecycle.advance(phase, at)?;
        self.emit(ClusterEvent::PhaseChanged { phase, at_ns: at });
        Ok(())
    }

    fn require(&self, op: &'static str, phase: Phase) -> Result<(), ClusterError> {
        if self.lifecycle.phase == phase {
            Ok(())
        } else {
            Err(ClusterError::Phase {
                op,
                phase: self.lifecycle.phase,
            })
        }
    }

    /// Send one payload per worker, then gather replies in node order.
    fn broadcast(&self, make: impl Fn(u8) -> Payload) -> Result<Vec<(u8, Payload)>, ClusterError> {
        for l in &self.links {
            l.send(make(l.node_id))?;
        }
        self.links.iter().map(|l| Ok((l.node_id, l.recv()?))).collect()
    }

    fn expect_status(node: u8, p: Payload) -> Result<NodeStatus, ClusterError> {
        match p {
            Payload::Status(s) => Ok(s),
            other => Err(ClusterError::Protocol {
                node,
                got: other.kind().name(),
            }),
        }
    }

    /// Power on the master, wake the workers, collect HELLOs and distribute
    /// CONFIG. Ends in ClusterUp.
    pub fn bringup(&mut self) -> Result<&RunLifecycle, ClusterError> {
        if self.lifecycle.phase != Phase::PoweredOff && self.lifecycle.phase != Phase::MasterUp {
            return Err(ClusterError::Phase {
                op: "bringup",
                phase: self.lifecycle.phase,
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for n in &self.config.nodes {
            if !seen.insert(n.node_id) {
                return Err(ClusterError::DuplicateNode(n.node_id));
            }
        }
        for n in &self.config.nodes {
            if let Some(reason) = self.config.node_limit_violation(n.node_id) {
                return Err(ClusterError::SensorLimit { node: n.node_id, reason });
            }
        }
        let errors: Vec<_> = self.config.validate().into_iter().filter(|d| d.is_error()).collect();
        if !errors.is_empty() {
            return Err(ClusterError::Config(errors));
        }
        let master = self.config.master().cloned().expect("validated: one master");
        if self.lifecycle.phase == Phase::PoweredOff {
            let up = secs_to_nanos(master.boot_delay_s);
            self.now_ns = up;
            self.enter(Phase::MasterUp, up)?;
        }
        let lat = self.latency_ns();
        let t0 = self.now_ns;
        let workers: Vec<_> = self.config.nodes.iter().filter(|n| n.role == NodeRole::Worker).cloned().collect();
        for w in &workers {
            if w.boot_delay_s > self.config.cluster.hello_timeout_s {
                return Err(ClusterError::HelloTimeout {
                    node: w.node_id,
                    boot_s: w.boot_delay_s,
                    timeout_s: self.config.cluster.hello_timeout_s,
                });
            }
        }
        let mut links = Vec::with_capacity(workers.len());
        let mut last_hello = t0;
        for w in &workers {
            let boot = t0 + secs_to_nanos(w.boot_delay_s);
            let link = WorkerLink::spawn(w.node_id, self.root.clone(), boot)?;
            match link.recv()? {
                Payload::Hello { boot_ns } => last_hello = last_hello.max(boot_ns + lat),
                other => {
                    return Err(ClusterError::Protocol {
                        node: w.node_id,
                        got: other.kind().name(),
                    })
                }
            }
            links.push(link);
        }
        self.links = links;
        let canonical = self.config.canonical_bytes();
        let digest = digest64(&[&canonical]);
        let replies = self.broadcast(|_| Payload::Config { bytes: canonical.clone() })?;
        for (node, p) in replies {
            let s = Self::expect_status(node, p)?;
            if !s.ok {
                self.links.clear();
                return Err(ClusterError::Nack {
                    node,
                    op: "CONFIG",
                    reason: s.detail,
                });
            }
            if s.config_digest != digest {
                self.links.clear();
                return Err(ClusterError::Other(format!("node {node} holds a different config")));
            }
            let n = self.config.node(node).expect("known node");
            self.registry.insert(
                node,
                NodeDescriptor {
                    node_id: node,
                    role: n.role,
                    assigned_sensors: self.config.sensors_on(node).map(|s| s.sensor_id.clone()).collect(),
                    storage_capacity_bytes: n.storage_capacity_bytes,
                    clock: n.clock,
                    last_status: Some(s),
                    degraded: None,
                },
            );
        }
        self.registry.insert(
            master.node_id,
            NodeDescriptor {
                node_id: master.node_id,
                role: NodeRole::Master,
                assigned_sensors: Vec::new(),
                storage_capacity_bytes: master.storage_capacity_bytes,
                clock: master.clock,
                last_status: None,
                degraded: None,
            },
        );
        self.now_ns = last_hello + 2 * lat;
        self.enter(Phase::ClusterUp, self.now_ns)?;
        Ok(&self.lifecycle)
    }

    /// Number of worker registrations.
    pub fn worker_count(&self) -> usize {
        self.links.len()
    }

    /// Discipline every node clock against the master timebase and verify it.
    pub fn time_sync_phase(&mut self) -> Result<&[SyncReport], ClusterError> {
        self.require("time sync", Phase::ClusterUp)?;
        let sync = self.config.sync;
        let t0 = self.now_ns as f64 / 1e9;
        let reference = ClockState::ideal();
        let mut reports = Vec::new();
        let mut max_rounds = 0;
        for (id, desc) in self.registry.iter_mut() {
            let link = self.config.node(*id).map(|n| n.link).expect("registered node is configured");
            let mut servo = SyncServo::new(link);
            servo.gain = sync.gain;
            let mut rng = rng_for(self.config.seed, &format!("node/{id}/sync"));
            let pre = desc.clock.error_at(t0);
            let mut rounds = Vec::new();
            let mut t = t0;
            let mut settled = false;
            for r in 0..sync.max_rounds {
                t = t0 + r as f64 * sync.period_s;
                let round = servo
                    .round(&reference, &mut desc.clock, t, &mut rng)
                    .map_err(|e| ClusterError::Other(format!("node {id}: {e}")))?;
                rounds.push(round);
                if round.measured.offset.abs() < sync.bound_s {
                    settled = true;
                    break;
                }
            }
            let post = desc.clock.error_at(t);
            max_rounds = max_rounds.max(rounds.len());
            reports.push(SyncReport {
                node_id: *id,
                rounds,
                pre_offset_s: pre,
                post_offset_s: post,
                converged: settled && post.abs() < sync.bound_s,
            });
        }
        self.now_ns += secs_to_nanos(max_rounds as f64 * sync.period_s);
        let failed: Vec<(u8, f64)> = reports
            .iter()
            .filter(|r| !r.converged)
            .map(|r| (r.node_id, r.post_offset_s))
            .collect();
        self.sync_reports = reports;
        if !failed.is_empty() {
            for (id, residual) in &failed {
                self.emit(ClusterEvent::NodeDegraded {
                    node_id: *id,
                    reason: format!("clock residual {:.3} ms", residual * 1e3),
                });
            }
            return Err(ClusterError::SyncFailed(failed));
        }
        self.enter(Phase::TimeSynced, self.now_ns)?;
        Ok(&self.sync_reports)
    }

    /// Spawn sensor drivers on every worker.
    pub fn launch(&mut self) -> Result<&RunLifecycle, ClusterError> {
        self.require("launch", Phase::TimeSynced)?;
        let lat = self.latency_ns();
        let at = self.now_ns + lat;
        for (node, p) in self.broadcast(|_| Payload::Launch { at_ns: at })? {
            let s = Self::expect_status(node, p)?;
            if !s.ok {
                return Err(ClusterError::Nack {
                    node,
                    op: "LAUNCH",
                    reason: s.detail,
                });
            }
            if let Some(d) = self.registry.get_mut(&node) {
                d.last_status = Some(s);
            }
        }
        self.now_ns += 2 * lat;
        self.enter(Phase::SensorsUp, self.now_ns)?;
        Ok(&self.lifecycle)
    }

    /// START_REC to every worker, then start the Syncboard. All or nothing:
    /// one NACK aborts the workers that accepted.
    pub fn start_recording(&mut self, run_label: &str) -> Result<&RunLifecycle, ClusterError> {
        self.require("start recording", Phase::SensorsUp)?;
        let lat = self.latency_ns();
        let t = self.now_ns;
        let replies = self.broadcast(|_| Payload::StartRec {
            at_ns: t + lat,
            run_label: run_label.to_string(),
        })?;
        let mut acked = Vec::new();
        let mut nack = None;
        for (node, p) in replies {
            let s = Self::expect_status(node, p)?;
            if s.ok {
                acked.push(node);
            } else if nack.is_none() {
                nack = Some((node, s.detail.clone()));
            }
            if let Some(d) = self.registry.get_mut(&node) {
                d.last_status = Some(s);
            }
        }
        if let Some((node, reason)) = nack {
            for l in self.links.iter().filter(|l| acked.contains(&l.node_id)) {
                l.send(Payload::StopRec {
                    at_ns: t + 3 * lat,
                    trigger_start_ns: t + 3 * lat,
                    trigger_stop_ns: t + 3 * lat,
                    abort: true,
                })?;
            }
            for l in self.links.iter().filter(|l| acked.contains(&l.node_id)) {
                l.recv()?;
            }
            self.now_ns = t + 4 * lat;
            return Err(ClusterError::Nack {
                node,
                op: "START_REC",
                reason,
            });
        }
        self.enter(Phase::Recording, t + 2 * lat)?;
        let start = t + 2 * lat + secs_to_nanos(self.config.cluster.stop_guard_s);
        self.board = self.board.clone().apply(BoardCommand::Start, start);
        self.now_ns = start;
        self.run_label = Some(run_label.to_string());
        Ok(&self.lifecycle)
    }

    /// Advance master time while recording, resyncing node clocks and polling
    /// status at every whole second.
    pub fn record_for(&mut self, duration_s: f64) -> Result<(), ClusterError> {
        self.require("record", Phase::Recording)?;
        let end = self.now_ns + secs_to_nanos(duration_s.max(0.0));
        let mut next = (self.now_ns.div_euclid(NANOS_PER_SEC) + 1) * NANOS_PER_SEC;
        while next <= end {
            self.now_ns = next;
            self.resync_nodes();
            self.poll_status()?;
            next += NANOS_PER_SEC;
        }
        self.now_ns = end;
        Ok(())
    }

    fn resync_nodes(&mut self) {
        let t = self.now_ns as f64 / 1e9;
        let reference = ClockState::ideal();
        let second = self.now_ns / NANOS_PER_SEC;
        for (id, desc) in self.registry.iter_mut() {
            let link = self.config.node(*id).map(|n| n.link).expect("configured");
            let mut servo = SyncServo::new(link);
            servo.gain = self.config.sync.gain;
            let mut rng = rng_for(self.config.seed, &format!("node/{id}/resync/{second}"));
            let _ = servo.round(&reference, &mut desc.clock, t, &mut rng);
        }
    }

    /// STATUS_REQ to every worker; updates the registry and emits heartbeats.
    pub fn poll_status(&mut self) -> Result<Vec<(u8, NodeStatus)>, ClusterError> {
        let now = self.now_ns;
        let since = self.board.running_since;
        let replies = self.broadcast(|_| Payload::StatusReq {
            now_ns: now,
            trigger_since_ns: since,
        })?;
        let mut out = Vec::new();
        for (node, p) in replies {
            let s = Self::expect_status(node, p)?;
            out.push((node, s));
        }
        for (node, s) in &out {
            let offset = self.registry.get(node).map_or(0.0, |d| d.clock.error_at(now as f64 / 1e9));
            if let Some(d) = self.registry.get_mut(node) {
                d.last_status = Some(s.clone());
            }
            self.emit(ClusterEvent::Heartbeat {
                node_id: *node,
                at_ns: now,
                clock_offset_s: offset,
                storage_used: s.storage_used,
                sensors_ok: s.sensors_ok,
                sensors_fault: s.sensors_fault,
                records: s.records,
            });
        }
        Ok(out)
    }

    /// Stop the Syncboard, then STOP_REC after the guard interval.
    pub fn stop_recording(&mut self) -> Result<StopSummary, ClusterError> {
        self.require("stop recording", Phase::Recording)?;
        let lat = self.latency_ns();
        let trigger_start = self.board.running_since.expect("board runs while recording");
        let trigger_stop = self.now_ns;
        self.board = self.board.clone().apply(BoardCommand::Stop, trigger_stop);
        let dispatch = trigger_stop + secs_to_nanos(self.config.cluster.stop_guard_s);
        let replies = self.broadcast(|_| Payload::StopRec {
            at_ns: dispatch + lat,
            trigger_start_ns: trigger_start,
            trigger_stop_ns: trigger_stop,
            abort: false,
        })?;
        let mut nodes = Vec::new();
        for (node, p) in replies {
            match p {
                Payload::Summary(s) => nodes.push((node, s)),
                other => {
                    return Err(ClusterError::Protocol {
                        node,
                        got: other.kind().name(),
                    })
                }
            }
        }
        let last_trigger = self
            .board
            .schedule(trigger_start, trigger_stop)
            .ok()
            .and_then(|s| s.last().map(|e| e.true_time_ns));
        let summary = StopSummary {
            run_label: self.run_label.take().unwrap_or_default(),
            trigger_start_ns: trigger_start,
            trigger_stop_ns: trigger_stop,
            last_trigger_ns: last_trigger,
            stop_rec_dispatch_ns: dispatch,
            nodes,
        };
        self.now_ns = dispatch + 2 * lat;
        for (id, reason) in summary.degraded_nodes() {
            if let Some(d) = self.registry.get_mut(&id) {
                d.degraded = Some(reason.clone());
            }
            self.emit(ClusterEvent::NodeDegraded { node_id: id, reason });
        }
        self.emit(ClusterEvent::RecordCounts {
            at_ns: self.now_ns,
            counts: summary.sensor_counts().into_iter().collect(),
        });
        self.enter(Phase::SensorsUp, self.now_ns)?;
        self.runs.push(summary.clone());
        Ok(summary)
    }

    /// Read back sealed chunks with checksum verification.
    pub fn collect_chunks(&self, node: Option<u8>, sensor: Option<&str>) -> Result<Vec<CollectedChunk>, ClusterError> {
        if self.lifecycle.phase == Phase::Recording {
            return Err(ClusterError::Phase {
                op: "collect chunks",
                phase: Phase::Recording,
            });
        }
        Ok(collect_store(&self.root, node, sensor)?)
    }

    /// Trigger edges of every recording run so far, in time order.
    pub fn trigger_schedule(&self) -> Vec<TriggerEvent> {
        let end = self.board.segments.iter().map(|s| s.1).max().unwrap_or(0);
        self.board.schedule(0, end).unwrap_or_default()
    }

    /// Publish frame-drop alerts found by timestamp restoration.
    pub fn report_drops(&mut self, sensor_id: &str, dropped: &[u64]) {
        if !dropped.is_empty() {
            self.emit(ClusterEvent::DropAlert {
                sensor_id: sensor_id.to_string(),
                dropped_trigger_indices: dropped.to_vec(),
            });
        }
    }

    /// Shut the workers down.
    pub fn finish(&mut self) -> Result<&RunLifecycle, ClusterError> {
        self.require("finish", Phase::SensorsUp)?;
        self.links.clear();
        self.enter(Phase::Finished, self.now_ns)?;
        Ok(&self.lifecycle)
    }
}
