//! Worker node: owns its sensors and chunk store and answers control frames.
//!
//! Records are generated lazily as master time is reported to the worker
//! (STATUS_REQ while recording, then STOP_REC). Generation walks windows cut at
//! whole master seconds; per-second clock work happens when a window starts on
//! a second boundary, so the output does not depend on how often the master
//! polls.

use std::path::PathBuf;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread::JoinHandle;

use super::chunk::{chunk_path, encode_chunk, ChunkWriter};
use super::wire::{Frame, NodeStatus, NodeSummary, Payload, SensorSummary, WorkerPhase};
use super::ClusterError;
use crate::config::{NodeConfig, RunConfig, SensorConfig};
use crate::nmea::emit_time_message;
use crate::seed::{digest64, rng_for, SimRng};
use crate::sensors::{SensorKind, SensorStream, TimeSource};
use crate::time::{secs_to_nanos, Nanos, NANOS_PER_SEC};
use crate::timebase::{ClockState, SyncServo};
use crate::trigger::SyncboardState;

/// Coordinator-side handle to a worker thread.
pub(crate) struct WorkerLink {
    pub node_id: u8,
    tx: Option<Sender<Vec<u8>>>,
    rx: Receiver<Vec<u8>>,
    join: Option<JoinHandle<()>>,
}

impl WorkerLink {
    pub fn spawn(node_id: u8, root: PathBuf, boot_ns: Nanos) -> std::io::Result<Self> {
        let (to_worker, worker_rx) = channel::<Vec<u8>>();
        let (worker_tx, from_worker) = channel::<Vec<u8>>();
        let join = std::thread::Builder::new()
            .name(format!("worker-{node_id:02}"))
            .spawn(move || Worker::new(node_id, root).serve(boot_ns, worker_rx, worker_tx))?;
        Ok(Self {
            node_id,
            tx: Some(to_worker),
            rx: from_worker,
            join: Some(join),
        })
    }

    pub fn send(&self, payload: Payload) -> Result<(), ClusterError> {
        let frame = Frame::new(self.node_id, payload);
        self.tx
            .as_ref()
            .and_then(|tx| tx.send(frame.encode()).ok())
            .ok_or(ClusterError::WorkerGone(self.node_id))
    }

    pub fn recv(&self) -> Result<Payload, ClusterError> {
        let bytes = self.rx.recv().map_err(|_| ClusterError::WorkerGone(self.node_id))?;
        let frame = Frame::decode(&bytes)?;
        if frame.node_id != self.node_id {
            return Err(ClusterError::Other(format!(
                "frame from node {} on node {}'s channel",
                frame.node_id, self.node_id
            )));
        }
        Ok(frame.payload)
    }
}

impl Drop for WorkerLink {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

struct SensorSlot {
    cfg: SensorConfig,
    stream: SensorStream,
    capture_rng: SimRng,
    sync_rng: SimRng,
    writer: ChunkWriter,
    ultrasound_slot: Option<usize>,
    stats: SensorSummary,
    faulted: bool,
}

struct Recording {
    start_ns: Nanos,
    generated_until: Nanos,
}

struct Worker {
    node_id: u8,
    root: PathBuf,
    phase: WorkerPhase,
    config: Option<RunConfig>,
    node: Option<NodeConfig>,
    config_digest: u64,
    board: Option<SyncboardState>,
    sensors: Vec<SensorSlot>,
    storage_used: u64,
    recording: Option<Recording>,
    trigger_since: Option<Nanos>,
    trigger_stop: Nanos,
    degraded: Option<String>,
}

impl Worker {
    fn new(node_id: u8, root: PathBuf) -> Self {
        Self {
            node_id,
            root,
            phase: WorkerPhase::Booted,
            config: None,
            node: None,
            config_digest: 0,
            board: None,
            sensors: Vec::new(),
            storage_used: 0,
            recording: None,
            trigger_since: None,
            trigger_stop: Nanos::MAX,
            degraded: None,
        }
    }

    fn serve(mut self, boot_ns: Nanos, rx: Receiver<Vec<u8>>, tx: Sender<Vec<u8>>) {
        let hello = Frame::new(self.node_id, Payload::Hello { boot_ns });
        if tx.send(hello.encode()).is_err() {
            return;
        }
        while let Ok(bytes) = rx.recv() {
            let reply = match Frame::decode(&bytes) {
                Ok(f) => self.handle(f.payload),
                Err(e) => self.status(false, format!("undecodable frame: {e}")),
            };
            if tx.send(Frame::new(self.node_id, reply).encode()).is_err() {
                break;
            }
        }
    }

    fn status(&self, ok: bool, detail: impl Into<String>) -> Payload {
        let fault = self.sensors.iter().filter(|s| s.faulted).count() as u16;
        Payload::Status(NodeStatus {
            ok,
            phase: self.phase,
            config_digest: self.config_digest,
            storage_used: self.storage_used,
            storage_capacity: self.node.as_ref().map_or(0, |n| n.storage_capacity_bytes),
            sensors_ok: self.sensors.len() as u16 - fault,
            sensors_fault: fault,
            records: self.sensors.iter().map(|s| s.stats.records + s.writer.unsealed()).sum(),
            detail: detail.into(),
        })
    }

    fn handle(&mut self, p: Payload) -> Payload {
        let kind = p.kind().name();
        match (self.phase, p) {
            (WorkerPhase::Booted, Payload::Config { bytes }) => match self.configure(&bytes) {
                Ok(()) => self.status(true, "configured"),
                Err(e) => self.status(false, e),
            },
            (WorkerPhase::Configured | WorkerPhase::Launched, Payload::Launch { at_ns }) => {
                self.launch(at_ns);
                self.status(true, "sensors up")
            }
            (WorkerPhase::Launched, Payload::StartRec { at_ns, .. }) => {
                let cap = self.node.as_ref().map_or(0, |n| n.storage_capacity_bytes);
                if self.storage_used >= cap {
                    return self.status(false, format!("storage full ({} of {cap} bytes used)", self.storage_used));
                }
                for s in &mut self.sensors {
                    s.stats = SensorSummary {
                        sensor_id: s.cfg.sensor_id.clone(),
                        ..Default::default()
                    };
                }
                self.recording = Some(Recording {
                    start_ns: at_ns,
                    generated_until: at_ns,
                });
                self.trigger_since = None;
                self.trigger_stop = Nanos::MAX;
                self.degraded = None;
                self.phase = WorkerPhase::Recording;
                self.status(true, "recording")
            }
            (WorkerPhase::Recording, Payload::StopRec { at_ns, trigger_start_ns, trigger_stop_ns, abort }) => {
                Payload::Summary(self.stop(at_ns, trigger_start_ns, trigger_stop_ns, abort))
            }
            (phase, Payload::StatusReq { now_ns, trigger_since_ns }) => {
                if phase == WorkerPhase::Recording {
                    if self.trigger_since.is_none() {
                        self.trigger_since = trigger_since_ns;
                    }
                    self.advance_to(now_ns);
                }
                let detail = self.degraded.clone().unwrap_or_default();
                self.status(true, detail)
            }
            (phase, _) => self.status(false, format!("unexpected {kind} in worker phase {phase:?}")),
        }
    }

    fn configure(&mut self, bytes: &[u8]) -> Result<(), String> {
        let cfg = RunConfig::from_canonical_bytes(bytes).map_err(|e| format!("config does not parse: {e}"))?;
        let node = cfg
            .node(self.node_id)
            .cloned()
            .ok_or_else(|| format!("node {} is not in the config", self.node_id))?;
        let board = cfg.syncboard_state().map_err(|e| e.to_string())?;
        let slots = cfg.ultrasound_slots();
        let span = secs_to_nanos(cfg.cluster.chunk_max_span_s);
        self.sensors = cfg
            .sensors_on(self.node_id)
            .map(|s| SensorSlot {
                stream: SensorStream::new(s.model()),
                capture_rng: rng_for(cfg.seed, &format!("sensor/{}/capture", s.sensor_id)),
                sync_rng: rng_for(cfg.seed, &format!("sensor/{}/sync", s.sensor_id)),
                writer: ChunkWriter::new(self.node_id, s.sensor_id.clone(), cfg.cluster.chunk_max_bytes, span),
                ultrasound_slot: slots.iter().position(|id| *id == s.sensor_id),
                stats: SensorSummary {
                    sensor_id: s.sensor_id.clone(),
                    ..Default::default()
                },
                faulted: false,
                cfg: s.clone(),
            })
            .collect();
        self.config_digest = digest64(&[bytes]);
        self.board = Some(board);
        self.node = Some(node);
        self.config = Some(cfg);
        self.phase = WorkerPhase::Configured;
        Ok(())
    }

    fn launch(&mut self, at_ns: Nanos) {
        let second = at_ns.div_euclid(NANOS_PER_SEC);
        self.sync_sensors(at_ns, Some(second));
        self.phase = WorkerPhase::Launched;
    }

    /// PTP sensors sync at `at_ns`; LiDARs step on the PPS of `pps_second`.
    fn sync_sensors(&mut self, at_ns: Nanos, pps_second: Option<i64>) {
        let cfg = self.config.as_ref().expect("configured");
        let node = self.node.as_ref().expect("configured");
        let mut servo = SyncServo::new(node.link);
        servo.gain = cfg.sync.gain;
        let reference = ClockState::ideal();
        for s in &mut self.sensors {
            match s.stream.model.time_source {
                TimeSource::Ptp => {
                    let _ = servo.round(&reference, &mut s.stream.model.clock, at_ns as f64 / 1e9, &mut s.sync_rng);
                }
                TimeSource::Gprmc => {
                    let Some(sec) = pps_second else { continue };
                    match emit_time_message(&cfg.syncboard.lidar_channel, &cfg.gprmc, sec) {
                        Ok(msg) => {
                            if s.stream.discipline_lidar(&msg.pps, &msg.sentence, &cfg.gprmc).is_err() {
                                s.faulted = true;
                            }
                        }
                        Err(_) => {
                            s.stream.sync_faults += 1;
                            s.faulted = true;
                        }
                    }
                    s.stats.sync_faults = s.stream.sync_faults;
                }
                TimeSource::None => {}
            }
        }
    }

    fn advance_to(&mut self, to: Nanos) {
        let Some(rec) = self.recording.as_ref() else { return };
        let mut a = rec.generated_until;
        let start = rec.start_ns;
        while a < to {
            let next_second = (a.div_euclid(NANOS_PER_SEC) + 1) * NANOS_PER_SEC;
            let b = next_second.min(to);
            if a.rem_euclid(NANOS_PER_SEC) == 0 && a > start {
                self.sync_sensors(a, Some(a / NANOS_PER_SEC));
            }
            self.generate(a, b);
            a = b;
        }
        if let Some(rec) = self.recording.as_mut() {
            rec.generated_until = rec.generated_until.max(to);
        }
        self.write_ready(false);
    }

    fn generate(&mut self, a: Nanos, b: Nanos) {
        let cfg = self.config.as_ref().expect("configured");
        let mut board = self.board.clone().expect("configured");
        let trig = self.trigger_since.map(|since| (since, self.trigger_stop));
        match trig {
            Some((since, stop)) if stop != Nanos::MAX => {
                board.segments = vec![(since, stop)];
                board.running_since = None;
            }
            Some((since, _)) => {
                board.segments.clear();
                board.running_since = Some(since);
            }
            None => {
                board.segments.clear();
                board.running_since = None;
            }
        }
        let n_ultrasound = cfg.ultrasound_slots().len();
        let slot_ns = secs_to_nanos(cfg.ultrasound.slot_s);
        for s in &mut self.sensors {
            let model = &s.stream.model;
            if model.kind == SensorKind::Ultrasound {
                let (Some((since, stop)), Some(slot)) = (trig, s.ultrasound_slot) else { continue };
                let lo = a.max(since);
                let hi = b.min(stop);
                if lo >= hi || slot_ns <= 0 {
                    continue;
                }
                let mut j = (lo - since + slot_ns - 1).div_euclid(slot_ns);
                loop {
                    let t = since + j * slot_ns;
                    if t >= hi {
                        break;
                    }
                    if j as usize % n_ultrasound == slot {
                        let r = s.stream.ping(t, &mut s.capture_rng);
                        s.writer.push(r);
                    }
                    j += 1;
                }
            } else if model.kind == SensorKind::EventCamera {
                let ch = model.trigger_channel.expect("validated");
                for e in board.channel_events(ch, a, b).unwrap_or_default() {
                    if let Ok((_, r)) = s.stream.record_ext_trigger(&e) {
                        s.writer.push(r);
                    }
                }
            } else if model.is_frame_triggered() {
                let ch = model.trigger_channel.expect("frame-triggered");
                for e in board.channel_events(ch, a, b).unwrap_or_default() {
                    match s.stream.fire_triggered(&e, &mut s.capture_rng) {
                        Ok(Some(r)) => s.writer.push(r),
                        Ok(None) => s.stats.injected_drops.push(e.sequence_index),
                        Err(_) => s.faulted = true,
                    }
                }
            } else if model.is_free_running() {
                for r in s.stream.free_run(a, b, &mut s.capture_rng) {
                    s.writer.push(r);
                }
            }
        }
    }

    /// Seal completed chunks to disk. Chunks that cannot be written stay buffered.
    fn write_ready(&mut self, inject_failure: bool) {
        let cap = self.node.as_ref().map_or(0, |n| n.storage_capacity_bytes);
        for s in &mut self.sensors {
            let ready = s.writer.take_ready();
            let mut failed = Vec::new();
            for (idx, recs) in ready {
                if inject_failure || !failed.is_empty() {
                    failed.push((idx, recs));
                    continue;
                }
                let bytes = encode_chunk(self.node_id, &s.cfg.sensor_id, idx, &recs);
                if self.storage_used + bytes.len() as u64 > cap {
                    self.degraded.get_or_insert_with(|| "storage full".into());
                    failed.push((idx, recs));
                    continue;
                }
                let path = chunk_path(&self.root, self.node_id, &s.cfg.sensor_id, idx);
                let written = path
                    .parent()
                    .map_or(Ok(()), std::fs::create_dir_all)
                    .and_then(|_| std::fs::write(&path, &bytes));
                if let Err(e) = written {
                    self.degraded.get_or_insert_with(|| format!("chunk write failed: {e}"));
                    failed.push((idx, recs));
                    continue;
                }
                self.storage_used += bytes.len() as u64;
                s.stats.records += recs.len() as u64;
                s.stats.payload_bytes += recs.iter().map(|r| r.payload_size_bytes as u64).sum::<u64>();
                s.stats.chunk_bytes += bytes.len() as u64;
                s.stats.chunks += 1;
            }
            if !failed.is_empty() {
                s.faulted = true;
                s.writer.restore_ready(failed);
            }
        }
        if inject_failure && self.sensors.iter().any(|s| s.writer.unsealed() > 0) {
            self.degraded.get_or_insert_with(|| "flush failed".into());
        }
    }

    fn stop(&mut self, at_ns: Nanos, trigger_start: Nanos, trigger_stop: Nanos, abort: bool) -> NodeSummary {
        let start = self.recording.as_ref().map_or(at_ns, |r| r.start_ns);
        if abort {
            for s in &mut self.sensors {
                s.writer.discard();
            }
        } else {
            self.trigger_since = (trigger_start < trigger_stop).then_some(trigger_start);
            self.trigger_stop = trigger_stop;
            self.advance_to(at_ns);
            for s in &mut self.sensors {
                s.writer.close();
            }
            let fail = self.node.as_ref().is_some_and(|n| n.fail_flush);
            self.write_ready(fail);
        }
        self.recording = None;
        self.trigger_since = None;
        self.phase = WorkerPhase::Launched;
        let sensors = self
            .sensors
            .iter_mut()
            .map(|s| {
                let mut st = s.stats.clone();
                st.retained = s.writer.unsealed();
                st.sync_faults = s.stream.sync_faults;
                if abort {
                    st = SensorSummary {
                        sensor_id: st.sensor_id,
                        ..Default::default()
                    };
                }
                st
            })
            .collect();
        NodeSummary {
            degraded: self.degraded.is_some(),
            detail: self.degraded.clone().unwrap_or_default(),
            rec_start_ns: start,
            rec_end_ns: at_ns,
            sensors,
        }
    }
}
