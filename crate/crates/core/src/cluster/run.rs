//! Full collection run: lifecycle, recording, collection, restoration, and
//! the artifact tree written to the output directory.
//!
//! Artifacts (all deterministic for a fixed config and seed):
//!
//! | file | content |
//! |------|---------|
//! | `chunks/node_XX/<sensor>/chunk_NNNNN.swch` | sealed record chunks |
//! | `schedule.csv` | Syncboard edges, `channel_id,time_ns,edge,seq` |
//! | `restoration.txt` | `restoration` lines per trigger-driven sensor |
//! | `summary.txt` | `run`, `node` and `sensor` lines |
//! | `injected_drops.txt` | `injected` lines, the simulator's drop ledger |
//! | `lifecycle.txt` | `transition` lines |
//! | `sync.txt` | `sync` lines, clock verification per node |
//! | `chunks.txt` | `chunk` lines, read-back verification per chunk |

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::chunk::CollectedChunk;
use super::{ClusterError, Coordinator, Phase, StopSummary, SyncReport};
use crate::config::RunConfig;
use crate::postproc::{default_tolerance_s, restore_timestamps, RestorationReport, DEFAULT_TOLERANCE_FRACTION};
use crate::report::{fmt_f64, write_report, ReportLine};
use crate::sensors::{SensorKind, SensorRecord};
use crate::trigger::{ultrasound_schedule, SyncboardState, TriggerEvent};

pub const RUN_LABEL: &str = "run-0";

#[derive(Debug, Error)]
#[error("run failed in phase {phase}: {error}")]
pub struct RunFailure {
    pub phase: Phase,
    #[source]
    pub error: ClusterError,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub summary: StopSummary,
    pub restorations: Vec<RestorationReport>,
    pub sync_reports: Vec<SyncReport>,
    pub schedule: Vec<TriggerEvent>,
    pub corrupt_chunks: usize,
}

/// Trigger edges a sensor's records answer, or `None` for free-running sensors.
pub fn sensor_triggers(config: &RunConfig, board: &SyncboardState, sensor_id: &str) -> Option<Vec<TriggerEvent>> {
    let s = config.sensors.iter().find(|s| s.sensor_id == sensor_id)?;
    let end = board.segments.iter().map(|s| s.1).max().unwrap_or(0);
    if s.kind == SensorKind::Ultrasound {
        let slots = config.ultrasound_slots();
        let slot = slots.iter().position(|id| *id == sensor_id)?;
        let mut out = Vec::new();
        for &(a, b) in &board.segments {
            let events = ultrasound_schedule(
                slots.len(),
                config.ultrasound.slot_s,
                a as f64 / 1e9,
                b as f64 / 1e9,
                config.ultrasound.max_range_m,
            )
            .ok()?;
            out.extend(events.into_iter().filter(|e| e.channel_id as usize == slot));
        }
        return Some(out);
    }
    let model = s.model();
    if model.is_frame_triggered() || s.kind == SensorKind::EventCamera {
        return board.channel_events(s.trigger_channel?, 0, end).ok();
    }
    None
}

fn nominal_tolerance_s(config: &RunConfig, sensor_id: &str) -> f64 {
    let Some(s) = config.sensors.iter().find(|s| s.sensor_id == sensor_id) else {
        return 0.0;
    };
    let spacing = match (s.kind, s.trigger_channel) {
        (SensorKind::Ultrasound, _) => config.ultrasound.slot_s * config.ultrasound_slots().len() as f64,
        (_, Some(ch)) => config
            .syncboard
            .channels
            .iter()
            .find(|c| c.channel_id == ch)
            .map_or(0.0, |c| c.period_s() * c.duty_ratio.min(1.0 - c.duty_ratio)),
        _ => 0.0,
    };
    DEFAULT_TOLERANCE_FRACTION * spacing
}

/// Restore every trigger-driven sensor from verified chunks, in config order.
pub fn restore_all(
    config: &RunConfig,
    board: &SyncboardState,
    chunks: &[CollectedChunk],
) -> Result<Vec<RestorationReport>, crate::postproc::PostprocError> {
    let mut by_sensor: BTreeMap<&str, Vec<&CollectedChunk>> = BTreeMap::new();
    for c in chunks {
        by_sensor.entry(c.sensor_id.as_str()).or_default().push(c);
    }
    let mut out = Vec::new();
    for s in &config.sensors {
        let Some(triggers) = sensor_triggers(config, board, &s.sensor_id) else { continue };
        let mut parts = by_sensor.remove(s.sensor_id.as_str()).unwrap_or_default();
        parts.sort_by_key(|c| c.chunk_index);
        let records: Vec<SensorRecord> = parts
            .iter()
            .filter_map(|c| c.result.as_ref().ok())
            .flat_map(|c| c.records.iter().cloned())
            .collect();
        let tol = default_tolerance_s(&triggers).unwrap_or_else(|| nominal_tolerance_s(config, &s.sensor_id));
        let (_, mut report) = restore_timestamps(&records, &triggers, tol)?;
        report.sensor_id = s.sensor_id.clone();
        out.push(report);
    }
    Ok(out)
}

/// Restore every trigger-driven sensor from the store and publish frame-drop
/// alerts. Not available while recording.
pub fn detect_drops(coord: &mut Coordinator) -> Result<(Vec<CollectedChunk>, Vec<RestorationReport>), ClusterError> {
    let chunks = coord.collect_chunks(None, None)?;
    let reports = restore_all(coord.config(), coord.board(), &chunks)
        .map_err(|e| ClusterError::Other(format!("restoration: {e}")))?;
    for r in &reports {
        coord.report_drops(&r.sensor_id, &r.dropped_trigger_indices);
    }
    Ok((chunks, reports))
}

/// Bringup through stop for one recording of `duration_s`, leaving the
/// cluster in SensorsUp.
pub fn drive(coord: &mut Coordinator, duration_s: f64) -> Result<StopSummary, RunFailure> {
    fn step(
        coord: &mut Coordinator,
        f: impl FnOnce(&mut Coordinator) -> Result<(), ClusterError>,
    ) -> Result<(), RunFailure> {
        f(coord).map_err(|error| RunFailure { phase: coord.phase(), error })
    }
    step(coord, |c| c.bringup().map(drop))?;
    step(coord, |c| c.time_sync_phase().map(drop))?;
    step(coord, |c| c.launch().map(drop))?;
    step(coord, |c| c.start_recording(RUN_LABEL).map(drop))?;
    step(coord, |c| c.record_for(duration_s))?;
    coord.stop_recording().map_err(|error| RunFailure { phase: coord.phase(), error })
}

/// Run the whole procedure and write the artifact tree under `out`.
pub fn run_collection(config: &RunConfig, out: &Path, duration_s: f64) -> Result<RunOutcome, RunFailure> {
    let io_fail = |phase, e: std::io::Error| RunFailure {
        phase,
        error: ClusterError::Io(e),
    };
    if out.join("chunks").exists() {
        return Err(RunFailure {
            phase: Phase::PoweredOff,
            error: ClusterError::Other(format!("{} already holds a chunk store", out.display())),
        });
    }
    std::fs::create_dir_all(out).map_err(|e| io_fail(Phase::PoweredOff, e))?;
    let mut coord = Coordinator::new(config.clone(), out).map_err(|error| RunFailure {
        phase: Phase::PoweredOff,
        error,
    })?;
    let summary = drive(&mut coord, duration_s)?;
    let phase = coord.phase();
    let (chunks, restorations) = detect_drops(&mut coord).map_err(|error| RunFailure { phase, error })?;
    let schedule = coord.trigger_schedule();
    let sync_reports = coord.sync_reports().to_vec();
    coord.finish().map_err(|error| RunFailure { phase, error })?;

    let outcome = RunOutcome {
        corrupt_chunks: chunks.iter().filter(|c| c.is_corrupt()).count(),
        summary,
        restorations,
        sync_reports,
        schedule,
    };
    write_artifacts(out, &coord, &outcome, &chunks).map_err(|e| io_fail(Phase::Finished, e))?;
    Ok(outcome)
}

pub fn write_schedule_csv<W: Write>(w: W, events: &[TriggerEvent]) -> std::io::Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["channel_id", "time_ns", "edge", "seq"])?;
    for e in events {
        csv.write_record([
            e.channel_id.to_string(),
            e.true_time_ns.to_string(),
            e.edge.as_str().to_string(),
            e.sequence_index.to_string(),
        ])?;
    }
    csv.flush()
}

pub fn restoration_line(r: &RestorationReport) -> ReportLine {
    ReportLine::new("restoration")
        .with("sensor", &r.sensor_id)
        .with("total_triggers", r.total_triggers)
        .with("matched", r.matched)
        .with("dropped_count", r.dropped_trigger_indices.len())
        .with_list("dropped", &r.dropped_trigger_indices)
        .with("unmatched_records", r.unmatched_records)
        .with("max_residual_s", fmt_f64(r.max_match_residual_s))
        .with("bias_s", fmt_f64(r.bias_s))
}

fn write_artifacts(
    out: &Path,
    coord: &Coordinator,
    o: &RunOutcome,
    chunks: &[CollectedChunk],
) -> std::io::Result<()> {
    write_schedule_csv(std::fs::File::create(out.join("schedule.csv"))?, &o.schedule)?;

    let lines: Vec<_> = o.restorations.iter().map(restoration_line).collect();
    std::fs::write(out.join("restoration.txt"), write_report("timestamp restoration", &lines))?;

    let s = &o.summary;
    let mut lines = vec![ReportLine::new("run")
        .with("label", &s.run_label)
        .with("trigger_start_ns", s.trigger_start_ns)
        .with("trigger_stop_ns", s.trigger_stop_ns)
        .with("last_trigger_ns", s.last_trigger_ns.map_or("none".into(), |t| t.to_string()))
        .with("stop_rec_dispatch_ns", s.stop_rec_dispatch_ns)
        .with("corrupt_chunks", o.corrupt_chunks)];
    for (id, n) in &s.nodes {
        lines.push(
            ReportLine::new("node")
                .with("node", id)
                .with("degraded", n.degraded)
                .with("detail", &n.detail)
                .with("rec_start_ns", n.rec_start_ns)
                .with("rec_end_ns", n.rec_end_ns),
        );
        for x in &n.sensors {
            lines.push(
                ReportLine::new("sensor")
                    .with("node", id)
                    .with("sensor", &x.sensor_id)
                    .with("records", x.records)
                    .with("payload_bytes", x.payload_bytes)
                    .with("chunk_bytes", x.chunk_bytes)
                    .with("chunks", x.chunks)
                    .with("retained", x.retained)
                    .with("sync_faults", x.sync_faults),
            );
        }
    }
    std::fs::write(out.join("summary.txt"), write_report("run summary", &lines))?;

    let lines: Vec<_> = s
        .nodes
        .iter()
        .flat_map(|(_, n)| n.sensors.iter())
        .map(|x| {
            ReportLine::new("injected")
                .with("sensor", &x.sensor_id)
                .with("dropped_count", x.injected_drops.len())
                .with_list("dropped", &x.injected_drops)
        })
        .collect();
    std::fs::write(out.join("injected_drops.txt"), write_report("injected frame drops", &lines))?;

    let lines: Vec<_> = coord
        .lifecycle()
        .transitions
        .iter()
        .map(|(p, t)| ReportLine::new("transition").with("phase", p).with("at_ns", t))
        .collect();
    std::fs::write(out.join("lifecycle.txt"), write_report("lifecycle", &lines))?;

    let lines: Vec<_> = o
        .sync_reports
        .iter()
        .map(|r| {
            ReportLine::new("sync")
                .with("node", r.node_id)
                .with("rounds", r.rounds_used())
                .with("pre_offset_s", fmt_f64(r.pre_offset_s))
                .with("post_offset_s", fmt_f64(r.post_offset_s))
                .with("last_measured_s", fmt_f64(r.last_measured_offset_s()))
                .with("converged", r.converged)
        })
        .collect();
    std::fs::write(out.join("sync.txt"), write_report("clock verification", &lines))?;

    let lines: Vec<_> = chunks
        .iter()
        .map(|c| {
            let l = ReportLine::new("chunk")
                .with("node", c.node_id)
                .with("sensor", &c.sensor_id)
                .with("index", c.chunk_index);
            match &c.result {
                Ok(rc) => l
                    .with("status", "ok")
                    .with("records", rc.records.len())
                    .with("bytes", rc.byte_length)
                    .with("crc32c", format!("{:08x}", rc.checksum)),
                Err(e) => l.with("status", "corrupt").with("reason", e),
            }
        })
        .collect();
    std::fs::write(out.join("chunks.txt"), write_report("chunk verification", &lines))?;
    Ok(())
}
