use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Subcommand;
use mapbot_core::cluster::decode_chunk;
use mapbot_core::cluster::run::restoration_line;
use mapbot_core::postproc::{default_tolerance_s, restore_timestamps};
use mapbot_core::sensors::SensorRecord;
use mapbot_core::trigger::{Edge, TriggerEvent};
use serde::Deserialize;

use crate::{usage, CliError, CliResult};

#[derive(Debug, Subcommand)]
pub enum PostprocCmd {
    /// Restore trigger times onto recorded messages and list frame drops.
    Restore {
        /// Record sources in time order: `.swch` chunk files, or CSV with
        /// `sequence_index,device_time_ns` columns.
        #[arg(long, required = true, num_args = 1..)]
        records: Vec<PathBuf>,
        /// Trigger CSV as written by `trigger schedule`.
        #[arg(long)]
        triggers: PathBuf,
        /// Keep only this channel's edges.
        #[arg(long)]
        channel: Option<u8>,
        /// Match against one edge kind only.
        #[arg(long, value_parser = |s: &str| s.parse::<Edge>())]
        edge: Option<Edge>,
        /// Matching tolerance in seconds; defaults to 40% of the smallest trigger spacing.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Write restored records as CSV.
        #[arg(long)]
        restored: Option<PathBuf>,
        /// Report destination; stdout by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Deserialize)]
struct RecordRow {
    sequence_index: u64,
    device_time_ns: i64,
    #[serde(default)]
    payload_digest: u64,
    #[serde(default)]
    payload_size_bytes: u32,
    #[serde(default)]
    sensor_id: String,
}

#[derive(Debug, Deserialize)]
struct TriggerRow {
    channel_id: u8,
    time_ns: i64,
    edge: String,
    seq: u64,
}

fn read_records(path: &Path) -> anyhow::Result<Vec<SensorRecord>> {
    if path.extension().is_some_and(|e| e == "swch") {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let chunk = decode_chunk(&bytes).with_context(|| format!("{} is corrupt", path.display()))?;
        return Ok(chunk.records);
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    rdr.deserialize::<RecordRow>()
        .map(|r| {
            let r = r.with_context(|| format!("parsing {}", path.display()))?;
            Ok(SensorRecord {
                sensor_id: r.sensor_id,
                sequence_index: r.sequence_index,
                device_time_ns: r.device_time_ns,
                payload_digest: r.payload_digest,
                payload_size_bytes: r.payload_size_bytes,
            })
        })
        .collect()
}

fn read_triggers(path: &Path) -> anyhow::Result<Vec<TriggerEvent>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    rdr.deserialize::<TriggerRow>()
        .map(|r| {
            let r = r.with_context(|| format!("parsing {}", path.display()))?;
            Ok(TriggerEvent {
                channel_id: r.channel_id,
                true_time_ns: r.time_ns,
                edge: r.edge.parse().map_err(anyhow::Error::msg)?,
                sequence_index: r.seq,
            })
        })
        .collect()
}

pub fn exec(cmd: PostprocCmd) -> CliResult {
    let PostprocCmd::Restore {
        records,
        triggers,
        channel,
        edge,
        tolerance,
        restored,
        out,
    } = cmd;
    let mut recs = Vec::new();
    for p in &records {
        recs.extend(read_records(p).map_err(|e| usage(format!("{e:#}")))?);
    }
    let mut trig = read_triggers(&triggers).map_err(|e| usage(format!("{e:#}")))?;
    trig.retain(|t| channel.is_none_or(|c| t.channel_id == c) && edge.is_none_or(|e| t.edge == e));
    let tol = tolerance.or_else(|| default_tolerance_s(&trig)).unwrap_or(0.0);
    let (restored_recs, mut report) =
        restore_timestamps(&recs, &trig, tol).map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;
    if report.sensor_id.is_empty() {
        report.sensor_id = records[0]
            .file_stem()
            .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    }
    if let Some(path) = restored {
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        w.write_record(["sequence_index", "restored_time_ns", "payload_digest", "payload_size_bytes"])
            .map_err(anyhow::Error::from)?;
        for r in &restored_recs {
            w.write_record([
                r.sequence_index.to_string(),
                r.device_time_ns.to_string(),
                r.payload_digest.to_string(),
                r.payload_size_bytes.to_string(),
            ])
            .map_err(anyhow::Error::from)?;
        }
        w.flush().map_err(anyhow::Error::from)?;
    }
    crate::io::emit(out.as_deref(), "timestamp restoration", &[restoration_line(&report)])?;
    Ok(())
}
