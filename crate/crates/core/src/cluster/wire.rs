//! Master/worker control protocol.
//!
//! Frame: `u32 body_length | u8 type | u8 node_id | u16 reserved (0)`, then the
//! body. Everything is big-endian. Strings are `u16 length + UTF-8`, lists are
//! `u32 count + items`.
//!
//! | type | code | body |
//! |------|------|------|
//! | HELLO | 1 | `boot_ns i64` |
//! | CONFIG | 2 | canonical config bytes (rest of frame) |
//! | LAUNCH | 3 | `at_ns i64` |
//! | START_REC | 4 | `at_ns i64, run_label str` |
//! | STOP_REC | 5 | `at_ns i64, trigger_start_ns i64, trigger_stop_ns i64, abort u8` |
//! | STATUS_REQ | 6 | `now_ns i64, trigger_since_ns i64` (-1: board idle) |
//! | STATUS | 7 | see [`NodeStatus`] |
//! | SUMMARY | 8 | see [`NodeSummary`] |

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Nanos;

pub const HEADER_LEN: usize = 8;
pub const MAX_BODY_LEN: u32 = 64 * 1024 * 1024;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("frame declares {declared} body bytes, {actual} present")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("frame shorter than the {HEADER_LEN}-byte header")]
    ShortHeader,
    #[error("reserved header bits set: {0:#06x}")]
    Reserved(u16),
    #[error("body of {0} bytes exceeds the frame limit")]
    TooLarge(usize),
    #[error("malformed {kind} body: {reason}")]
    Body { kind: &'static str, reason: String },
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    Config = 2,
    Launch = 3,
    StartRec = 4,
    StopRec = 5,
    StatusReq = 6,
    Status = 7,
    Summary = 8,
}

impl MessageType {
    pub fn from_code(code: u8) -> Result<Self, WireError> {
        use MessageType::*;
        Ok(match code {
            1 => Hello,
            2 => Config,
            3 => Launch,
            4 => StartRec,
            5 => StopRec,
            6 => StatusReq,
            7 => Status,
            8 => Summary,
            other => return Err(WireError::UnknownType(other)),
        })
    }

    pub fn name(self) -> &'static str {
        use MessageType::*;
        match self {
            Hello => "HELLO",
            Config => "CONFIG",
            Launch => "LAUNCH",
            StartRec => "START_REC",
            StopRec => "STOP_REC",
            StatusReq => "STATUS_REQ",
            Status => "STATUS",
            Summary => "SUMMARY",
        }
    }
}

/// Worker-side phase reported in STATUS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum WorkerPhase {
    Booted = 0,
    Configured = 1,
    Launched = 2,
    Recording = 3,
}

impl WorkerPhase {
    fn from_code(c: u8) -> Option<Self> {
        use WorkerPhase::*;
        [Booted, Configured, Launched, Recording].into_iter().find(|p| *p as u8 == c)
    }
}

/// STATUS body, also the ack (or NACK, `ok = false`) for CONFIG, LAUNCH and START_REC.
///
/// `ok u8, phase u8, config_digest u64, storage_used u64, storage_capacity u64,
/// sensors_ok u16, sensors_fault u16, records u64, detail str`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStatus {
    pub ok: bool,
    pub phase: WorkerPhase,
    pub config_digest: u64,
    pub storage_used: u64,
    pub storage_capacity: u64,
    pub sensors_ok: u16,
    pub sensors_fault: u16,
    pub records: u64,
    pub detail: String,
}

/// Per-sensor entry of a SUMMARY:
/// `sensor_id str, records u64, payload_bytes u64, chunk_bytes u64, chunks u32,
/// retained u64, sync_faults u32, injected_drops list<u64>`
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SensorSummary {
    pub sensor_id: String,
    /// Records in sealed chunks.
    pub records: u64,
    pub payload_bytes: u64,
    pub chunk_bytes: u64,
    pub chunks: u32,
    /// Records kept in memory because sealing failed.
    pub retained: u64,
    pub sync_faults: u32,
    /// Trigger sequence indices the simulator dropped.
    pub injected_drops: Vec<u64>,
}

/// SUMMARY body: `degraded u8, detail str, rec_start_ns i64, rec_end_ns i64, list<SensorSummary>`
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NodeSummary {
    pub degraded: bool,
    pub detail: String,
    pub rec_start_ns: Nanos,
    pub rec_end_ns: Nanos,
    pub sensors: Vec<SensorSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Hello { boot_ns: Nanos },
    Config { bytes: Vec<u8> },
    Launch { at_ns: Nanos },
    StartRec { at_ns: Nanos, run_label: String },
    StopRec { at_ns: Nanos, trigger_start_ns: Nanos, trigger_stop_ns: Nanos, abort: bool },
    StatusReq { now_ns: Nanos, trigger_since_ns: Option<Nanos> },
    Status(NodeStatus),
    Summary(NodeSummary),
}

impl Payload {
    pub fn kind(&self) -> MessageType {
        match self {
            Payload::Hello { .. } => MessageType::Hello,
            Payload::Config { .. } => MessageType::Config,
            Payload::Launch { .. } => MessageType::Launch,
            Payload::StartRec { .. } => MessageType::StartRec,
            Payload::StopRec { .. } => MessageType::StopRec,
            Payload::StatusReq { .. } => MessageType::StatusReq,
            Payload::Status(_) => MessageType::Status,
            Payload::Summary(_) => MessageType::Summary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub node_id: u8,
    pub payload: Payload,
}

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn str(&mut self, s: &str) {
        let b = s.as_bytes();
        let n = b.len().min(u16::MAX as usize);
        self.u16(n as u16);
        self.0.extend_from_slice(&b[..n]);
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    kind: &'static str,
}

impl<'a> Dec<'a> {
    fn err(&self, reason: impl Into<String>) -> WireError {
        WireError::Body {
            kind: self.kind,
            reason: reason.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(self.err(format!("truncated, needed {n} more bytes")));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64, WireError> {
        Ok(i64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bool(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.err(format!("boolean byte {v}"))),
        }
    }
    fn str(&mut self) -> Result<String, WireError> {
        let n = self.u16()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("string is not UTF-8"))
    }
    fn finish(self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(self.err(format!("{} trailing bytes", self.buf.len())))
        }
    }
}

fn encode_body(p: &Payload) -> Vec<u8> {
    let mut e = Enc::default();
    match p {
        Payload::Hello { boot_ns } => e.i64(*boot_ns),
        Payload::Config { bytes } => e.0.extend_from_slice(bytes),
        Payload::Launch { at_ns } => e.i64(*at_ns),
        Payload::StartRec { at_ns, run_label } => {
            e.i64(*at_ns);
            e.str(run_label);
        }
        Payload::StopRec {
            at_ns,
            trigger_start_ns,
            trigger_stop_ns,
            abort,
        } => {
            e.i64(*at_ns);
            e.i64(*trigger_start_ns);
            e.i64(*trigger_stop_ns);
            e.u8(*abort as u8);
        }
        Payload::StatusReq { now_ns, trigger_since_ns } => {
            e.i64(*now_ns);
            e.i64(trigger_since_ns.unwrap_or(-1));
        }
        Payload::Status(s) => {
            e.u8(s.ok as u8);
            e.u8(s.phase as u8);
            e.u64(s.config_digest);
            e.u64(s.storage_used);
            e.u64(s.storage_capacity);
            e.u16(s.sensors_ok);
            e.u16(s.sensors_fault);
            e.u64(s.records);
            e.str(&s.detail);
        }
        Payload::Summary(s) => {
            e.u8(s.degraded as u8);
            e.str(&s.detail);
            e.i64(s.rec_start_ns);
            e.i64(s.rec_end_ns);
            e.u32(s.sensors.len() as u32);
            for x in &s.sensors {
                e.str(&x.sensor_id);
                e.u64(x.records);
                e.u64(x.payload_bytes);
                e.u64(x.chunk_bytes);
                e.u32(x.chunks);
                e.u64(x.retained);
                e.u32(x.sync_faults);
                e.u32(x.injected_drops.len() as u32);
                for d in &x.injected_drops {
                    e.u64(*d);
                }
            }
        }
    }
    e.0
}

fn decode_body(kind: MessageType, body: &[u8]) -> Result<Payload, WireError> {
    let mut d = Dec { buf: body, kind: kind.name() };
    let p = match kind {
        MessageType::Hello => Payload::Hello { boot_ns: d.i64()? },
        MessageType::Config => {
            let bytes = d.take(body.len())?.to_vec();
            Payload::Config { bytes }
        }
        MessageType::Launch => Payload::Launch { at_ns: d.i64()? },
        MessageType::StartRec => Payload::StartRec {
            at_ns: d.i64()?,
            run_label: d.str()?,
        },
        MessageType::StopRec => Payload::StopRec {
            at_ns: d.i64()?,
            trigger_start_ns: d.i64()?,
            trigger_stop_ns: d.i64()?,
            abort: d.bool()?,
        },
        MessageType::StatusReq => {
            let now_ns = d.i64()?;
            let since = d.i64()?;
            Payload::StatusReq {
                now_ns,
                trigger_since_ns: (since >= 0).then_some(since),
            }
        }
        MessageType::Status => {
            let ok = d.bool()?;
            let code = d.u8()?;
            let phase = WorkerPhase::from_code(code).ok_or_else(|| d.err(format!("phase code {code}")))?;
            Payload::Status(NodeStatus {
                ok,
                phase,
                config_digest: d.u64()?,
                storage_used: d.u64()?,
                storage_capacity: d.u64()?,
                sensors_ok: d.u16()?,
                sensors_fault: d.u16()?,
                records: d.u64()?,
                detail: d.str()?,
            })
        }
        MessageType::Summary => {
            let degraded = d.bool()?;
            let detail = d.str()?;
            let rec_start_ns = d.i64()?;
            let rec_end_ns = d.i64()?;
            let n = d.u32()? as usize;
            let mut sensors = Vec::with_capacity(n.min(1024));
            for _ in 0..n {
                let sensor_id = d.str()?;
                let records = d.u64()?;
                let payload_bytes = d.u64()?;
                let chunk_bytes = d.u64()?;
                let chunks = d.u32()?;
                let retained = d.u64()?;
                let sync_faults = d.u32()?;
                let k = d.u32()? as usize;
                if k > d.buf.len() / 8 {
                    return Err(d.err("drop list longer than the body"));
                }
                let injected_drops = (0..k).map(|_| d.u64()).collect::<Result<_, _>>()?;
                sensors.push(SensorSummary {
                    sensor_id,
                    records,
                    payload_bytes,
                    chunk_bytes,
                    chunks,
                    retained,
                    sync_faults,
                    injected_drops,
                });
            }
            Payload::Summary(NodeSummary {
                degraded,
                detail,
                rec_start_ns,
                rec_end_ns,
                sensors,
            })
        }
    };
    d.finish()?;
    Ok(p)
}

impl Frame {
    pub fn new(node_id: u8, payload: Payload) -> Self {
        Self { node_id, payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        let body = encode_body(&self.payload);
        let mut out = Vec::with_capacity(HEADER_LEN + body.len());
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.push(self.payload.kind() as u8);
        out.push(self.node_id);
        out.extend_from_slice(&0u16.to_be_bytes());
        out.extend_from_slice(&body);
        out
    }

    /// Decode exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < HEADER_LEN {
            return Err(WireError::ShortHeader);
        }
        let declared = u32::from_be_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let kind = MessageType::from_code(bytes[4])?;
        let reserved = u16::from_be_bytes(bytes[6..8].try_into().unwrap());
        if reserved != 0 {
            return Err(WireError::Reserved(reserved));
        }
        let body = &bytes[HEADER_LEN..];
        if declared != body.len() {
            return Err(WireError::LengthMismatch {
                declared,
                actual: body.len(),
            });
        }
        Ok(Self {
            node_id: bytes[5],
            payload: decode_body(kind, body)?,
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), WireError> {
        w.write_all(&self.encode()).map_err(|e| WireError::Io(e.to_string()))
    }

    /// Read one frame from a byte stream.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, WireError> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header).map_err(|e| WireError::Io(e.to_string()))?;
        let len = u32::from_be_bytes(header[0..4].try_into().unwrap());
        if len > MAX_BODY_LEN {
            return Err(WireError::TooLarge(len as usize));
        }
        MessageType::from_code(header[4])?;
        let mut buf = header.to_vec();
        buf.resize(HEADER_LEN + len as usize, 0);
        r.read_exact(&mut buf[HEADER_LEN..]).map_err(|e| WireError::Io(e.to_string()))?;
        Self::decode(&buf)
    }
}
