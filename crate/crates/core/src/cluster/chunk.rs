//! On-disk record chunks.
//!
//! Little-endian layout:
//!
//! ```text
//! "SWCH" | version u16 | node_id u8 | sensor_id_len u16 | sensor_id | chunk_index u32
//! repeated: record_len u32 | sequence_index u64 | device_time_ns i64 | payload_digest u64 | payload_size u32
//! crc32c u32 over every preceding byte
//! ```
//!
//! Files live at `chunks/node_XX/<sensor_id>/chunk_NNNNN.swch` under a store root.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sensors::SensorRecord;
use crate::time::Nanos;

pub const MAGIC: &[u8; 4] = b"SWCH";
pub const VERSION: u16 = 1;
pub const RECORD_BODY_LEN: u32 = 28;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ChunkError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    Version(u16),
    #[error("truncated at byte {0}")]
    Truncated(usize),
    #[error("checksum mismatch: computed {computed:08x}, stored {stored:08x}")]
    Checksum { computed: u32, stored: u32 },
    #[error("record length {0} is not {RECORD_BODY_LEN}")]
    RecordLength(u32),
    #[error("records out of time order at index {0}")]
    Unordered(usize),
    #[error("sensor id is not UTF-8")]
    SensorId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordChunk {
    pub node_id: u8,
    pub sensor_id: String,
    pub chunk_index: u32,
    pub records: Vec<SensorRecord>,
    pub byte_length: usize,
    pub checksum: u32,
}

pub fn encode_chunk(node_id: u8, sensor_id: &str, chunk_index: u32, records: &[SensorRecord]) -> Vec<u8> {
    let id = sensor_id.as_bytes();
    let mut out = Vec::with_capacity(17 + id.len() + records.len() * 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(node_id);
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&chunk_index.to_le_bytes());
    for r in records {
        out.extend_from_slice(&RECORD_BODY_LEN.to_le_bytes());
        out.extend_from_slice(&r.sequence_index.to_le_bytes());
        out.extend_from_slice(&r.device_time_ns.to_le_bytes());
        out.extend_from_slice(&r.payload_digest.to_le_bytes());
        out.extend_from_slice(&r.payload_size_bytes.to_le_bytes());
    }
    let crc = crc32c::crc32c(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_chunk(bytes: &[u8]) -> Result<RecordChunk, ChunkError> {
    if bytes.len() < 4 {
        return Err(ChunkError::Truncated(bytes.len()));
    }
    let (content, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32c::crc32c(content);
    if stored != computed {
        return Err(ChunkError::Checksum { computed, stored });
    }
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8], ChunkError> {
        let s = content.get(pos..pos + n).ok_or(ChunkError::Truncated(pos))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(ChunkError::BadMagic);
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(ChunkError::Version(version));
    }
    let node_id = take(1)?[0];
    let id_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
    let sensor_id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| ChunkError::SensorId)?;
    let chunk_index = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut records = Vec::new();
    loop {
        let Ok(len) = take(4) else { break };
        let len = u32::from_le_bytes(len.try_into().unwrap());
        if len != RECORD_BODY_LEN {
            return Err(ChunkError::RecordLength(len));
        }
        let b = take(RECORD_BODY_LEN as usize)?;
        let rec = SensorRecord {
            sensor_id: sensor_id.clone(),
            sequence_index: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            device_time_ns: i64::from_le_bytes(b[8..16].try_into().unwrap()),
            payload_digest: u64::from_le_bytes(b[16..24].try_into().unwrap()),
            payload_size_bytes: u32::from_le_bytes(b[24..28].try_into().unwrap()),
        };
        if records.last().is_some_and(|p: &SensorRecord| p.device_time_ns > rec.device_time_ns) {
            return Err(ChunkError::Unordered(records.len()));
        }
        records.push(rec);
    }
    if pos != content.len() {
        return Err(ChunkError::Truncated(pos));
    }
    Ok(RecordChunk {
        node_id,
        sensor_id,
        chunk_index,
        records,
        byte_length: bytes.len(),
        checksum: stored,
    })
}

pub fn node_dir(root: &Path, node_id: u8) -> PathBuf {
    root.join("chunks").join(format!("node_{node_id:02}"))
}

pub fn chunk_path(root: &Path, node_id: u8, sensor_id: &str, chunk_index: u32) -> PathBuf {
    node_dir(root, node_id)
        .join(sensor_id)
        .join(format!("chunk_{chunk_index:05}.swch"))
}

/// Buffers one sensor's records and cuts them into chunks by logical payload
/// size or time span, whichever limit is reached first.
#[derive(Debug)]
pub struct ChunkWriter {
    node_id: u8,
    sensor_id: String,
    max_payload_bytes: u64,
    max_span_ns: Nanos,
    pending: Vec<SensorRecord>,
    pending_payload: u64,
    next_index: u32,
    ready: Vec<(u32, Vec<SensorRecord>)>,
}

impl ChunkWriter {
    pub fn new(node_id: u8, sensor_id: impl Into<String>, max_payload_bytes: u64, max_span_ns: Nanos) -> Self {
        Self {
            node_id,
            sensor_id: sensor_id.into(),
            max_payload_bytes: max_payload_bytes.max(1),
            max_span_ns: max_span_ns.max(1),
            pending: Vec::new(),
            pending_payload: 0,
            next_index: 0,
            ready: Vec::new(),
        }
    }

    pub fn sensor_id(&self) -> &str {
        &self.sensor_id
    }

    pub fn node_id(&self) -> u8 {
        self.node_id
    }

    pub fn push(&mut self, rec: SensorRecord) {
        if let Some(first) = self.pending.first() {
            let size = self.pending_payload + rec.payload_size_bytes as u64;
            if size > self.max_payload_bytes || rec.device_time_ns - first.device_time_ns >= self.max_span_ns {
                self.cut();
            }
        }
        self.pending_payload += rec.payload_size_bytes as u64;
        self.pending.push(rec);
    }

    fn cut(&mut self) {
        if self.pending.is_empty() {
            return;
        }
        let recs = std::mem::take(&mut self.pending);
        self.pending_payload = 0;
        self.ready.push((self.next_index, recs));
        self.next_index += 1;
    }

    /// Close the open chunk so that [`ChunkWriter::take_ready`] returns it.
    pub fn close(&mut self) {
        self.cut();
    }

    /// Chunks complete and waiting to be written, in index order.
    pub fn take_ready(&mut self) -> Vec<(u32, Vec<SensorRecord>)> {
        std::mem::take(&mut self.ready)
    }

    /// Put back chunks that could not be written.
    pub fn restore_ready(&mut self, mut chunks: Vec<(u32, Vec<SensorRecord>)>) {
        chunks.append(&mut self.ready);
        self.ready = chunks;
    }

    /// Drop everything not yet written.
    pub fn discard(&mut self) {
        self.pending.clear();
        self.pending_payload = 0;
        self.ready.clear();
    }

    /// Records buffered but not yet written.
    pub fn unsealed(&self) -> u64 {
        (self.pending.len() + self.ready.iter().map(|(_, r)| r.len()).sum::<usize>()) as u64
    }
}

/// Outcome of reading one chunk file back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollectedChunk {
    pub path: PathBuf,
    pub node_id: u8,
    pub sensor_id: String,
    pub chunk_index: u32,
    pub result: Result<RecordChunk, ChunkError>,
}

impl CollectedChunk {
    pub fn is_corrupt(&self) -> bool {
        self.result.is_err()
    }
}

/// Read and verify every chunk under `root`, optionally filtered. Ordered by
/// node, sensor, then chunk index.
pub fn collect_store(root: &Path, node: Option<u8>, sensor: Option<&str>) -> std::io::Result<Vec<CollectedChunk>> {
    let mut out = Vec::new();
    let base = root.join("chunks");
    if !base.exists() {
        return Ok(out);
    }
    let mut node_dirs: Vec<(u8, PathBuf)> = Vec::new();
    for e in std::fs::read_dir(&base)? {
        let e = e?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_prefix("node_").and_then(|s| s.parse::<u8>().ok()) {
            if node.is_none_or(|n| n == id) {
                node_dirs.push((id, e.path()));
            }
        }
    }
    node_dirs.sort();
    for (node_id, dir) in node_dirs {
        let mut sensors: Vec<(String, PathBuf)> = std::fs::read_dir(&dir)?
            .filter_map(Result::ok)
            .filter(|e| e.path().is_dir())
            .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
            .filter(|(s, _)| sensor.is_none_or(|f| f == s))
            .collect();
        sensors.sort();
        for (sensor_id, sdir) in sensors {
            let mut files: Vec<(u32, PathBuf)> = std::fs::read_dir(&sdir)?
                .filter_map(Result::ok)
                .filter_map(|e| {
                    let name = e.file_name().to_string_lossy().into_owned();
                    let idx = name.strip_prefix("chunk_")?.strip_suffix(".swch")?.parse().ok()?;
                    Some((idx, e.path()))
                })
                .collect();
            files.sort();
            for (chunk_index, path) in files {
                let bytes = std::fs::read(&path)?;
                out.push(CollectedChunk {
                    node_id,
                    sensor_id: sensor_id.clone(),
                    chunk_index,
                    result: decode_chunk(&bytes),
                    path,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seq: u64, t: Nanos, size: u32) -> SensorRecord {
        SensorRecord {
            sensor_id: "cam0".into(),
            sequence_index: seq,
            device_time_ns: t,
            payload_digest: seq.wrapping_mul(0x9e37_79b9_7f4a_7c15),
            payload_size_bytes: size,
        }
    }

    #[test]
    fn roundtrip_and_crc() {
        let recs: Vec<_> = (0..5).map(|i| rec(i, i as i64 * 100, 10)).collect();
        let bytes = encode_chunk(3, "cam0", 7, &recs);
        assert_eq!(bytes.len(), 4 + 2 + 1 + 2 + 4 + 4 + 5 * 32 + 4);
        let c = decode_chunk(&bytes).unwrap();
        assert_eq!((c.node_id, c.chunk_index, c.records.clone()), (3, 7, recs));
        assert_eq!(c.checksum, crc32c::crc32c(&bytes[..bytes.len() - 4]));
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(decode_chunk(&b).is_err(), "flip at {i} accepted");
        }
    }

    #[test]
    fn writer_cuts_on_bytes_and_span() {
        let mut w = ChunkWriter::new(1, "cam0", 25, 1_000);
        for i in 0..6 {
            w.push(rec(i, i as i64 * 10, 10));
        }
        // 10+10 fits, a third would exceed 25
        w.close();
        let sizes: Vec<_> = w.take_ready().iter().map(|(_, r)| r.len()).collect();
        assert_eq!(sizes, vec![2, 2, 2]);
        let mut w = ChunkWriter::new(1, "cam0", u64::MAX, 1_000);
        for i in 0..5 {
            w.push(rec(i, i as i64 * 400, 0));
        }
        w.close();
        let sizes: Vec<_> = w.take_ready().iter().map(|(i, r)| (*i, r.len())).collect();
        assert_eq!(sizes, vec![(0, 3), (1, 2)]);
    }

    #[test]
    fn path_layout() {
        assert_eq!(
            chunk_path(Path::new("/s"), 4, "lidar_a", 12),
            PathBuf::from("/s/chunks/node_04/lidar_a/chunk_00012.swch")
        );
    }
}
