//! Simulated sensor fleet.
//!
//! Each sensor is a [`SensorStream`]: a model plus the mutable state needed to
//! number and stamp its output. Streams never share state, so a worker can own
//! and advance its sensors independently.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nmea::{decode_gprmc, GprmcTemplate, NmeaError, PpsPulse};
use crate::seed::digest64;
use crate::time::{div_round_half_even, Nanos};
use crate::timebase::{gaussian, ClockState};
use crate::trigger::{Edge, TriggerEvent};

#[derive(Debug, Error, PartialEq)]
pub enum SensorError {
    #[error("sensor {sensor} listens on channel {expected:?}, got an event from channel {got}")]
    ChannelMismatch { sensor: String, expected: Option<u8>, got: u8 },
    #[error("sensor {sensor} is a {kind:?}, operation needs {needed}")]
    KindMismatch { sensor: String, kind: SensorKind, needed: &'static str },
    #[error("invalid sensor {sensor}: {reason}")]
    Invalid { sensor: String, reason: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum LidarSyncFault {
    #[error("GPRMC decode failed: {0}")]
    Decode(#[from] NmeaError),
    #[error("sentence names second {sentence} but the pulse marks second {pulse}")]
    SecondMismatch { sentence: i64, pulse: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    TriggeredCamera,
    EventCamera,
    Lidar,
    Imu,
    DepthCamera,
    Ultrasound,
}

/// How a sensor's clock is kept on the master timebase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeSource {
    /// Two-way sync relayed through the host node.
    #[default]
    Ptp,
    /// GPRMC+PPS from the Syncboard LiDAR channel.
    Gprmc,
    /// Left free-running.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub sensor_id: String,
    pub kind: SensorKind,
    #[serde(default)]
    pub clock: ClockState,
    #[serde(default)]
    pub trigger_channel: Option<u8>,
    #[serde(default)]
    pub drop_probability: f64,
    #[serde(default)]
    pub report_jitter_sd: f64,
    #[serde(default)]
    pub payload_size_bytes: u32,
    /// Free-running output rate.
    #[serde(default)]
    pub rate_hz: Option<f64>,
    #[serde(default)]
    pub time_source: TimeSource,
}

impl SensorModel {
    pub fn new(sensor_id: impl Into<String>, kind: SensorKind) -> Self {
        Self {
            sensor_id: sensor_id.into(),
            kind,
            clock: ClockState::ideal(),
            trigger_channel: None,
            drop_probability: 0.0,
            report_jitter_sd: 0.0,
            payload_size_bytes: 0,
            rate_hz: None,
            time_source: TimeSource::default(),
        }
    }

    pub fn with_channel(mut self, channel: u8) -> Self {
        self.trigger_channel = Some(channel);
        self
    }

    pub fn with_rate(mut self, rate_hz: f64) -> Self {
        self.rate_hz = Some(rate_hz);
        self
    }

    /// Hardware-triggered sensors that capture a frame per edge.
    pub fn is_frame_triggered(&self) -> bool {
        self.trigger_channel.is_some() && self.kind != SensorKind::EventCamera && self.kind != SensorKind::Ultrasound
    }

    pub fn is_free_running(&self) -> bool {
        self.trigger_channel.is_none() && matches!(self.kind, SensorKind::Lidar | SensorKind::Imu | SensorKind::DepthCamera)
    }

    pub fn validate(&self) -> Result<(), SensorError> {
        let invalid = |reason: String| SensorError::Invalid {
            sensor: self.sensor_id.clone(),
            reason,
        };
        if self.sensor_id.is_empty() || self.sensor_id.contains(['/', '\\']) || self.sensor_id.len() > 255 {
            return Err(invalid("id must be 1..255 characters without path separators".into()));
        }
        self.clock.validate().map_err(|e| invalid(e.to_string()))?;
        if !(0.0..1.0).contains(&self.drop_probability) {
            return Err(invalid(format!("drop probability {} outside [0, 1)", self.drop_probability)));
        }
        if !(self.report_jitter_sd >= 0.0 && self.report_jitter_sd.is_finite()) {
            return Err(invalid(format!("report jitter {} must be >= 0", self.report_jitter_sd)));
        }
        match self.kind {
            SensorKind::TriggeredCamera | SensorKind::EventCamera if self.trigger_channel.is_none() => {
                return Err(invalid(format!("{:?} requires a trigger channel", self.kind)));
            }
            SensorKind::Lidar if self.trigger_channel.is_some() => {
                return Err(invalid("LiDARs free-run and cannot take a trigger channel".into()));
            }
            _ => {}
        }
        if self.is_free_running() {
            match self.rate_hz {
                Some(r) if r > 0.0 && r <= 1e6 => {}
                other => return Err(invalid(format!("free-running sensor needs a rate in (0, 1e6] Hz, got {other:?}"))),
            }
        }
        if self.time_source == TimeSource::Gprmc && self.kind != SensorKind::Lidar {
            return Err(invalid("only LiDARs consume GPRMC+PPS".into()));
        }
        Ok(())
    }
}

/// One timestamped sensor message. Payloads are represented by a digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub sensor_id: String,
    pub sequence_index: u64,
    /// Stamp from the sensor's own clock.
    pub device_time_ns: Nanos,
    pub payload_digest: u64,
    pub payload_size_bytes: u32,
}

impl SensorRecord {
    pub fn device_timestamp(&self) -> f64 {
        self.device_time_ns as f64 / 1e9
    }
}

/// An event-camera 'External Trigger' entry, 1 µs resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtTriggerEvent {
    pub sensor_id: String,
    pub device_timestamp_us: i64,
    pub edge: Edge,
}

/// Event-camera view of a trigger edge: the device time rounded half-to-even to 1 µs.
pub fn perceive_ext_trigger(model: &SensorModel, event: &TriggerEvent) -> Result<ExtTriggerEvent, SensorError> {
    if model.kind != SensorKind::EventCamera {
        return Err(SensorError::KindMismatch {
            sensor: model.sensor_id.clone(),
            kind: model.kind,
            needed: "an event camera",
        });
    }
    let device_ns = model.clock.device_time_ns(event.true_time_ns);
    Ok(ExtTriggerEvent {
        sensor_id: model.sensor_id.clone(),
        device_timestamp_us: div_round_half_even(device_ns as i128, 1000) as i64,
        edge: event.edge,
    })
}

/// A sensor and its emission state.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorStream {
    pub model: SensorModel,
    next_seq: u64,
    last_device_ns: Option<Nanos>,
    /// GPRMC discipline faults seen so far.
    pub sync_faults: u32,
}

impl SensorStream {
    pub fn new(model: SensorModel) -> Self {
        Self {
            model,
            next_seq: 0,
            last_device_ns: None,
            sync_faults: 0,
        }
    }

    pub fn emitted(&self) -> u64 {
        self.next_seq
    }

    fn emit(&mut self, device_ns: Nanos, salt: &[u8]) -> SensorRecord {
        // stamps never run backwards within a stream
        let device_ns = self.last_device_ns.map_or(device_ns, |last| device_ns.max(last));
        self.last_device_ns = Some(device_ns);
        let seq = self.next_seq;
        self.next_seq += 1;
        SensorRecord {
            payload_digest: digest64(&[
                self.model.sensor_id.as_bytes(),
                &seq.to_le_bytes(),
                &device_ns.to_le_bytes(),
                salt,
            ]),
            sensor_id: self.model.sensor_id.clone(),
            sequence_index: seq,
            device_time_ns: device_ns,
            payload_size_bytes: self.model.payload_size_bytes,
        }
    }

    fn stamp<R: Rng + ?Sized>(&self, true_ns: Nanos, rng: &mut R) -> Nanos {
        let c = &self.model.clock;
        let noise = gaussian(rng, c.read_jitter_sd) + gaussian(rng, self.model.report_jitter_sd);
        c.device_time_ns(true_ns) + (noise * 1e9).round() as Nanos
    }

    /// Capture for a trigger edge. Returns `None` when the frame is dropped.
    pub fn fire_triggered<R: Rng + ?Sized>(
        &mut self,
        event: &TriggerEvent,
        rng: &mut R,
    ) -> Result<Option<SensorRecord>, SensorError> {
        if !self.model.is_frame_triggered() {
            return Err(SensorError::KindMismatch {
                sensor: self.model.sensor_id.clone(),
                kind: self.model.kind,
                needed: "a hardware-triggered sensor",
            });
        }
        if self.model.trigger_channel != Some(event.channel_id) {
            return Err(SensorError::ChannelMismatch {
                sensor: self.model.sensor_id.clone(),
                expected: self.model.trigger_channel,
                got: event.channel_id,
            });
        }
        // the drop draw is always taken so one sensor's drops never shift its jitter stream
        let dropped = rng.random::<f64>() < self.model.drop_probability;
        let stamp = self.stamp(event.true_time_ns, rng);
        if dropped {
            return Ok(None);
        }
        Ok(Some(self.emit(stamp, &[])))
    }

    /// Record an event camera's external trigger entry as a stream record.
    pub fn record_ext_trigger(&mut self, event: &TriggerEvent) -> Result<(ExtTriggerEvent, SensorRecord), SensorError> {
        let ext = perceive_ext_trigger(&self.model, event)?;
        let salt = [(ext.edge == Edge::Falling) as u8];
        let rec = self.emit(ext.device_timestamp_us * 1000, &salt);
        Ok((ext, rec))
    }

    /// Record one interleaved ultrasound ping at `true_ns`.
    pub fn ping<R: Rng + ?Sized>(&mut self, true_ns: Nanos, rng: &mut R) -> SensorRecord {
        let stamp = self.stamp(true_ns, rng);
        self.emit(stamp, &[])
    }

    /// Step-set the LiDAR clock from a PPS pulse and its GPRMC sentence.
    /// On failure the clock is left unchanged (holdover) and a fault is counted.
    pub fn discipline_lidar(
        &mut self,
        pps: &PpsPulse,
        sentence: &str,
        template: &GprmcTemplate,
    ) -> Result<(), LidarSyncFault> {
        let result = decode_gprmc(sentence).map_err(LidarSyncFault::from).and_then(|f| {
            let sentence_second = template
                .master_second_of(&f)
                .ok_or(LidarSyncFault::Decode(NmeaError::Malformed {
                    field: "date",
                    value: format!("{:?}", f.date),
                }))?;
            if sentence_second != pps.marks_second {
                return Err(LidarSyncFault::SecondMismatch {
                    sentence: sentence_second,
                    pulse: pps.marks_second,
                });
            }
            Ok(())
        });
        match result {
            Ok(()) => {
                self.model.clock.step_to(pps.true_emit_time(), pps.marks_second as f64);
                Ok(())
            }
            Err(e) => {
                self.sync_faults += 1;
                Err(e)
            }
        }
    }

    /// Free-running output over true time `[from, to)`: one record per device
    /// clock tick `n / rate` whose device time falls in `[device(from), device(to))`.
    pub fn free_run<R: Rng + ?Sized>(&mut self, from: Nanos, to: Nanos, rng: &mut R) -> Vec<SensorRecord> {
        let rate = self.model.rate_hz.expect("validated free-running sensor has a rate");
        let ticks = device_ticks(&self.model.clock, rate, from, to, self.last_device_ns);
        let jitter = self.model.clock.read_jitter_sd;
        ticks
            .into_iter()
            .map(|tick| {
                let stamp = tick + (gaussian(rng, jitter) * 1e9).round() as Nanos;
                self.emit(stamp, &[])
            })
            .collect()
    }
}

/// Device-clock tick times, ns, of a `rate_hz` sensor between true times `from`
/// and `to`, skipping ticks at or before `after`.
pub fn device_ticks(clock: &ClockState, rate_hz: f64, from: Nanos, to: Nanos, after: Option<Nanos>) -> Vec<Nanos> {
    let rate_mhz = (rate_hz * 1000.0).round() as i128;
    let lo = clock.device_time_ns(from);
    let hi = clock.device_time_ns(to);
    let tick = |n: i128| -> Nanos { ((2 * n * 1_000_000_000_000 + rate_mhz).div_euclid(2 * rate_mhz)) as Nanos };
    let mut n = (lo as i128 * rate_mhz).div_euclid(1_000_000_000_000) - 1;
    while tick(n) < lo || after.is_some_and(|a| tick(n) <= a) {
        n += 1;
    }
    let mut out = Vec::new();
    while tick(n) < hi {
        out.push(tick(n));
        n += 1;
    }
    out
}
