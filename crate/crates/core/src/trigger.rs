//! Syncboard trigger channels and schedule generation.
//!
//! Edges sit on an absolute grid anchored at master time 0: rising edge `k`
//! of a channel is at `offset + k / f`, and its falling edge follows after
//! `duty / f`. All grid arithmetic is exact integer nanoseconds; frequency is
//! held in millihertz and duty ratio in parts per million.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nmea::LidarChannelConfig;
use crate::time::{secs_to_nanos, Nanos, NANOS_PER_SEC};

pub const MAX_CHANNELS: usize = 12;
pub const MAX_FREQUENCY_HZ: f64 = 1000.0;
pub const MAX_SENSOR_CONNECTIONS: usize = 130;
pub const LIDAR_CHANNEL_VACANCIES: usize = 10;
pub const SPEED_OF_SOUND_M_S: f64 = 343.0;
pub const ULTRASOUND_MAX_RANGE_M: f64 = 8.0;
pub const DEFAULT_ULTRASOUND_SLOT_S: f64 = 0.05;

/// 1e12 ns·mHz: one period in ns is `NS_MHZ / frequency_mhz`.
const NS_MHZ: i128 = 1_000_000_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum TriggerError {
    #[error("channel id {0} outside 0..=11")]
    ChannelId(u8),
    #[error("duplicate channel id {0}")]
    DuplicateChannel(u8),
    #[error("too many trigger channels: {0} > 12")]
    TooManyChannels(usize),
    #[error("frequency {0} Hz outside (0, 1000]")]
    Frequency(f64),
    #[error("duty ratio {0} outside (0, 1)")]
    Duty(f64),
    #[error("offset {offset_s} s must be >= 0 and below the period {period_s} s")]
    Offset { offset_s: f64, period_s: f64 },
    #[error("vacancies {0} outside 6..=40")]
    Vacancies(u8),
    #[error("voltage {0} V is not 3.3 or 5.0")]
    Voltage(f64),
    #[error("empty or reversed interval [{0}, {1})")]
    Interval(f64, f64),
    #[error("ultrasound slot {slot_s} s is shorter than the acoustic round trip {round_trip_s} s")]
    SlotTooShort { slot_s: f64, round_trip_s: f64 },
    #[error("ultrasound needs at least one sensor")]
    NoSensors,
    #[error("channel {channel} has {wired} sensors wired but {vacancies} vacancies")]
    ChannelFull { channel: u8, wired: usize, vacancies: u8 },
    #[error("{0} sensor connections exceed the board limit of 130")]
    TooManyConnections(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Rising,
    Falling,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Edge {
    Rising,
    Falling,
}

impl Edge {
    pub fn as_str(&self) -> &'static str {
        match self {
            Edge::Rising => "rising",
            Edge::Falling => "falling",
        }
    }
}

impl std::str::FromStr for Edge {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rising" => Ok(Edge::Rising),
            "falling" => Ok(Edge::Falling),
            other => Err(format!("unknown edge {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerChannelConfig {
    pub channel_id: u8,
    pub frequency_hz: f64,
    pub polarity: Polarity,
    #[serde(default)]
    pub offset_s: f64,
    #[serde(default = "default_duty")]
    pub duty_ratio: f64,
    /// Metadata only.
    #[serde(default = "default_voltage")]
    pub voltage: f64,
    #[serde(default = "default_vacancies")]
    pub vacancies: u8,
}

fn default_duty() -> f64 {
    0.5
}

fn default_voltage() -> f64 {
    5.0
}

fn default_vacancies() -> u8 {
    40
}

impl TriggerChannelConfig {
    pub fn new(channel_id: u8, frequency_hz: f64, polarity: Polarity) -> Self {
        Self {
            channel_id,
            frequency_hz,
            polarity,
            offset_s: 0.0,
            duty_ratio: default_duty(),
            voltage: default_voltage(),
            vacancies: default_vacancies(),
        }
    }

    pub fn validate(&self) -> Result<(), TriggerError> {
        self.grid().map(|_| ())
    }

    pub fn period_s(&self) -> f64 {
        1.0 / self.frequency_hz
    }

    /// Validated integer grid for this channel.
    pub fn grid(&self) -> Result<EdgeGrid, TriggerError> {
        if self.channel_id as usize >= MAX_CHANNELS {
            return Err(TriggerError::ChannelId(self.channel_id));
        }
        if !(self.frequency_hz > 0.0 && self.frequency_hz <= MAX_FREQUENCY_HZ) {
            return Err(TriggerError::Frequency(self.frequency_hz));
        }
        if !(self.duty_ratio > 0.0 && self.duty_ratio < 1.0) {
            return Err(TriggerError::Duty(self.duty_ratio));
        }
        if !(6..=40).contains(&self.vacancies) {
            return Err(TriggerError::Vacancies(self.vacancies));
        }
        if self.voltage != 3.3 && self.voltage != 5.0 {
            return Err(TriggerError::Voltage(self.voltage));
        }
        let frequency_mhz = (self.frequency_hz * 1000.0).round() as i128;
        if frequency_mhz == 0 {
            return Err(TriggerError::Frequency(self.frequency_hz));
        }
        let offset_ns = secs_to_nanos(self.offset_s);
        if !(self.offset_s >= 0.0) || offset_ns as i128 * frequency_mhz >= NS_MHZ {
            return Err(TriggerError::Offset {
                offset_s: self.offset_s,
                period_s: self.period_s(),
            });
        }
        let duty_ppm = (self.duty_ratio * 1e6).round() as i128;
        Ok(EdgeGrid {
            channel_id: self.channel_id,
            frequency_mhz,
            offset_ns,
            high_ns: div_round_half_up(duty_ppm * 1_000_000, frequency_mhz) as Nanos,
            polarity: self.polarity,
        })
    }
}

fn div_round_half_up(num: i128, den: i128) -> i128 {
    (2 * num + den).div_euclid(2 * den)
}

/// Exact integer form of a channel's square wave.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeGrid {
    pub channel_id: u8,
    pub frequency_mhz: i128,
    pub offset_ns: Nanos,
    /// Length of the high phase.
    pub high_ns: Nanos,
    pub polarity: Polarity,
}

impl EdgeGrid {
    pub fn rising_ns(&self, k: i64) -> Nanos {
        self.offset_ns + div_round_half_up(k as i128 * NS_MHZ, self.frequency_mhz) as Nanos
    }

    pub fn falling_ns(&self, k: i64) -> Nanos {
        self.rising_ns(k) + self.high_ns
    }

    /// Smallest k whose rising edge is at or after `t`.
    fn first_rising_at_or_after(&self, t: Nanos) -> i64 {
        let approx = ((t - self.offset_ns) as i128 * self.frequency_mhz).div_euclid(NS_MHZ) as i64;
        let mut k = (approx - 1).max(0);
        while self.rising_ns(k) < t {
            k += 1;
        }
        k
    }

    fn seq(&self, k: i64, edge: Edge) -> u64 {
        match self.polarity {
            Polarity::Both => 2 * k as u64 + (edge == Edge::Falling) as u64,
            _ => k as u64,
        }
    }

    /// All matching edges with time in `[from, to)`, time-ordered.
    pub fn events(&self, from: Nanos, to: Nanos) -> Vec<TriggerEvent> {
        let mut out = Vec::new();
        if to <= from {
            return out;
        }
        let want_rise = self.polarity != Polarity::Falling;
        let want_fall = self.polarity != Polarity::Rising;
        // the falling edge of the cycle before `from` may still be in range
        let mut k = self.first_rising_at_or_after(from - self.high_ns);
        loop {
            let rise = self.rising_ns(k);
            if rise >= to {
                break;
            }
            if want_rise && rise >= from {
                out.push(self.event(rise, Edge::Rising, k));
            }
            let fall = rise + self.high_ns;
            if want_fall && fall >= from && fall < to {
                out.push(self.event(fall, Edge::Falling, k));
            }
            k += 1;
        }
        out
    }

    fn event(&self, t: Nanos, edge: Edge, k: i64) -> TriggerEvent {
        TriggerEvent {
            channel_id: self.channel_id,
            true_time_ns: t,
            edge,
            sequence_index: self.seq(k, edge),
        }
    }
}

/// One generated edge on a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TriggerEvent {
    pub channel_id: u8,
    pub true_time_ns: Nanos,
    pub edge: Edge,
    /// Dense edge ordinal on the channel's absolute grid.
    pub sequence_index: u64,
}

impl TriggerEvent {
    pub fn true_time(&self) -> f64 {
        self.true_time_ns as f64 / 1e9
    }
}

/// Edges of `cfg` with time in `[t_start, t_end)` seconds.
pub fn generate_schedule(
    cfg: &TriggerChannelConfig,
    t_start: f64,
    t_end: f64,
) -> Result<Vec<TriggerEvent>, TriggerError> {
    if !(t_end > t_start && t_start >= 0.0) {
        return Err(TriggerError::Interval(t_start, t_end));
    }
    Ok(cfg.grid()?.events(secs_to_nanos(t_start), secs_to_nanos(t_end)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExternalMaster {
    Gnss,
    Ntp,
    #[default]
    Freerun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoardCommand {
    Start,
    Stop,
}

/// The Syncboard: trigger channels, the LiDAR channel, and the run switch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncboardState {
    pub channels: Vec<TriggerChannelConfig>,
    pub lidar_channel: LidarChannelConfig,
    pub running: bool,
    #[serde(default)]
    pub external_master: ExternalMaster,
    /// Closed running intervals `[start, stop)`.
    #[serde(default)]
    pub segments: Vec<(Nanos, Nanos)>,
    #[serde(default)]
    pub running_since: Option<Nanos>,
}

impl SyncboardState {
    pub fn new(channels: Vec<TriggerChannelConfig>, lidar_channel: LidarChannelConfig) -> Result<Self, TriggerError> {
        let board = Self {
            channels,
            lidar_channel,
            running: false,
            external_master: ExternalMaster::default(),
            segments: Vec::new(),
            running_since: None,
        };
        board.validate()?;
        Ok(board)
    }

    pub fn validate(&self) -> Result<(), TriggerError> {
        if self.channels.len() > MAX_CHANNELS {
            return Err(TriggerError::TooManyChannels(self.channels.len()));
        }
        let mut seen = [false; MAX_CHANNELS];
        for c in &self.channels {
            c.validate()?;
            if std::mem::replace(&mut seen[c.channel_id as usize], true) {
                return Err(TriggerError::DuplicateChannel(c.channel_id));
            }
        }
        Ok(())
    }

    /// Check the per-channel wiring counts against vacancies and the board limit.
    /// `wired` maps channel id to sensor count; `lidars` counts GPRMC LiDARs.
    pub fn check_wiring(&self, wired: &[(u8, usize)], lidars: usize) -> Result<(), TriggerError> {
        let mut total = 0;
        for &(id, n) in wired {
            let ch = self
                .channel(id)
                .ok_or(TriggerError::ChannelId(id))?;
            if n > ch.vacancies as usize {
                return Err(TriggerError::ChannelFull {
                    channel: id,
                    wired: n,
                    vacancies: ch.vacancies,
                });
            }
            total += n;
        }
        if lidars > LIDAR_CHANNEL_VACANCIES {
            return Err(TriggerError::ChannelFull {
                channel: 12,
                wired: lidars,
                vacancies: LIDAR_CHANNEL_VACANCIES as u8,
            });
        }
        total += lidars;
        if total > MAX_SENSOR_CONNECTIONS {
            return Err(TriggerError::TooManyConnections(total));
        }
        Ok(())
    }

    pub fn channel(&self, id: u8) -> Option<&TriggerChannelConfig> {
        self.channels.iter().find(|c| c.channel_id == id)
    }

    /// Apply a start/stop command at master time `at`. Idempotent.
    pub fn apply(mut self, command: BoardCommand, at: Nanos) -> Self {
        match (command, self.running_since) {
            (BoardCommand::Start, None) => {
                self.running = true;
                self.running_since = Some(at);
            }
            (BoardCommand::Stop, Some(since)) => {
                self.running = false;
                self.running_since = None;
                if at > since {
                    self.segments.push((since, at));
                }
            }
            _ => {}
        }
        self
    }

    /// Events emitted on `channel_id` within `[from, to)` while the board was running.
    pub fn channel_events(&self, channel_id: u8, from: Nanos, to: Nanos) -> Result<Vec<TriggerEvent>, TriggerError> {
        let grid = self
            .channel(channel_id)
            .ok_or(TriggerError::ChannelId(channel_id))?
            .grid()?;
        let mut out = Vec::new();
        for (a, b) in self.running_intervals(to) {
            let (lo, hi) = (a.max(from), b.min(to));
            if lo < hi {
                out.extend(grid.events(lo, hi));
            }
        }
        Ok(out)
    }

    /// Events on all channels within `[from, to)`, ordered by time then channel.
    pub fn schedule(&self, from: Nanos, to: Nanos) -> Result<Vec<TriggerEvent>, TriggerError> {
        let mut out = Vec::new();
        for c in &self.channels {
            out.extend(self.channel_events(c.channel_id, from, to)?);
        }
        out.sort_by_key(|e| (e.true_time_ns, e.channel_id, e.sequence_index));
        Ok(out)
    }

    fn running_intervals(&self, until: Nanos) -> Vec<(Nanos, Nanos)> {
        let mut v = self.segments.clone();
        if let Some(since) = self.running_since {
            v.push((since, until.max(since)));
        }
        v
    }
}

/// Round trip of a pulse to `range_m` and back.
pub fn acoustic_round_trip_s(range_m: f64) -> f64 {
    2.0 * range_m / SPEED_OF_SOUND_M_S
}

/// Interleaved firing plan for `n_sensors` ultrasound rangers sharing one bus.
/// `channel_id` of each event is the sensor's slot index on the bus.
pub fn ultrasound_schedule(
    n_sensors: usize,
    slot_s: f64,
    t_start: f64,
    t_end: f64,
    max_range_m: f64,
) -> Result<Vec<TriggerEvent>, TriggerError> {
    if n_sensors == 0 {
        return Err(TriggerError::NoSensors);
    }
    let round_trip_s = acoustic_round_trip_s(max_range_m);
    if !(slot_s >= round_trip_s) {
        return Err(TriggerError::SlotTooShort { slot_s, round_trip_s });
    }
    if !(t_end > t_start && t_start >= 0.0) {
        return Err(TriggerError::Interval(t_start, t_end));
    }
    let slot_ns = secs_to_nanos(slot_s);
    let start = secs_to_nanos(t_start);
    let end = secs_to_nanos(t_end);
    Ok((0..)
        .map(|j: i64| (j, start + j * slot_ns))
        .take_while(|&(_, t)| t < end)
        .map(|(j, t)| TriggerEvent {
            channel_id: (j as usize % n_sensors) as u8,
            true_time_ns: t,
            edge: Edge::Rising,
            sequence_index: j as u64,
        })
        .collect())
}

/// Whole-second boundaries in `[from, to)` at which PPS pulses are emitted.
pub fn pps_seconds(from: Nanos, to: Nanos) -> impl Iterator<Item = i64> {
    let first = from.div_euclid(NANOS_PER_SEC) + i64::from(from.rem_euclid(NANOS_PER_SEC) != 0);
    (first..).take_while(move |s| s * NANOS_PER_SEC < to)
}
