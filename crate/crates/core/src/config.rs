//! Run configuration: Syncboard channels, sensor fleet, node layout and
//! simulation parameters, loaded from TOML and checked with located
//! diagnostics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nmea::{GprmcTemplate, LidarChannelConfig};
use crate::sensors::{SensorKind, SensorModel, TimeSource};
use crate::timebase::{ClockState, LinkDelay};
use crate::trigger::{acoustic_round_trip_s, SyncboardState, TriggerChannelConfig, DEFAULT_ULTRASOUND_SLOT_S, ULTRASOUND_MAX_RANGE_M};

pub const MAX_NODES: usize = 16;
pub const MAX_USB_SENSORS: usize = 3;
pub const MAX_ETHERNET_SENSORS: usize = 1;
pub const DEFAULT_CHUNK_MAX_BYTES: u64 = 64 * 1024 * 1024;
pub const DEFAULT_CHUNK_MAX_SPAN_S: f64 = 10.0;
pub const DEFAULT_STORAGE_BYTES: u64 = 2 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    /// Dotted path into the config, or `line L, column C` for syntax errors.
    pub location: String,
    pub message: String,
}

impl Diagnostic {
    fn error(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Error,
            location: location.into(),
            message: message.into(),
        }
    }

    fn warning(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Warning,
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev}: {}: {}", self.location, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Master,
    Worker,
}

/// Host connection class of a sensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkClass {
    Usb,
    Ethernet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncboardConfig {
    pub channels: Vec<TriggerChannelConfig>,
    #[serde(default)]
    pub lidar_channel: LidarChannelConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UltrasoundConfig {
    #[serde(default = "default_slot")]
    pub slot_s: f64,
    #[serde(default = "default_range")]
    pub max_range_m: f64,
}

fn default_slot() -> f64 {
    DEFAULT_ULTRASOUND_SLOT_S
}
fn default_range() -> f64 {
    ULTRASOUND_MAX_RANGE_M
}

impl Default for UltrasoundConfig {
    fn default() -> Self {
        Self {
            slot_s: default_slot(),
            max_range_m: default_range(),
        }
    }
}

/// Clock verification and resync parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyncConfig {
    /// Largest clock error accepted at verification, seconds.
    pub bound_s: f64,
    pub max_rounds: u32,
    pub period_s: f64,
    pub gain: f64,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            bound_s: 1e-3,
            max_rounds: 10,
            period_s: crate::timebase::DEFAULT_SYNC_PERIOD_S,
            gain: crate::timebase::DEFAULT_SERVO_GAIN,
        }
    }
}

/// Transport and storage parameters of the cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    /// One-way control message latency, seconds.
    pub message_latency_s: f64,
    pub hello_timeout_s: f64,
    /// Gap between stopping the Syncboard and dispatching STOP_REC.
    pub stop_guard_s: f64,
    pub chunk_max_bytes: u64,
    pub chunk_max_span_s: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            message_latency_s: 0.0005,
            hello_timeout_s: 5.0,
            stop_guard_s: 0.001,
            chunk_max_bytes: DEFAULT_CHUNK_MAX_BYTES,
            chunk_max_span_s: DEFAULT_CHUNK_MAX_SPAN_S,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub node_id: u8,
    pub role: NodeRole,
    #[serde(default)]
    pub clock: ClockState,
    #[serde(default = "default_storage")]
    pub storage_capacity_bytes: u64,
    /// Network path to the master used for clock sync.
    #[serde(default = "default_link")]
    pub link: LinkDelay,
    /// Time from power-on to HELLO, seconds.
    #[serde(default)]
    pub boot_delay_s: f64,
    /// Inject a chunk flush failure at stop.
    #[serde(default)]
    pub fail_flush: bool,
}

fn default_storage() -> u64 {
    DEFAULT_STORAGE_BYTES
}
fn default_link() -> LinkDelay {
    LinkDelay::symmetric(0.001)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub sensor_id: String,
    pub kind: SensorKind,
    pub node: u8,
    /// Defaults to ethernet for LiDARs, USB otherwise.
    #[serde(default)]
    pub link: Option<LinkClass>,
    #[serde(default)]
    pub trigger_channel: Option<u8>,
    #[serde(default)]
    pub drop_probability: f64,
    #[serde(default)]
    pub report_jitter_sd: f64,
    #[serde(default)]
    pub payload_size_bytes: u32,
    #[serde(default)]
    pub rate_hz: Option<f64>,
    #[serde(default)]
    pub time_source: Option<TimeSource>,
    #[serde(default)]
    pub clock: ClockState,
}

impl SensorConfig {
    pub fn link_class(&self) -> LinkClass {
        self.link.unwrap_or(match self.kind {
            SensorKind::Lidar => LinkClass::Ethernet,
            _ => LinkClass::Usb,
        })
    }

    pub fn time_source(&self) -> TimeSource {
        self.time_source.unwrap_or(match self.kind {
            SensorKind::Lidar => TimeSource::Gprmc,
            _ => TimeSource::Ptp,
        })
    }

    pub fn model(&self) -> SensorModel {
        SensorModel {
            sensor_id: self.sensor_id.clone(),
            kind: self.kind,
            clock: self.clock,
            trigger_channel: self.trigger_channel,
            drop_probability: self.drop_probability,
            report_jitter_sd: self.report_jitter_sd,
            payload_size_bytes: self.payload_size_bytes,
            rate_hz: self.rate_hz,
            time_source: self.time_source(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    pub syncboard: SyncboardConfig,
    #[serde(default)]
    pub gprmc: GprmcTemplate,
    #[serde(default)]
    pub ultrasound: UltrasoundConfig,
    #[serde(default)]
    pub sync: SyncConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    pub nodes: Vec<NodeConfig>,
    #[serde(default)]
    pub sensors: Vec<SensorConfig>,
}

fn default_duration() -> f64 {
    10.0
}
fn default_output_dir() -> String {
    "out".into()
}

impl RunConfig {
    /// Parse TOML; syntax and schema errors come back as located diagnostics.
    pub fn from_toml_str(text: &str) -> Result<Self, Diagnostic> {
        toml::from_str(text).map_err(|e| {
            let location = match e.span() {
                Some(span) => {
                    let before = &text[..span.start.min(text.len())];
                    let line = before.matches('\n').count() + 1;
                    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                    format!("line {line}, column {col}")
                }
                None => "config".into(),
            };
            Diagnostic::error(location, e.message().to_string())
        })
    }

    /// Read, parse and validate. The config is returned only if no error was found.
    pub fn load(path: &Path) -> (Option<Self>, Vec<Diagnostic>) {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return (None, vec![Diagnostic::error(path.display().to_string(), e.to_string())]),
        };
        match Self::from_toml_str(&text) {
            Ok(cfg) => {
                let diags = cfg.validate();
                let ok = !diags.iter().any(Diagnostic::is_error);
                (ok.then_some(cfg), diags)
            }
            Err(d) => (None, vec![d]),
        }
    }

    /// Canonical byte serialization distributed to workers.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("config serializes")
    }

    pub fn from_canonical_bytes(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    pub fn syncboard_state(&self) -> Result<SyncboardState, crate::trigger::TriggerError> {
        SyncboardState::new(self.syncboard.channels.clone(), self.syncboard.lidar_channel)
    }

    pub fn node(&self, node_id: u8) -> Option<&NodeConfig> {
        self.nodes.iter().find(|n| n.node_id == node_id)
    }

    pub fn master(&self) -> Option<&NodeConfig> {
        self.nodes.iter().find(|n| n.role == NodeRole::Master)
    }

    pub fn sensors_on(&self, node_id: u8) -> impl Iterator<Item = &SensorConfig> {
        self.sensors.iter().filter(move |s| s.node == node_id)
    }

    /// Ultrasound sensors in bus slot order.
    pub fn ultrasound_slots(&self) -> Vec<&str> {
        self.sensors
            .iter()
            .filter(|s| s.kind == SensorKind::Ultrasound)
            .map(|s| s.sensor_id.as_str())
            .collect()
    }

    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut d = Vec::new();
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            d.push(Diagnostic::error("duration_s", format!("{} must be >= 0", self.duration_s)));
        }
        self.validate_syncboard(&mut d);
        self.validate_nodes(&mut d);
        self.validate_sensors(&mut d);
        if let Err(e) = self.gprmc.fields_for(0).and_then(|f| f.validate()) {
            d.push(Diagnostic::error("gprmc", e.to_string()));
        }
        let s = &self.sync;
        if !(s.bound_s > 0.0) || s.max_rounds == 0 || !(s.period_s > 0.0) || !(s.gain > 0.0 && s.gain <= 1.0) {
            d.push(Diagnostic::error(
                "sync",
                "bound and period must be > 0, max_rounds >= 1, gain in (0, 1]",
            ));
        }
        let c = &self.cluster;
        if !(c.message_latency_s >= 0.0) || !(c.hello_timeout_s > 0.0) || !(c.stop_guard_s > 0.0) {
            d.push(Diagnostic::error("cluster", "latency must be >= 0, timeout and stop guard > 0"));
        }
        if c.chunk_max_bytes == 0 || !(c.chunk_max_span_s > 0.0) {
            d.push(Diagnostic::error("cluster", "chunk limits must be > 0"));
        }
        d
    }

    fn validate_syncboard(&self, d: &mut Vec<Diagnostic>) {
        let mut seen = BTreeSet::new();
        for (i, ch) in self.syncboard.channels.iter().enumerate() {
            let loc = format!("syncboard.channels[{i}]");
            if let Err(e) = ch.validate() {
                d.push(Diagnostic::error(&loc, e.to_string()));
            }
            if !seen.insert(ch.channel_id) {
                d.push(Diagnostic::error(&loc, format!("duplicate channel id {}", ch.channel_id)));
            }
        }
        if self.syncboard.channels.len() > crate::trigger::MAX_CHANNELS {
            d.push(Diagnostic::error(
                "syncboard.channels",
                format!("{} channels, the board has {}", self.syncboard.channels.len(), crate::trigger::MAX_CHANNELS),
            ));
        }
        if let Err(e) = self.syncboard.lidar_channel.validate() {
            d.push(Diagnostic::error("syncboard.lidar_channel", e.to_string()));
        }
    }

    fn validate_nodes(&self, d: &mut Vec<Diagnostic>) {
        if self.nodes.len() > MAX_NODES {
            d.push(Diagnostic::error(
                "nodes",
                format!("{} nodes, the cluster has at most {MAX_NODES}", self.nodes.len()),
            ));
        }
        let masters = self.nodes.iter().filter(|n| n.role == NodeRole::Master).count();
        if masters != 1 {
            d.push(Diagnostic::error("nodes", format!("exactly one master required, found {masters}")));
        }
        let mut seen = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let loc = format!("nodes[{i}]");
            if n.node_id as usize >= MAX_NODES {
                d.push(Diagnostic::error(format!("{loc}.node_id"), format!("{} outside 0..=15", n.node_id)));
            }
            if !seen.insert(n.node_id) {
                d.push(Diagnostic::error(format!("{loc}.node_id"), format!("duplicate node id {}", n.node_id)));
            }
            if let Err(e) = n.clock.validate() {
                d.push(Diagnostic::error(format!("{loc}.clock"), e.to_string()));
            }
            let l = &n.link;
            if !(l.forward_s >= 0.0 && l.backward_s >= 0.0 && l.turnaround_s >= 0.0) {
                d.push(Diagnostic::error(format!("{loc}.link"), "delays must be >= 0"));
            }
            if !(n.boot_delay_s >= 0.0 && n.boot_delay_s.is_finite()) {
                d.push(Diagnostic::error(format!("{loc}.boot_delay_s"), "must be >= 0"));
            }
        }
    }

    fn validate_sensors(&self, d: &mut Vec<Diagnostic>) {
        let channels: BTreeSet<u8> = self.syncboard.channels.iter().map(|c| c.channel_id).collect();
        let nodes: BTreeSet<u8> = self.nodes.iter().map(|n| n.node_id).collect();
        let mut ids = BTreeSet::new();
        let mut wired: BTreeMap<u8, usize> = BTreeMap::new();
        let mut lidars = 0;
        for (i, s) in self.sensors.iter().enumerate() {
            let loc = format!("sensors[{i}] ({})", s.sensor_id);
            if !ids.insert(s.sensor_id.as_str()) {
                d.push(Diagnostic::error(format!("{loc}.sensor_id"), "duplicate sensor id"));
            }
            if !nodes.contains(&s.node) {
                d.push(Diagnostic::error(format!("{loc}.node"), format!("unknown node {}", s.node)));
            } else if self.node(s.node).is_some_and(|n| n.role == NodeRole::Master) {
                d.push(Diagnostic::error(format!("{loc}.node"), "the master node hosts no sensors"));
            }
            if let Some(ch) = s.trigger_channel {
                if !channels.contains(&ch) {
                    d.push(Diagnostic::error(format!("{loc}.trigger_channel"), format!("unknown channel {ch}")));
                }
                *wired.entry(ch).or_default() += 1;
            }
            if s.kind == SensorKind::Ultrasound && s.trigger_channel.is_some() {
                d.push(Diagnostic::error(
                    format!("{loc}.trigger_channel"),
                    "ultrasound sensors fire from the interleaving bus, not a trigger channel",
                ));
            }
            if s.time_source() == TimeSource::Gprmc {
                lidars += 1;
            }
            if let Err(e) = s.model().validate() {
                d.push(Diagnostic::error(&loc, e.to_string()));
            }
            if s.kind == SensorKind::Lidar && s.link_class() == LinkClass::Usb {
                d.push(Diagnostic::warning(format!("{loc}.link"), "LiDAR on a USB link"));
            }
        }
        for (ch, n) in &wired {
            if let Some(c) = self.syncboard.channels.iter().find(|c| c.channel_id == *ch) {
                if *n > c.vacancies as usize {
                    d.push(Diagnostic::error(
                        format!("syncboard.channels (channel {ch})"),
                        format!("{n} sensors wired, {} vacancies", c.vacancies),
                    ));
                }
            }
        }
        if let Ok(board) = self.syncboard_state() {
            let w: Vec<(u8, usize)> = wired.iter().filter(|(c, _)| channels.contains(c)).map(|(c, n)| (*c, *n)).collect();
            if let Err(e @ crate::trigger::TriggerError::TooManyConnections(_)) = board.check_wiring(&w, lidars) {
                d.push(Diagnostic::error("sensors", e.to_string()));
            } else if lidars > crate::trigger::LIDAR_CHANNEL_VACANCIES {
                d.push(Diagnostic::error(
                    "syncboard.lidar_channel",
                    format!("{lidars} LiDARs exceed {} vacancies", crate::trigger::LIDAR_CHANNEL_VACANCIES),
                ));
            }
        }
        for c in &self.syncboard.channels {
            if !wired.contains_key(&c.channel_id) {
                d.push(Diagnostic::warning(
                    format!("syncboard.channels (channel {})", c.channel_id),
                    "no sensor is wired to this channel",
                ));
            }
        }
        for n in &self.nodes {
            if let Some(msg) = self.node_limit_violation(n.node_id) {
                d.push(Diagnostic::error(format!("nodes (node {})", n.node_id), msg));
            }
        }
        if !self.ultrasound_slots().is_empty() {
            let u = &self.ultrasound;
            let rt = acoustic_round_trip_s(u.max_range_m);
            if !(u.slot_s >= rt) || !(u.max_range_m > 0.0) {
                d.push(Diagnostic::error(
                    "ultrasound.slot_s",
                    format!("slot {} s is shorter than the {rt:.4} s round trip", u.slot_s),
                ));
            }
        }
    }

    /// Host limit check: at most 3 USB and 1 ethernet sensor per node; all
    /// ultrasound rangers on a node share one USB microcontroller.
    pub fn node_limit_violation(&self, node_id: u8) -> Option<String> {
        let mut usb = 0;
        let mut eth = 0;
        let mut ultrasound = false;
        for s in self.sensors_on(node_id) {
            match (s.kind, s.link_class()) {
                (SensorKind::Ultrasound, LinkClass::Usb) => ultrasound = true,
                (_, LinkClass::Usb) => usb += 1,
                (_, LinkClass::Ethernet) => eth += 1,
            }
        }
        usb += ultrasound as usize;
        (usb > MAX_USB_SENSORS || eth > MAX_ETHERNET_SENSORS)
            .then(|| format!("{usb} USB and {eth} ethernet sensors exceed the {MAX_USB_SENSORS}+{MAX_ETHERNET_SENSORS} host limit"))
    }
}
