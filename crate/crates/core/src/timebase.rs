//! Simulated device clocks and two-way time synchronization.
//!
//! A device clock reads `t + offset + drift_ppm * 1e-6 * t + correction`
//! at true time `t`, plus an optional Gaussian read jitter. The master
//! (Syncboard) clock is the simulation's true time.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_from_seed;
use crate::time::Nanos;

pub const MAX_DRIFT_PPM: f64 = 1000.0;
pub const DEFAULT_SYNC_PERIOD_S: f64 = 1.0;
pub const DEFAULT_SERVO_GAIN: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum TimebaseError {
    #[error("drift {0} ppm outside [-1000, 1000]")]
    Drift(f64),
    #[error("read jitter standard deviation must be finite and >= 0, got {0}")]
    Jitter(f64),
    #[error("clock offset must be finite, got {0}")]
    Offset(f64),
    #[error("inconsistent exchange: {0}")]
    Inconsistent(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockState {
    /// Offset from true time at t = 0, seconds.
    pub epoch_offset: f64,
    pub drift_ppm: f64,
    /// Standard deviation of a single read, seconds.
    pub read_jitter_sd: f64,
    /// Correction applied by discipline, seconds.
    #[serde(default)]
    pub correction: f64,
}

impl Default for ClockState {
    fn default() -> Self {
        Self::ideal()
    }
}

impl ClockState {
    pub fn new(epoch_offset: f64, drift_ppm: f64, read_jitter_sd: f64) -> Result<Self, TimebaseError> {
        let c = Self {
            epoch_offset,
            drift_ppm,
            read_jitter_sd,
            correction: 0.0,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn ideal() -> Self {
        Self {
            epoch_offset: 0.0,
            drift_ppm: 0.0,
            read_jitter_sd: 0.0,
            correction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), TimebaseError> {
        if !self.epoch_offset.is_finite() || !self.correction.is_finite() {
            return Err(TimebaseError::Offset(self.epoch_offset));
        }
        if !self.drift_ppm.is_finite() || self.drift_ppm.abs() > MAX_DRIFT_PPM {
            return Err(TimebaseError::Drift(self.drift_ppm));
        }
        if !self.read_jitter_sd.is_finite() || self.read_jitter_sd < 0.0 {
            return Err(TimebaseError::Jitter(self.read_jitter_sd));
        }
        Ok(())
    }

    /// Clock error (device minus true time) at `true_time`, seconds.
    pub fn error_at(&self, true_time: f64) -> f64 {
        (self.epoch_offset + self.drift_ppm * 1e-6 * true_time) + self.correction
    }

    /// Noise-free device reading at `true_time`.
    pub fn device_time(&self, true_time: f64) -> f64 {
        true_time + self.error_at(true_time)
    }

    /// Noise-free device reading in integer nanoseconds.
    pub fn device_time_ns(&self, true_ns: Nanos) -> Nanos {
        let t = true_ns as f64 / 1e9;
        true_ns + (self.error_at(t) * 1e9).round() as Nanos
    }

    /// True time at which the noise-free device clock reads `device_time`.
    pub fn true_time_of(&self, device_time: f64) -> f64 {
        (device_time - self.epoch_offset - self.correction) / (1.0 + self.drift_ppm * 1e-6)
    }

    /// One device reading including a jitter draw from `rng`.
    pub fn read<R: Rng + ?Sized>(&self, true_time: f64, rng: &mut R) -> f64 {
        self.device_time(true_time) + gaussian(rng, self.read_jitter_sd)
    }

    /// Step the correction so the device reads `target` at `true_time`.
    pub fn step_to(&mut self, true_time: f64, target: f64) {
        self.correction = (target - true_time) - (self.epoch_offset + self.drift_ppm * 1e-6 * true_time);
    }
}

/// Device reading at `true_time` with jitter drawn from a generator seeded by `rng_seed`.
pub fn read_clock(clock: &ClockState, true_time: f64, rng_seed: u64) -> f64 {
    let mut rng = rng_from_seed(rng_seed);
    clock.read(true_time, &mut rng)
}

pub(crate) fn gaussian<R: Rng + ?Sized>(rng: &mut R, sd: f64) -> f64 {
    if sd > 0.0 {
        Normal::new(0.0, sd).expect("finite sd").sample(rng)
    } else {
        0.0
    }
}

/// Timestamps of one two-way exchange. `t1`/`t4` are read on the reference
/// (master) clock, `t2`/`t3` on the clock being synchronized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncExchange {
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub t4: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetDelay {
    /// Synchronized clock minus reference clock, seconds.
    pub offset: f64,
    /// One-way path delay, seconds.
    pub delay: f64,
}

pub fn estimate_offset_delay(x: &SyncExchange) -> Result<OffsetDelay, TimebaseError> {
    if x.t4 < x.t1 {
        return Err(TimebaseError::Inconsistent("t4 < t1"));
    }
    if x.t3 < x.t2 {
        return Err(TimebaseError::Inconsistent("t3 < t2"));
    }
    let offset = ((x.t2 - x.t1) + (x.t3 - x.t4)) / 2.0;
    let delay = ((x.t4 - x.t1) - (x.t3 - x.t2)) / 2.0;
    if delay < 0.0 {
        return Err(TimebaseError::Inconsistent("negative path delay"));
    }
    Ok(OffsetDelay { offset, delay })
}

/// Apply a servo step: `correction -= gain * offset`.
pub fn discipline(clock: &ClockState, offset: f64, gain: f64) -> ClockState {
    ClockState {
        correction: clock.correction - gain * offset,
        ..*clock
    }
}

/// Link between the reference and a synchronized clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkDelay {
    /// Reference to synchronized clock, seconds.
    pub forward_s: f64,
    /// Synchronized clock back to reference, seconds.
    pub backward_s: f64,
    /// Time between request receive and reply send on the far side.
    #[serde(default)]
    pub turnaround_s: f64,
}

impl LinkDelay {
    pub fn symmetric(delay_s: f64) -> Self {
        Self {
            forward_s: delay_s,
            backward_s: delay_s,
            turnaround_s: 0.0,
        }
    }

    /// Offset bias of a two-way exchange over this link.
    pub fn asymmetry_bias(&self) -> f64 {
        (self.forward_s - self.backward_s) / 2.0
    }
}

/// Simulate one exchange starting at `true_start` between `reference` and `clock`.
pub fn simulate_exchange<R: Rng + ?Sized>(
    reference: &ClockState,
    clock: &ClockState,
    link: &LinkDelay,
    true_start: f64,
    rng: &mut R,
) -> SyncExchange {
    let recv = true_start + link.forward_s;
    let reply = recv + link.turnaround_s;
    let back = reply + link.backward_s;
    SyncExchange {
        t1: reference.read(true_start, rng),
        t2: clock.read(recv, rng),
        t3: clock.read(reply, rng),
        t4: reference.read(back, rng),
    }
}

/// Outcome of one sync round on a single clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncRound {
    pub true_time: f64,
    pub measured: OffsetDelay,
}

/// Two-way sync servo with a fixed gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncServo {
    pub gain: f64,
    pub link: LinkDelay,
}

impl SyncServo {
    pub fn new(link: LinkDelay) -> Self {
        Self {
            gain: DEFAULT_SERVO_GAIN,
            link,
        }
    }

    /// Measure at `true_time` and discipline `clock` in place.
    pub fn round<R: Rng + ?Sized>(
        &self,
        reference: &ClockState,
        clock: &mut ClockState,
        true_time: f64,
        rng: &mut R,
    ) -> Result<SyncRound, TimebaseError> {
        let x = simulate_exchange(reference, clock, &self.link, true_time, rng);
        let measured = estimate_offset_delay(&x)?;
        *clock = discipline(clock, measured.offset, self.gain);
        Ok(SyncRound { true_time, measured })
    }
}
