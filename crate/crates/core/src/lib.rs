//! Software backbone of a multi-sensor mapping robot, simulated end to end.
//!
//! The crate models the synchronization board (trigger channels, GPRMC+PPS),
//! simulated device clocks and two-way time sync, the sensor fleet, the
//! master/worker recording cluster, dataset post-processing, and the
//! interference statistics used to evaluate LiDARs and depth cameras.

pub mod analysis;
pub mod cluster;
pub mod config;
pub mod nmea;
pub mod postproc;
pub mod report;
pub mod seed;
pub mod sensors;
pub mod time;
pub mod timebase;
pub mod trigger;

pub use config::RunConfig;
pub use time::Nanos;
