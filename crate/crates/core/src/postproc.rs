//! Dataset post-processing: trigger timestamp restoration and Bayer
//! interleaving/demosaicing of multi-plane camera captures.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sensors::SensorRecord;
use crate::time::{secs_to_nanos, Nanos};
use crate::trigger::TriggerEvent;

/// Default matching tolerance as a fraction of the trigger period.
pub const DEFAULT_TOLERANCE_FRACTION: f64 = 0.4;

#[derive(Debug, Error, PartialEq)]
pub enum PostprocError {
    #[error("tolerance {tolerance_s} s is not below half the minimum trigger period {min_period_s} s")]
    AmbiguousTolerance { tolerance_s: f64, min_period_s: f64 },
    #[error("{0} stream is not time-sorted")]
    Unsorted(&'static str),
    #[error("plane dimensions differ: {0}")]
    DimensionMismatch(String),
    #[error("mosaic dimensions {0}x{1} must be even and nonzero")]
    OddMosaic(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationReport {
    pub sensor_id: String,
    pub total_triggers: usize,
    pub matched: usize,
    /// Sequence indices of triggers that no record answered.
    pub dropped_trigger_indices: Vec<u64>,
    /// Largest |record - trigger| among matches after bias removal.
    pub max_match_residual_s: f64,
    /// Records that matched no trigger.
    pub unmatched_records: usize,
    /// Mean record-minus-trigger offset removed before matching.
    pub bias_s: f64,
}

/// Default tolerance for a trigger list: 40% of its smallest spacing.
pub fn default_tolerance_s(triggers: &[TriggerEvent]) -> Option<f64> {
    min_spacing_ns(triggers).map(|p| DEFAULT_TOLERANCE_FRACTION * p as f64 / 1e9)
}

fn min_spacing_ns(triggers: &[TriggerEvent]) -> Option<Nanos> {
    triggers.windows(2).map(|w| w[1].true_time_ns - w[0].true_time_ns).min()
}

/// Replace record stamps with the trigger times they answer.
///
/// The per-sensor mean offset to the nearest trigger is removed first, then
/// records and triggers are paired in one monotone pass: a record matches the
/// next unconsumed trigger within `tolerance_s`, triggers passed over are drops.
pub fn restore_timestamps(
    records: &[SensorRecord],
    triggers: &[TriggerEvent],
    tolerance_s: f64,
) -> Result<(Vec<SensorRecord>, RestorationReport), PostprocError> {
    if records.windows(2).any(|w| w[1].device_time_ns < w[0].device_time_ns) {
        return Err(PostprocError::Unsorted("record"));
    }
    if triggers.windows(2).any(|w| w[1].true_time_ns < w[0].true_time_ns) {
        return Err(PostprocError::Unsorted("trigger"));
    }
    if let Some(p) = min_spacing_ns(triggers) {
        let min_period_s = p as f64 / 1e9;
        if tolerance_s >= min_period_s / 2.0 {
            return Err(PostprocError::AmbiguousTolerance { tolerance_s, min_period_s });
        }
    }
    let sensor_id = records.first().map(|r| r.sensor_id.clone()).unwrap_or_default();
    let bias = nearest_residual_mean(records, triggers);
    let tol = secs_to_nanos(tolerance_s);

    let mut restored = records.to_vec();
    let mut dropped = Vec::new();
    let mut matched = 0;
    let mut unmatched = 0;
    let mut max_residual: Nanos = 0;
    let mut j = 0;
    for rec in restored.iter_mut() {
        let t = rec.device_time_ns - bias;
        while j < triggers.len() && triggers[j].true_time_ns < t - tol {
            dropped.push(triggers[j].sequence_index);
            j += 1;
        }
        if j < triggers.len() && (triggers[j].true_time_ns - t).abs() <= tol {
            max_residual = max_residual.max((triggers[j].true_time_ns - t).abs());
            rec.device_time_ns = triggers[j].true_time_ns;
            matched += 1;
            j += 1;
        } else {
            unmatched += 1;
        }
    }
    dropped.extend(triggers[j..].iter().map(|t| t.sequence_index));

    let report = RestorationReport {
        sensor_id,
        total_triggers: triggers.len(),
        matched,
        dropped_trigger_indices: dropped,
        max_match_residual_s: max_residual as f64 / 1e9,
        unmatched_records: unmatched,
        bias_s: bias as f64 / 1e9,
    };
    Ok((restored, report))
}

fn nearest_residual_mean(records: &[SensorRecord], triggers: &[TriggerEvent]) -> Nanos {
    if records.is_empty() || triggers.is_empty() {
        return 0;
    }
    let mut j = 0;
    let mut sum: i128 = 0;
    for r in records {
        let t = r.device_time_ns;
        while j + 1 < triggers.len() && triggers[j + 1].true_time_ns <= t {
            j += 1;
        }
        let mut best = t - triggers[j].true_time_ns;
        if j + 1 < triggers.len() {
            let alt = t - triggers[j + 1].true_time_ns;
            if alt.abs() < best.abs() {
                best = alt;
            }
        }
        sum += best as i128;
    }
    (sum / records.len() as i128) as Nanos
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BayerPattern {
    #[serde(rename = "RGGB")]
    Rggb,
    #[serde(rename = "BGGR")]
    Bggr,
    #[serde(rename = "GRBG")]
    Grbg,
    #[serde(rename = "GBRG")]
    Gbrg,
}

/// Which of the four Bayer planes a mosaic site belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BayerSite {
    R,
    Gr,
    Gb,
    B,
}

impl BayerSite {
    /// Output channel in BGR order.
    fn bgr_index(self) -> usize {
        match self {
            BayerSite::B => 0,
            BayerSite::Gr | BayerSite::Gb => 1,
            BayerSite::R => 2,
        }
    }
}

impl BayerPattern {
    /// 2x2 tile, row-major.
    pub fn tile(self) -> [[BayerSite; 2]; 2] {
        use BayerSite::*;
        match self {
            BayerPattern::Rggb => [[R, Gr], [Gb, B]],
            BayerPattern::Bggr => [[B, Gb], [Gr, R]],
            BayerPattern::Grbg => [[Gr, R], [B, Gb]],
            BayerPattern::Gbrg => [[Gb, B], [R, Gr]],
        }
    }

    pub fn site(self, row: usize, col: usize) -> BayerSite {
        self.tile()[row % 2][col % 2]
    }
}

impl std::str::FromStr for BayerPattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "RGGB" => Ok(Self::Rggb),
            "BGGR" => Ok(Self::Bggr),
            "GRBG" => Ok(Self::Grbg),
            "GBRG" => Ok(Self::Gbrg),
            other => Err(format!("unknown Bayer pattern {other:?}")),
        }
    }
}

/// Row-major 8-bit grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Grid {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height, "grid data length");
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, v: u8) -> Self {
        Self::new(width, height, vec![v; width * height])
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BayerPlanes {
    pub r: Grid,
    pub gr: Grid,
    pub gb: Grid,
    pub b: Grid,
    pub pattern: BayerPattern,
}

impl BayerPlanes {
    fn plane(&self, site: BayerSite) -> &Grid {
        match site {
            BayerSite::R => &self.r,
            BayerSite::Gr => &self.gr,
            BayerSite::Gb => &self.gb,
            BayerSite::B => &self.b,
        }
    }
}

/// Lay the four planes out as a 2H x 2W mosaic in the target pattern.
pub fn interleave_bayer(planes: &BayerPlanes) -> Result<Grid, PostprocError> {
    let (w, h) = (planes.r.width, planes.r.height);
    for p in [&planes.gr, &planes.gb, &planes.b] {
        if (p.width, p.height) != (w, h) {
            return Err(PostprocError::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                p.width, p.height, w, h
            )));
        }
    }
    let tile = planes.pattern.tile();
    let mut out = vec![0u8; 4 * w * h];
    for y in 0..h {
        for x in 0..w {
            for (dy, row) in tile.iter().enumerate() {
                for (dx, site) in row.iter().enumerate() {
                    out[(2 * y + dy) * 2 * w + 2 * x + dx] = planes.plane(*site).get(y, x);
                }
            }
        }
    }
    Ok(Grid::new(2 * w, 2 * h, out))
}

/// Split a mosaic back into its four planes.
pub fn deinterleave_bayer(mosaic: &Grid, pattern: BayerPattern) -> Result<BayerPlanes, PostprocError> {
    check_even(mosaic)?;
    let (w, h) = (mosaic.width / 2, mosaic.height / 2);
    let mut planes = [vec![0u8; w * h], vec![0u8; w * h], vec![0u8; w * h], vec![0u8; w * h]];
    for y in 0..mosaic.height {
        for x in 0..mosaic.width {
            let idx = match pattern.site(y, x) {
                BayerSite::R => 0,
                BayerSite::Gr => 1,
                BayerSite::Gb => 2,
                BayerSite::B => 3,
            };
            planes[idx][(y / 2) * w + x / 2] = mosaic.get(y, x);
        }
    }
    let [r, gr, gb, b] = planes;
    Ok(BayerPlanes {
        r: Grid::new(w, h, r),
        gr: Grid::new(w, h, gr),
        gb: Grid::new(w, h, gb),
        b: Grid::new(w, h, b),
        pattern,
    })
}

fn check_even(m: &Grid) -> Result<(), PostprocError> {
    if m.width == 0 || m.height == 0 || m.width % 2 != 0 || m.height % 2 != 0 {
        return Err(PostprocError::OddMosaic(m.width, m.height));
    }
    Ok(())
}

/// Interleaved 8-bit BGR image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BgrImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BgrImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Reflect an out-of-range neighbor index back inside, keeping CFA parity.
fn reflect(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * (n - 1) - i as usize
    } else {
        i as usize
    }
}

/// Bilinear demosaic to BGR. A missing channel is the mean of the 3x3
/// neighbors carrying it; neighbors past the border are mirrored so the
/// nearest same-color sample is replicated.
pub fn demosaic_bilinear(mosaic: &Grid, pattern: BayerPattern) -> Result<BgrImage, PostprocError> {
    check_even(mosaic)?;
    let (w, h) = (mosaic.width, mosaic.height);
    let mut out = vec![0u8; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let own = pattern.site(y, x).bgr_index();
            let mut sum = [0u32; 3];
            let mut count = [0u32; 3];
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (reflect(y as isize + dy, h), reflect(x as isize + dx, w));
                    let c = pattern.site(ny, nx).bgr_index();
                    sum[c] += mosaic.get(ny, nx) as u32;
                    count[c] += 1;
                }
            }
            let px = &mut out[3 * (y * w + x)..3 * (y * w + x) + 3];
            for c in 0..3 {
                px[c] = if c == own {
                    mosaic.get(y, x)
                } else {
                    // round half away from zero on a nonnegative mean
                    ((2 * sum[c] + count[c]) / (2 * count[c])).min(255) as u8
                };
            }
        }
    }
    Ok(BgrImage { width: w, height: h, data: out })
}
