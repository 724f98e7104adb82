//! Interference statistics for LiDARs and depth cameras.
//!
//! Precision: per-beam (or per-bin, per-pixel) temporal standard deviation of
//! range, summarized across beams by its mean and standard deviation.
//! Accuracy: signed point-to-plane distance against a plane fitted to the
//! sole-run points, summarized as a Gaussian (sample mean and std).
//!
//! All reductions are sequential in input order so results are bit-stable.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::secs_to_nanos;

/// Collective mean std must exceed this multiple of the sole value to flag.
pub const INTERFERENCE_RATIO: f64 = 2.0;
/// ... and exceed the sole value by at least this much, meters.
pub const INTERFERENCE_MIN_DELTA_M: f64 = 0.01;
/// Accuracy change is significant beyond this many collective sigmas.
pub const ACCURACY_SIGMAS: f64 = 2.0;
pub const DEFAULT_BIN_DEG: f64 = 0.2;
pub const DEFAULT_CROP_M: f64 = 0.1;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no beam has at least two samples ({excluded} excluded)")]
    NoUsableBeams { excluded: usize },
    #[error("beam {beam}: distance {value} is not positive and finite")]
    BadDistance { beam: u32, value: f64 },
    #[error("plane fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("points are collinear or coincident")]
    Degenerate,
    #[error("empty point set")]
    Empty,
    #[error("depth runs differ in size: {0}")]
    SizeMismatch(String),
    #[error("no pixel is valid in both runs")]
    NoCommonPixels,
    #[error("invalid FOV binning: {0}")]
    Binning(String),
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Time series of range readings for one beam, bin, or pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeSeries {
    pub beam_id: u32,
    /// `(t seconds, distance meters)`.
    pub samples: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamSummary {
    pub beam_id: u32,
    pub mean: f64,
    pub std: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamStats {
    pub beams: Vec<BeamSummary>,
    /// Mean over beams of the temporal std.
    pub mean_std: f64,
    /// Std over beams of the temporal std; 0 with a single beam.
    pub std_of_std: f64,
    /// Beams excluded for having fewer than two samples.
    pub excluded: usize,
}

impl BeamStats {
    pub fn n_beams(&self) -> usize {
        self.beams.len()
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        sum += v;
        n += 1;
    }
    if n == 0 {
        return (f64::NAN, f64::NAN, 0);
    }
    let mean = sum / n as f64;
    if n < 2 {
        return (mean, 0.0, n);
    }
    let mut ss = 0.0;
    for v in values {
        ss += (v - mean) * (v - mean);
    }
    (mean, (ss / (n - 1) as f64).sqrt(), n)
}

/// Per-beam temporal mean and std (N-1), then mean and std (N-1) of the stds.
pub fn beam_stats(series: &[RangeSeries]) -> Result<BeamStats, AnalysisError> {
    let mut beams = Vec::with_capacity(series.len());
    let mut excluded = 0;
    for s in series {
        if let Some(&(_, d)) = s.samples.iter().find(|(_, d)| !(d.is_finite() && *d > 0.0)) {
            return Err(AnalysisError::BadDistance { beam: s.beam_id, value: d });
        }
        if s.samples.len() < 2 {
            excluded += 1;
            continue;
        }
        let (mean, std, n) = mean_std(s.samples.iter().map(|&(_, d)| d));
        beams.push(BeamSummary {
            beam_id: s.beam_id,
            mean,
            std,
            samples: n,
        });
    }
    if beams.is_empty() {
        return Err(AnalysisError::NoUsableBeams { excluded });
    }
    let (mean_std_v, std_of_std, _) = mean_std(beams.iter().map(|b| b.std));
    Ok(BeamStats {
        beams,
        mean_std: mean_std_v,
        std_of_std,
        excluded,
    })
}

/// A return from a non-repetitive scanner, angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarPoint {
    pub t: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub distance: f64,
}

/// Half-open angular bins `[low, high)` over a configured FOV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FovBinning {
    pub azimuth_min_deg: f64,
    pub azimuth_max_deg: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub azimuth_bins: usize,
    pub elevation_bins: usize,
}

impl FovBinning {
    /// Bins of `bin_deg` covering the extents (rounded up to whole bins).
    pub fn with_resolution(az: (f64, f64), el: (f64, f64), bin_deg: f64) -> Result<Self, AnalysisError> {
        if !(bin_deg > 0.0) {
            return Err(AnalysisError::Binning(format!("bin size {bin_deg}")));
        }
        let count = |lo: f64, hi: f64| ((hi - lo) / bin_deg - 1e-9).ceil().max(1.0) as usize;
        let b = Self {
            azimuth_min_deg: az.0,
            azimuth_max_deg: az.0 + count(az.0, az.1) as f64 * bin_deg,
            elevation_min_deg: el.0,
            elevation_max_deg: el.0 + count(el.0, el.1) as f64 * bin_deg,
            azimuth_bins: count(az.0, az.1),
            elevation_bins: count(el.0, el.1),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.azimuth_bins == 0 || self.elevation_bins == 0 {
            return Err(AnalysisError::Binning("bin counts must be >= 1".into()));
        }
        if !(self.azimuth_max_deg > self.azimuth_min_deg && self.elevation_max_deg > self.elevation_min_deg) {
            return Err(AnalysisError::Binning("empty angular extent".into()));
        }
        Ok(())
    }

    fn axis_index(v: f64, lo: f64, hi: f64, n: usize) -> Option<usize> {
        if !(v >= lo && v < hi) {
            return None;
        }
        let w = (hi - lo) / n as f64;
        let mut i = (((v - lo) / w).floor() as usize).min(n - 1);
        // settle exact edges against the same edge formula used for bounds
        let edge = |k: usize| lo + (hi - lo) * k as f64 / n as f64;
        if i + 1 < n && edge(i + 1) <= v {
            i += 1;
        } else if i > 0 && edge(i) > v {
            i -= 1;
        }
        Some(i)
    }

    /// Bin id `elevation_index * azimuth_bins + azimuth_index`, or `None` outside the FOV.
    pub fn bin_of(&self, azimuth_deg: f64, elevation_deg: f64) -> Option<u32> {
        let a = Self::axis_index(azimuth_deg, self.azimuth_min_deg, self.azimuth_max_deg, self.azimuth_bins)?;
        let e = Self::axis_index(elevation_deg, self.elevation_min_deg, self.elevation_max_deg, self.elevation_bins)?;
        Some((e * self.azimuth_bins + a) as u32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinnedFov {
    /// Series for bins that received at least one reading, by bin id.
    pub series: Vec<RangeSeries>,
    pub out_of_fov: usize,
}

/// Nearest reading per bin per message timestamp.
pub fn bin_fov(points: &[PolarPoint], binning: &FovBinning) -> Result<BinnedFov, AnalysisError> {
    binning.validate()?;
    let mut nearest: BTreeMap<(u32, i64), (f64, f64)> = BTreeMap::new();
    let mut out_of_fov = 0;
    for p in points {
        let Some(bin) = binning.bin_of(p.azimuth_deg, p.elevation_deg) else {
            out_of_fov += 1;
            continue;
        };
        let e = nearest.entry((bin, secs_to_nanos(p.t))).or_insert((p.t, p.distance));
        if p.distance < e.1 {
            e.1 = p.distance;
        }
    }
    let mut series: Vec<RangeSeries> = Vec::new();
    for ((bin, _), sample) in nearest {
        match series.last_mut() {
            Some(s) if s.beam_id == bin => s.samples.push(sample),
            _ => series.push(RangeSeries {
                beam_id: bin,
                samples: vec![sample],
            }),
        }
    }
    Ok(BinnedFov { series, out_of_fov })
}

/// Plane `normal . p = offset` with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl Plane {
    pub fn signed_distance(&self, p: &[f64; 3]) -> f64 {
        let n = &self.normal;
        (n[0] * p[0] + n[1] * p[1] + n[2] * p[2]) - self.offset
    }

    /// Angle between normals, degrees, ignoring orientation.
    pub fn angle_to_deg(&self, other: &Plane) -> f64 {
        let d: f64 = (0..3).map(|i| self.normal[i] * other.normal[i]).sum();
        d.abs().min(1.0).acos().to_degrees()
    }
}

/// Total-least-squares plane through the centroid, normal along the
/// smallest-variance principal axis. The normal is oriented so that
/// `offset >= 0`.
pub fn fit_plane(points: &[[f64; 3]]) -> Result<Plane, AnalysisError> {
    if points.len() < 3 {
        return Err(AnalysisError::TooFewPoints(points.len()));
    }
    let n = points.len() as f64;
    let mut c = Vector3::zeros();
    for p in points {
        c += Vector3::from(*p);
    }
    c /= n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = Vector3::from(*p) - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (smallest, middle, largest) = (order[0], order[1], order[2]);
    let scale = eig.eigenvalues[largest];
    if !(scale > 0.0) || eig.eigenvalues[middle] <= 1e-12 * scale {
        return Err(AnalysisError::Degenerate);
    }
    let mut normal: Vector3<f64> = eig.eigenvectors.column(smallest).normalize();
    let mut offset = normal.dot(&c);
    let flip = if offset.abs() > 1e-12 {
        offset < 0.0
    } else {
        normal.iter().find(|v| v.abs() > 1e-12).is_some_and(|v| *v < 0.0)
    };
    if flip {
        normal = -normal;
        offset = -offset;
    }
    Ok(Plane {
        normal: [normal.x, normal.y, normal.z],
        offset,
    })
}

/// Points within `radius` of the plane.
pub fn crop_near_plane(plane: &Plane, points: &[[f64; 3]], radius: f64) -> Vec<[f64; 3]> {
    points.iter().copied().filter(|p| plane.signed_distance(p).abs() <= radius).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneAccuracy {
    pub plane: Plane,
    /// Mean signed point-to-plane distance.
    pub mean: f64,
    /// Sample std (N-1) of the signed distance.
    pub std: f64,
    pub points: usize,
}

pub fn plane_accuracy(plane: &Plane, points: &[[f64; 3]]) -> Result<PlaneAccuracy, AnalysisError> {
    if points.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let (mean, std, n) = mean_std(points.iter().map(|p| plane.signed_distance(p)));
    Ok(PlaneAccuracy {
        plane: *plane,
        mean,
        std,
        points: n,
    })
}

/// Stack of depth frames; 0 (or non-finite) marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthRun {
    pub width: usize,
    pub height: usize,
    pub frames: Vec<Vec<f32>>,
}

impl DepthRun {
    /// Per-pixel temporal mean over valid samples; `None` if never valid.
    pub fn pixel_means(&self) -> Vec<Option<f64>> {
        (0..self.width * self.height)
            .map(|i| {
                let mut sum = 0.0;
                let mut n = 0usize;
                for f in &self.frames {
                    let v = f[i];
                    if v.is_finite() && v > 0.0 {
                        sum += v as f64;
                        n += 1;
                    }
                }
                (n > 0).then(|| sum / n as f64)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelDiffStats {
    /// Per-pixel means of run a (sole) and run b (collective); `None` where invalid.
    pub means_a: Vec<Option<f64>>,
    pub means_b: Vec<Option<f64>>,
    /// Mean of `b - a` over pixels valid in both runs.
    pub mean: f64,
    /// Sample std (N-1) of `b - a`.
    pub std: f64,
    pub pixels: usize,
}

pub fn pixel_diff(run_a: &DepthRun, run_b: &DepthRun) -> Result<PixelDiffStats, AnalysisError> {
    if (run_a.width, run_a.height) != (run_b.width, run_b.height) {
        return Err(AnalysisError::SizeMismatch(format!(
            "{}x{} vs {}x{}",
            run_a.width, run_a.height, run_b.width, run_b.height
        )));
    }
    for run in [run_a, run_b] {
        if run.frames.iter().any(|f| f.len() != run.width * run.height) {
            return Err(AnalysisError::SizeMismatch("frame length differs from width*height".into()));
        }
    }
    pixel_diff_from_means(run_a.pixel_means(), run_b.pixel_means())
}

/// [`pixel_diff`] on precomputed per-pixel means.
pub fn pixel_diff_from_means(
    means_a: Vec<Option<f64>>,
    means_b: Vec<Option<f64>>,
) -> Result<PixelDiffStats, AnalysisError> {
    if means_a.len() != means_b.len() {
        return Err(AnalysisError::SizeMismatch(format!("{} vs {} pixels", means_a.len(), means_b.len())));
    }
    let diffs: Vec<f64> = means_a
        .iter()
        .zip(&means_b)
        .filter_map(|(a, b)| Some((*b)? - (*a)?))
        .collect();
    if diffs.is_empty() {
        return Err(AnalysisError::NoCommonPixels);
    }
    let (mean, std, pixels) = mean_std(diffs.iter().copied());
    Ok(PixelDiffStats {
        means_a,
        means_b,
        mean,
        std,
        pixels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterferenceFlag {
    Flagged,
    Clear,
}

/// Flag interference when the collective mean temporal std is more than
/// twice the sole value and at least 1 cm larger.
pub fn interference_flag(sole_mean_std: f64, collective_mean_std: f64) -> InterferenceFlag {
    if collective_mean_std > INTERFERENCE_RATIO * sole_mean_std
        && collective_mean_std - sole_mean_std > INTERFERENCE_MIN_DELTA_M
    {
        InterferenceFlag::Flagged
    } else {
        InterferenceFlag::Clear
    }
}

pub fn flag_interference(sole: &BeamStats, collective: &BeamStats) -> InterferenceFlag {
    interference_flag(sole.mean_std, collective.mean_std)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccuracyChange {
    Significant,
    Insignificant,
}

pub fn accuracy_change(sole_mean: f64, collective_mean: f64, collective_std: f64) -> AccuracyChange {
    if (collective_mean - sole_mean).abs() > ACCURACY_SIGMAS * collective_std {
        AccuracyChange::Significant
    } else {
        AccuracyChange::Insignificant
    }
}

pub fn flag_accuracy_change(sole: &PlaneAccuracy, collective: &PlaneAccuracy) -> AccuracyChange {
    accuracy_change(sole.mean, collective.mean, collective.std)
}

/// Static SVG histogram of `values`.
pub fn histogram_svg(values: &[f64], bins: usize, title: &str) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let bins = bins.max(1);
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let (lo, hi) = if values.is_empty() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let i = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
        counts[i.min(bins - 1)] += 1;
    }
    let peak = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bar_w = (w - 2.0 * pad) / bins as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        w / 2.0,
        escape_xml(title)
    );
    for (i, &c) in counts.iter().enumerate() {
        let bh = (h - 2.0 * pad) * c as f64 / peak;
        svg.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"steelblue\"/>\n",
            pad + i as f64 * bar_w,
            h - pad - bh,
            (bar_w - 1.0).max(0.5),
            bh
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{pad}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>\n\
         <text x=\"{pad}\" y=\"{ty}\" font-family=\"sans-serif\" font-size=\"11\">{lo:.4}</text>\n\
         <text x=\"{x2}\" y=\"{ty}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{hi:.4}</text>\n</svg>\n",
        y = h - pad,
        x2 = w - pad,
        ty = h - pad + 16.0,
    ));
    svg
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn format_err(path: &Path, reason: impl Into<String>) -> AnalysisError {
    AnalysisError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// One row of a point-stream CSV: `t,beam_id,azimuth_deg,elevation_deg,distance_m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointRow {
    pub t: f64,
    pub beam_id: u32,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub distance_m: f64,
}

pub fn read_point_csv(path: &Path) -> Result<Vec<PointRow>, AnalysisError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(AnalysisError::from)).collect()
}

pub fn write_point_csv(path: &Path, rows: &[PointRow]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Group rows into per-beam series in time order.
pub fn series_by_beam(rows: &[PointRow]) -> Vec<RangeSeries> {
    let mut by: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        by.entry(r.beam_id).or_default().push((r.t, r.distance_m));
    }
    by.into_iter()
        .map(|(beam_id, mut samples)| {
            samples.sort_by(|a, b| a.0.total_cmp(&b.0));
            RangeSeries { beam_id, samples }
        })
        .collect()
}

pub fn polar_points(rows: &[PointRow]) -> Vec<PolarPoint> {
    rows.iter()
        .map(|r| PolarPoint {
            t: r.t,
            azimuth_deg: r.azimuth_deg,
            elevation_deg: r.elevation_deg,
            distance: r.distance_m,
        })
        .collect()
}

/// ASCII PLY with `x y z` as the first three vertex properties.
pub fn read_ply(path: &Path) -> Result<Vec<[f64; 3]>, AnalysisError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let first = lines.next().transpose()?.unwrap_or_default();
    if first.trim() != "ply" {
        return Err(format_err(path, "missing 'ply' magic"));
    }
    let mut vertices = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = lines.next().transpose()?.ok_or_else(|| format_err(path, "missing end_header"))?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => return Err(format_err(path, "only ascii PLY is supported")),
            ["element", "vertex", n] => {
                vertices = Some(n.parse::<usize>().map_err(|_| format_err(path, "bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let n = vertices.ok_or_else(|| format_err(path, "no vertex element"))?;
    if props.len() < 3 || props[..3] != ["x", "y", "z"] {
        return Err(format_err(path, "vertex properties must start with x y z"));
    }
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        let line = lines.next().transpose()?.ok_or_else(|| format_err(path, "truncated vertex list"))?;
        let v: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| format_err(path, format!("bad vertex line {line:?}")))?;
        if v.len() < 3 {
            return Err(format_err(path, format!("bad vertex line {line:?}")));
        }
        pts.push([v[0], v[1], v[2]]);
    }
    Ok(pts)
}

pub fn write_ply(path: &Path, points: &[[f64; 3]]) -> Result<(), AnalysisError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
    writeln!(w, "property double x\nproperty double y\nproperty double z\nend_header")?;
    for p in points {
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    w.flush()?;
    Ok(())
}

fn depth_sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    s.into()
}

/// Read a depth run: `path` holds frames of little-endian f32 meters,
/// `path.hdr` holds `width`, `height` and `frames` lines.
pub fn read_depth_run(path: &Path) -> Result<DepthRun, AnalysisError> {
    let hdr_path = depth_sidecar(path);
    let hdr = std::fs::read_to_string(&hdr_path)?;
    let mut dims: BTreeMap<&str, usize> = BTreeMap::new();
    for line in hdr.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| format_err(&hdr_path, format!("bad line {line:?}")))?;
        let v = v.trim().parse().map_err(|_| format_err(&hdr_path, format!("bad value in {line:?}")))?;
        dims.insert(k, v);
    }
    let get = |k: &str| dims.get(k).copied().ok_or_else(|| format_err(&hdr_path, format!("missing {k}")));
    let (width, height, frames) = (get("width")?, get("height")?, get("frames")?);
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() != width * height * frames * 4 {
        return Err(format_err(path, format!("expected {} bytes, found {}", width * height * frames * 4, raw.len())));
    }
    let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(DepthRun {
        width,
        height,
        frames: values.chunks(width * height.max(1)).map(<[f32]>::to_vec).collect(),
    })
}

pub fn write_depth_run(path: &Path, run: &DepthRun) -> Result<(), AnalysisError> {
    let mut bytes = Vec::with_capacity(run.frames.len() * run.width * run.height * 4);
    for f in &run.frames {
        for v in f {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    std::fs::write(
        depth_sidecar(path),
        format!("width {}\nheight {}\nframes {}\n", run.width, run.height, run.frames.len()),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(beam: u32, d: &[f64]) -> RangeSeries {
        RangeSeries {
            beam_id: beam,
            samples: d.iter().enumerate().map(|(i, &v)| (i as f64 * 0.1, v)).collect(),
        }
    }

    #[test]
    fn constant_distances_have_zero_spread() {
        let s: Vec<_> = (0..8).map(|b| series(b, &[5.0; 20])).collect();
        let st = beam_stats(&s).unwrap();
        assert!(st.beams.iter().all(|b| b.std == 0.0 && b.mean == 5.0));
        assert_eq!((st.mean_std, st.std_of_std), (0.0, 0.0));
    }

    #[test]
    fn two_sample_beam() {
        let st = beam_stats(&[series(0, &[1.0, 3.0])]).unwrap();
        assert!((st.beams[0].std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(st.beams[0].mean, 2.0);
    }

    #[test]
    fn short_beams_are_excluded() {
        let st = beam_stats(&[series(0, &[1.0]), series(1, &[1.0, 1.0])]).unwrap();
        assert_eq!((st.excluded, st.n_beams()), (1, 1));
        assert!(matches!(beam_stats(&[series(0, &[1.0])]), Err(AnalysisError::NoUsableBeams { excluded: 1 })));
        assert!(matches!(beam_stats(&[series(0, &[1.0, -1.0])]), Err(AnalysisError::BadDistance { .. })));
    }

    fn binning() -> FovBinning {
        FovBinning::with_resolution((0.0, 1.0), (0.0, 1.0), 0.2).unwrap()
    }

    #[test]
    fn nearest_reading_per_bin() {
        let p = |az, d| PolarPoint { t: 0.0, azimuth_deg: az, elevation_deg: 0.1, distance: d };
        let out = bin_fov(&[p(0.1, 3.0), p(0.15, 2.0), p(0.5, 4.0), p(7.0, 1.0)], &binning()).unwrap();
        assert_eq!(out.out_of_fov, 1);
        assert_eq!(out.series.len(), 2);
        assert_eq!(out.series[0].samples, vec![(0.0, 2.0)]);
    }

    #[test]
    fn bin_edges_are_half_open() {
        let b = binning();
        assert_eq!(b.azimuth_bins, 5);
        assert_eq!(b.bin_of(0.0, 0.0), Some(0));
        // a value on an interior edge opens the next bin
        assert_eq!(b.bin_of(0.6, 0.0), Some(3));
        assert_eq!(b.bin_of(0.2, 0.0), Some(1));
        assert_eq!(b.bin_of(0.19999, 0.0), Some(0));
        assert_eq!(b.bin_of(1.0, 0.0), None);
        assert_eq!(b.bin_of(0.0, 0.4), Some(10));
    }

    #[test]
    fn plane_z_equals_one() {
        let pts: Vec<_> = (0..25).map(|i| [(i % 5) as f64, (i / 5) as f64 * 0.7, 1.0]).collect();
        let p = fit_plane(&pts).unwrap();
        assert!((p.normal[2] - 1.0).abs() < 1e-12);
        assert!((p.offset - 1.0).abs() < 1e-12);
        assert!(pts.iter().all(|q| p.signed_distance(q).abs() < 1e-12));
    }

    #[test]
    fn three_point_plane() {
        let pts = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let p = fit_plane(&pts).unwrap();
        let k = 1.0 / 3f64.sqrt();
        for i in 0..3 {
            assert!((p.normal[i] - k).abs() < 1e-12);
        }
        assert!((p.offset - k).abs() < 1e-12);
        assert!(pts.iter().all(|q| p.signed_distance(q).abs() < 1e-12));
    }

    #[test]
    fn degenerate_planes() {
        assert!(matches!(fit_plane(&[[0.0; 3], [1.0; 3]]), Err(AnalysisError::TooFewPoints(2))));
        let line: Vec<_> = (0..10).map(|i| [i as f64, 2.0 * i as f64, 0.5]).collect();
        assert!(matches!(fit_plane(&line), Err(AnalysisError::Degenerate)));
        assert!(matches!(fit_plane(&[[1.0; 3]; 5]), Err(AnalysisError::Degenerate)));
    }

    #[test]
    fn translation_shifts_mean_only() {
        let pts: Vec<_> = (0..50).map(|i| [(i % 7) as f64, (i % 5) as f64, ((i * 37) % 11) as f64 * 0.001]).collect();
        let plane = fit_plane(&pts).unwrap();
        let base = plane_accuracy(&plane, &pts).unwrap();
        assert!(base.mean.abs() < 1e-12);
        let n = plane.normal;
        let shifted: Vec<_> = pts.iter().map(|p| [p[0] + 0.01 * n[0], p[1] + 0.01 * n[1], p[2] + 0.01 * n[2]]).collect();
        let s = plane_accuracy(&plane, &shifted).unwrap();
        assert!((s.mean - 0.01).abs() < 1e-12);
        assert!((s.std - base.std).abs() < 1e-12);
        assert!(matches!(plane_accuracy(&plane, &[]), Err(AnalysisError::Empty)));
    }

    fn run(frames: Vec<Vec<f32>>) -> DepthRun {
        DepthRun { width: 2, height: 2, frames }
    }

    #[test]
    fn pixel_diff_examples() {
        let a = run(vec![vec![1.0, 2.0, 3.0, 0.0], vec![1.0, 2.0, 3.0, 0.0]]);
        let s = pixel_diff(&a, &a).unwrap();
        assert_eq!((s.mean, s.std, s.pixels), (0.0, 0.0, 3));
        let b = run(vec![vec![1.5, 2.5, 3.5, 4.5]]);
        let s = pixel_diff(&run(vec![vec![1.0, 2.0, 3.0, 4.0]]), &b).unwrap();
        assert_eq!((s.mean, s.std, s.pixels), (0.5, 0.0, 4));
        let empty = run(vec![vec![0.0; 4]]);
        assert!(matches!(pixel_diff(&a, &empty), Err(AnalysisError::NoCommonPixels)));
        let other = DepthRun { width: 4, height: 1, frames: vec![vec![1.0; 4]] };
        assert!(matches!(pixel_diff(&a, &other), Err(AnalysisError::SizeMismatch(_))));
    }

    #[test]
    fn interference_rule() {
        assert_eq!(interference_flag(0.0114, 0.1719), InterferenceFlag::Flagged);
        assert_eq!(interference_flag(0.0156, 2.5236), InterferenceFlag::Flagged);
        assert_eq!(interference_flag(0.0775, 0.1357), InterferenceFlag::Clear);
        // large ratio but under 1 cm absolute change
        assert_eq!(interference_flag(0.001, 0.005), InterferenceFlag::Clear);
    }

    #[test]
    fn accuracy_rule() {
        assert_eq!(accuracy_change(0.0, -0.0357, 0.0239), AccuracyChange::Insignificant);
        assert_eq!(accuracy_change(0.01, 0.01, 0.02), AccuracyChange::Insignificant);
        assert_eq!(accuracy_change(0.0, 0.03, 0.01), AccuracyChange::Significant);
    }

    #[test]
    fn histogram_is_wellformed() {
        let svg = histogram_svg(&[0.0, 0.1, 0.1, 0.2], 4, "D_c2p <m>");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("fill=\"steelblue\"").count(), 4);
        assert!(svg.contains("&lt;m&gt;"));
    }

    #[test]
    fn file_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let pts = vec![[0.0, 1.0, 2.0], [3.5, -1.25, 0.125]];
        write_ply(&dir.path().join("c.ply"), &pts).unwrap();
        assert_eq!(read_ply(&dir.path().join("c.ply")).unwrap(), pts);
        let r = run(vec![vec![1.0, 2.0, 0.0, 4.0], vec![1.5, 2.0, 3.0, 0.0]]);
        write_depth_run(&dir.path().join("d.depth"), &r).unwrap();
        assert_eq!(read_depth_run(&dir.path().join("d.depth")).unwrap(), r);
        let rows = vec![PointRow { t: 0.1, beam_id: 3, azimuth_deg: 1.0, elevation_deg: -2.0, distance_m: 5.5 }];
        write_point_csv(&dir.path().join("p.csv"), &rows).unwrap();
        assert_eq!(read_point_csv(&dir.path().join("p.csv")).unwrap(), rows);
    }
}
