use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Subcommand;
use mapbot_core::analysis::{
    accuracy_change, beam_stats, bin_fov, crop_near_plane, fit_plane, flag_accuracy_change, flag_interference,
    histogram_svg, interference_flag, pixel_diff, pixel_diff_from_means, plane_accuracy, polar_points,
    read_depth_run, read_ply, read_point_csv, series_by_beam, AnalysisError, BeamStats, FovBinning, Plane,
    PlaneAccuracy, DEFAULT_BIN_DEG, DEFAULT_CROP_M,
};
use mapbot_core::report::{fmt_f64, ReportLine};
use serde::Deserialize;

use crate::{usage, CliError, CliResult};

#[derive(Debug, Subcommand)]
pub enum AnalysisCmd {
    /// Temporal precision of range sensors, per beam or per angular bin.
    Beams {
        /// Point CSV (t,beam_id,azimuth_deg,elevation_deg,distance_m) recorded alone.
        #[arg(long)]
        sole: PathBuf,
        /// Same scene recorded with every sensor active; adds an interference flag.
        #[arg(long)]
        collective: Option<PathBuf>,
        /// Bin by angle over `az_min,az_max,el_min,el_max` degrees instead of by beam id.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        fov: Option<Vec<f64>>,
        #[arg(long, default_value_t = DEFAULT_BIN_DEG)]
        bin_deg: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plane-fit accuracy of two ASCII PLY clouds against the sole-run plane.
    Plane {
        #[arg(long)]
        sole: PathBuf,
        #[arg(long)]
        collective: PathBuf,
        /// Keep points within this distance (m) of the first fit.
        #[arg(long, default_value_t = DEFAULT_CROP_M)]
        crop: f64,
        /// Also write an SVG histogram of collective point-to-plane distances.
        #[arg(long)]
        svg: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-pixel mean depth difference between two depth runs.
    Pixels {
        #[arg(long)]
        sole: PathBuf,
        #[arg(long)]
        collective: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute flags for a summary table and compare them with its expected column.
    Flags {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SVG histogram of point-to-plane distances of both clouds.
    Plot {
        #[arg(long)]
        sole: PathBuf,
        #[arg(long)]
        collective: PathBuf,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        #[arg(long, default_value_t = DEFAULT_CROP_M)]
        crop: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn input(e: AnalysisError) -> CliError {
    match e {
        AnalysisError::Io(_) | AnalysisError::Csv(_) | AnalysisError::Format { .. } => usage(e.to_string()),
        other => CliError::Runtime(other.into()),
    }
}

fn beam_series(path: &Path, fov: Option<&FovBinning>) -> CliResult<BeamStats> {
    let rows = read_point_csv(path).map_err(input)?;
    let series = match fov {
        Some(b) => bin_fov(&polar_points(&rows), b).map_err(input)?.series,
        None => series_by_beam(&rows),
    };
    beam_stats(&series).map_err(input)
}

fn stats_line(run: &str, s: &BeamStats) -> ReportLine {
    ReportLine::new("precision")
        .with("run", run)
        .with("beams", s.n_beams())
        .with("excluded", s.excluded)
        .with("mean_std", fmt_f64(s.mean_std))
        .with("std_of_std", fmt_f64(s.std_of_std))
}

fn accuracy_line(run: &str, a: &PlaneAccuracy) -> ReportLine {
    ReportLine::new("plane")
        .with("run", run)
        .with("points", a.points)
        .with("mean", fmt_f64(a.mean))
        .with("std", fmt_f64(a.std))
}

fn reference_plane(sole: &[[f64; 3]], crop: f64) -> CliResult<Plane> {
    let first = fit_plane(sole).map_err(input)?;
    fit_plane(&crop_near_plane(&first, sole, crop)).map_err(input)
}

fn plane_clouds(sole: &Path, collective: &Path, crop: f64) -> CliResult<(Plane, Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    if !(crop > 0.0) {
        return Err(usage(format!("crop {crop} must be > 0")));
    }
    let a = read_ply(sole).map_err(input)?;
    let b = read_ply(collective).map_err(input)?;
    let plane = reference_plane(&a, crop)?;
    let a = crop_near_plane(&plane, &a, crop);
    let b = crop_near_plane(&plane, &b, crop);
    Ok((plane, a, b))
}

fn distances(plane: &Plane, pts: &[[f64; 3]]) -> Vec<f64> {
    pts.iter().map(|p| plane.signed_distance(p)).collect()
}

pub fn exec(cmd: AnalysisCmd) -> CliResult {
    match cmd {
        AnalysisCmd::Beams {
            sole,
            collective,
            fov,
            bin_deg,
            out,
        } => {
            if fov.as_ref().is_some_and(|v| v.len() != 4) {
                return Err(usage("--fov takes az_min,az_max,el_min,el_max"));
            }
            let binning = fov
                .map(|v| FovBinning::with_resolution((v[0], v[1]), (v[2], v[3]), bin_deg))
                .transpose()
                .map_err(|e| usage(e.to_string()))?;
            let s = beam_series(&sole, binning.as_ref())?;
            let mut lines = vec![stats_line("sole", &s)];
            if let Some(c) = collective {
                let c = beam_series(&c, binning.as_ref())?;
                lines.push(stats_line("collective", &c));
                lines.push(ReportLine::new("interference").with("flag", flag_name(flag_interference(&s, &c))));
            }
            crate::io::emit(out.as_deref(), "range precision", &lines)?;
        }
        AnalysisCmd::Plane {
            sole,
            collective,
            crop,
            svg,
            out,
        } => {
            let (plane, a, b) = plane_clouds(&sole, &collective, crop)?;
            let sa = plane_accuracy(&plane, &a).map_err(input)?;
            let sb = plane_accuracy(&plane, &b).map_err(input)?;
            let n = plane.normal;
            let lines = vec![
                ReportLine::new("reference")
                    .with("normal", format!("{},{},{}", fmt_f64(n[0]), fmt_f64(n[1]), fmt_f64(n[2])))
                    .with("offset", fmt_f64(plane.offset)),
                accuracy_line("sole", &sa),
                accuracy_line("collective", &sb),
                ReportLine::new("accuracy").with("change", change_name(flag_accuracy_change(&sa, &sb))),
            ];
            if let Some(p) = svg {
                let text = histogram_svg(&distances(&plane, &b), 50, "collective point-to-plane distance (m)");
                std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
            }
            crate::io::emit(out.as_deref(), "plane accuracy", &lines)?;
        }
        AnalysisCmd::Pixels { sole, collective, out } => {
            let a = read_depth_run(&sole).map_err(input)?;
            let b = read_depth_run(&collective).map_err(input)?;
            let d = pixel_diff(&a, &b).map_err(input)?;
            let line = ReportLine::new("depth_difference")
                .with("pixels", d.pixels)
                .with("mean", fmt_f64(d.mean))
                .with("std", fmt_f64(d.std));
            crate::io::emit(out.as_deref(), "per-pixel depth difference (collective - sole)", &[line])?;
        }
        AnalysisCmd::Flags { table, out } => {
            let lines = flags(&table)?;
            let mismatches = lines.iter().filter(|l| l.get("match") == Some("false")).count();
            crate::io::emit(out.as_deref(), "recomputed flags", &lines)?;
            if mismatches > 0 {
                return Err(CliError::Runtime(anyhow::anyhow!("{mismatches} row(s) disagree with the table")));
            }
        }
        AnalysisCmd::Plot {
            sole,
            collective,
            bins,
            crop,
            out,
        } => {
            let (plane, a, b) = plane_clouds(&sole, &collective, crop)?;
            let mut all = distances(&plane, &a);
            let n_sole = all.len();
            all.extend(distances(&plane, &b));
            let title = format!("point-to-plane distance (m), {n_sole} sole + {} collective", b.len());
            std::fs::write(&out, histogram_svg(&all, bins, &title)).with_context(|| format!("writing {}", out.display()))?;
        }
    }
    Ok(())
}

fn flag_name(f: mapbot_core::analysis::InterferenceFlag) -> &'static str {
    match f {
        mapbot_core::analysis::InterferenceFlag::Flagged => "flagged",
        mapbot_core::analysis::InterferenceFlag::Clear => "clear",
    }
}

fn change_name(c: mapbot_core::analysis::AccuracyChange) -> &'static str {
    match c {
        mapbot_core::analysis::AccuracyChange::Significant => "significant",
        mapbot_core::analysis::AccuracyChange::Insignificant => "insignificant",
    }
}

#[derive(Debug, Deserialize)]
struct PrecisionRow {
    sensor: String,
    sole_mean_std: f64,
    collective_mean_std: f64,
    expected: String,
}

#[derive(Debug, Deserialize)]
struct AccuracyRow {
    sensor: String,
    sole_mean: f64,
    collective_mean: f64,
    collective_std: f64,
    expected: String,
}

#[derive(Debug, Deserialize)]
struct DepthRow {
    sensor: String,
    mean: f64,
    std: f64,
    means_file: PathBuf,
}

#[derive(Debug, Deserialize)]
struct MeansRow {
    #[allow(dead_code)]
    pixel: usize,
    sole_mean: Option<f64>,
    collective_mean: Option<f64>,
}

fn rows<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn compared(sensor: &str, got: &str, expected: &str) -> ReportLine {
    ReportLine::new("flag")
        .with("sensor", sensor)
        .with("computed", got)
        .with("expected", expected)
        .with("match", got == expected.trim().to_lowercase())
}

/// The table kind is picked from its header.
fn flags(table: &Path) -> CliResult<Vec<ReportLine>> {
    let header = csv::Reader::from_path(table)
        .and_then(|mut r| r.headers().cloned())
        .map_err(|e| usage(format!("{}: {e}", table.display())))?;
    let has = |k: &str| header.iter().any(|h| h.trim() == k);
    if has("collective_mean_std") {
        Ok(rows::<PrecisionRow>(table)?
            .iter()
            .map(|r| {
                let f = interference_flag(r.sole_mean_std, r.collective_mean_std);
                compared(&r.sensor, flag_name(f), &r.expected)
            })
            .collect())
    } else if has("collective_std") {
        Ok(rows::<AccuracyRow>(table)?
            .iter()
            .map(|r| {
                let c = accuracy_change(r.sole_mean, r.collective_mean, r.collective_std);
                compared(&r.sensor, change_name(c), &r.expected)
            })
            .collect())
    } else if has("means_file") {
        let dir = table.parent().unwrap_or(Path::new("."));
        rows::<DepthRow>(table)?
            .iter()
            .map(|r| {
                let means: Vec<MeansRow> = rows(&dir.join(&r.means_file))?;
                let (a, b) = means.iter().map(|m| (m.sole_mean, m.collective_mean)).unzip();
                let d = pixel_diff_from_means(a, b).map_err(input)?;
                let (gm, gs) = (format!("{:.4}", d.mean), format!("{:.4}", d.std));
                let (em, es) = (format!("{:.4}", r.mean), format!("{:.4}", r.std));
                let ok = gm == em && gs == es;
                Ok(ReportLine::new("depth_difference")
                    .with("sensor", &r.sensor)
                    .with("pixels", d.pixels)
                    .with("mean", gm)
                    .with("std", gs)
                    .with("expected_mean", em)
                    .with("expected_std", es)
                    .with("match", ok))
            })
            .collect()
    } else {
        Err(usage(format!("{}: unrecognised table header", table.display())))
    }
}
