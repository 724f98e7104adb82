use std::path::{Path, PathBuf};

use mapbot_core::analysis::{
    accuracy_change, beam_stats, bin_fov, crop_near_plane, fit_plane, interference_flag, pixel_diff,
    pixel_diff_from_means, plane_accuracy, read_depth_run, read_ply, write_depth_run, write_ply, AccuracyChange,
    DepthRun, FovBinning, InterferenceFlag, Plane, PolarPoint, RangeSeries,
};
use mapbot_core::seed::rng_from_seed;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Mean over beams of each beam's sample std, written as two plain loops.
fn naive_mean_std(data: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for beam in data {
        let mut sum = 0.0;
        for v in beam {
            sum += v;
        }
        let mean = sum / beam.len() as f64;
        let mut ss = 0.0;
        for v in beam {
            ss += (v - mean) * (v - mean);
        }
        total += (ss / (beam.len() - 1) as f64).sqrt();
    }
    total / data.len() as f64
}

fn noisy_beams(beams: usize, samples: usize, sigma: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    let n = Normal::new(0.0, sigma).unwrap();
    (0..beams)
        .map(|b| {
            let d = 5.0 + b as f64 * 0.1;
            (0..samples).map(|_| d + n.sample(&mut rng)).collect()
        })
        .collect()
}

fn series(data: &[Vec<f64>]) -> Vec<RangeSeries> {
    data.iter()
        .enumerate()
        .map(|(b, v)| RangeSeries {
            beam_id: b as u32,
            samples: v.iter().enumerate().map(|(i, &d)| (i as f64 * 0.1, d)).collect(),
        })
        .collect()
}

#[test]
fn beam_precision_matches_the_double_loop() {
    let data = noisy_beams(128, 1000, 0.01, 11);
    let st = beam_stats(&series(&data)).unwrap();
    assert_eq!(st.n_beams(), 128);
    assert!((st.mean_std - 0.01).abs() < 0.01 * 0.05, "{}", st.mean_std);
    assert!((st.mean_std - naive_mean_std(&data)).abs() < 1e-12);
}

#[test]
fn short_and_bad_beams() {
    let mut s = series(&noisy_beams(3, 10, 0.01, 1));
    s.push(RangeSeries {
        beam_id: 9,
        samples: vec![(0.0, 1.0)],
    });
    assert_eq!(beam_stats(&s).unwrap().excluded, 1);
    s[0].samples[3].1 = -1.0;
    assert!(beam_stats(&s).is_err());
}

/// Orthonormal in-plane basis for `n`.
fn basis(n: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let a = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let cross = |u: [f64; 3], v: [f64; 3]| [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    let norm = |u: [f64; 3]| {
        let l = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        [u[0] / l, u[1] / l, u[2] / l]
    };
    let u = norm(cross(n, a));
    (u, cross(n, u))
}

fn plane_points(normal: [f64; 3], offset: f64, n: usize, sigma: f64, seed: u64) -> Vec<[f64; 3]> {
    let (u, v) = basis(normal);
    let mut rng = rng_from_seed(seed);
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).unwrap();
    (0..n)
        .map(|_| {
            let (a, b): (f64, f64) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let e = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let h = offset + e;
            [0, 1, 2].map(|i| normal[i] * h + u[i] * a + v[i] * b)
        })
        .collect()
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / l)
}

#[test]
fn noisy_plane_is_recovered() {
    let truth = Plane {
        normal: unit([0.2, -0.3, 0.93]),
        offset: 4.0,
    };
    let pts = plane_points(truth.normal, truth.offset, 10_000, 0.01, 5);
    let fit = fit_plane(&pts).unwrap();
    assert!(fit.angle_to_deg(&truth) < 0.5, "{}", fit.angle_to_deg(&truth));
    let acc = plane_accuracy(&fit, &pts).unwrap();
    assert!((acc.std - 0.01).abs() < 0.001, "{}", acc.std);
    assert!(acc.mean.abs() < 1e-9);
}

#[test]
fn exact_plane_has_no_residual() {
    let n = unit([1.0, 2.0, 3.0]);
    let pts = plane_points(n, 2.5, 500, 0.0, 6);
    let fit = fit_plane(&pts).unwrap();
    assert!(pts.iter().all(|p| fit.signed_distance(p).abs() < 1e-9));
    assert!((fit.offset - 2.5).abs() < 1e-9);
}

#[test]
fn degenerate_inputs() {
    assert!(fit_plane(&[[0.0; 3], [1.0, 0.0, 0.0]]).is_err());
    let line: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect();
    assert!(fit_plane(&line).is_err());
}

#[test]
fn crop_keeps_points_near_the_plane() {
    let p = Plane {
        normal: [0.0, 0.0, 1.0],
        offset: 1.0,
    };
    let pts = vec![[0.0, 0.0, 1.05], [0.0, 0.0, 1.2], [3.0, 3.0, 0.95]];
    assert_eq!(crop_near_plane(&p, &pts, 0.1).len(), 2);
}

#[test]
fn ply_and_depth_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pts = plane_points([0.0, 0.0, 1.0], 1.0, 20, 0.01, 3);
    let ply = dir.path().join("a.ply");
    write_ply(&ply, &pts).unwrap();
    assert_eq!(read_ply(&ply).unwrap(), pts);
    let run = DepthRun {
        width: 3,
        height: 2,
        frames: vec![vec![1.0, 0.0, 2.0, 3.0, f32::NAN, 4.0], vec![1.5; 6]],
    };
    let path = dir.path().join("d.bin");
    write_depth_run(&path, &run).unwrap();
    let back = read_depth_run(&path).unwrap();
    assert_eq!((back.width, back.height, back.frames.len()), (3, 2, 2));
    assert_eq!(back.pixel_means()[1], Some(1.5));
}

#[test]
fn pixel_means_skip_invalid_samples() {
    let a = DepthRun {
        width: 2,
        height: 1,
        frames: vec![vec![1.0, 0.0], vec![3.0, 0.0]],
    };
    let b = DepthRun {
        width: 2,
        height: 1,
        frames: vec![vec![2.5, 1.0], vec![2.5, 1.0]],
    };
    let d = pixel_diff(&a, &b).unwrap();
    assert_eq!((d.pixels, d.mean, d.std), (1, 0.5, 0.0));
    let c = DepthRun {
        width: 1,
        height: 2,
        frames: vec![vec![1.0, 1.0]],
    };
    assert!(pixel_diff(&a, &c).is_err());
}

#[derive(serde::Deserialize)]
struct PrecisionRow {
    sensor: String,
    sole_mean_std: f64,
    collective_mean_std: f64,
    expected: String,
}

#[derive(serde::Deserialize)]
struct AccuracyRow {
    sole_mean: f64,
    collective_mean: f64,
    collective_std: f64,
    expected: String,
}

fn table<T: serde::de::DeserializeOwned>(name: &str) -> Vec<T> {
    csv::Reader::from_path(fixtures().join(name))
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap()
}

#[test]
fn precision_table_flags() {
    let rows: Vec<PrecisionRow> = table("interference_precision.csv");
    assert_eq!(rows.len(), 9);
    let flagged: Vec<&str> = rows
        .iter()
        .filter(|r| interference_flag(r.sole_mean_std, r.collective_mean_std) == InterferenceFlag::Flagged)
        .map(|r| r.sensor.as_str())
        .collect();
    assert_eq!(flagged, ["Robosense Bpearl (front)", "Robosense Bpearl (back)", "Livox Avia"]);
    for r in &rows {
        let f = interference_flag(r.sole_mean_std, r.collective_mean_std);
        assert_eq!(r.expected == "flagged", f == InterferenceFlag::Flagged, "{}", r.sensor);
    }
}

#[test]
fn accuracy_table_is_insignificant() {
    let rows: Vec<AccuracyRow> = table("plane_accuracy.csv");
    assert_eq!(rows.len(), 8);
    for r in &rows {
        assert_eq!(r.expected, "insignificant");
        assert_eq!(accuracy_change(r.sole_mean, r.collective_mean, r.collective_std), AccuracyChange::Insignificant);
    }
}

#[derive(serde::Deserialize)]
struct MeansRow {
    sole_mean: Option<f64>,
    collective_mean: Option<f64>,
}

fn means(name: &str) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
    table::<MeansRow>(name).into_iter().map(|r| (r.sole_mean, r.collective_mean)).unzip()
}

#[test]
fn depth_difference_from_stored_means() {
    for (file, mean, std) in [("depth_means_front.csv", -0.0057, 0.0332), ("depth_means_up.csv", -0.0001, 0.0840)] {
        let (a, b) = means(file);
        let d = pixel_diff_from_means(a, b).unwrap();
        assert_eq!(format!("{:.4}", d.mean), format!("{mean:.4}"), "{file}");
        assert_eq!(format!("{:.4}", d.std), format!("{std:.4}"), "{file}");
    }
}

#[test]
fn depth_difference_through_single_frame_runs() {
    let (a, b) = means("depth_means_front.csv");
    let frame = |m: &[Option<f64>]| m.iter().map(|v| v.map_or(0.0, |x| x as f32)).collect::<Vec<f32>>();
    let run = |m: &[Option<f64>]| DepthRun {
        width: 64,
        height: 48,
        frames: vec![frame(m)],
    };
    let d = pixel_diff(&run(&a), &run(&b)).unwrap();
    assert_eq!(format!("{:.4}", d.mean), "-0.0057");
    assert_eq!(format!("{:.4}", d.std), "0.0332");
}

fn binning() -> FovBinning {
    FovBinning::with_resolution((-35.2, 35.2), (-38.6, 38.6), 0.2).unwrap()
}

proptest! {
    #[test]
    fn each_point_lands_in_its_bin(az in -40.0f64..40.0, el in -40.0f64..40.0) {
        let b = binning();
        match b.bin_of(az, el) {
            Some(id) => {
                let (ai, ei) = (id as usize % b.azimuth_bins, id as usize / b.azimuth_bins);
                let w = (b.azimuth_max_deg - b.azimuth_min_deg) / b.azimuth_bins as f64;
                let h = (b.elevation_max_deg - b.elevation_min_deg) / b.elevation_bins as f64;
                prop_assert!(az >= b.azimuth_min_deg + ai as f64 * w - 1e-9);
                prop_assert!(az < b.azimuth_min_deg + (ai + 1) as f64 * w + 1e-9);
                prop_assert!(el >= b.elevation_min_deg + ei as f64 * h - 1e-9);
                prop_assert!(el < b.elevation_min_deg + (ei + 1) as f64 * h + 1e-9);
            }
            None => prop_assert!(
                az < b.azimuth_min_deg || az >= b.azimuth_max_deg || el < b.elevation_min_deg || el >= b.elevation_max_deg
            ),
        }
    }

    #[test]
    fn binning_conserves_points(
        pts in proptest::collection::vec((0u32..20, -40.0f64..40.0, -40.0f64..40.0, 0.5f64..50.0), 1..200)
    ) {
        let points: Vec<PolarPoint> = pts
            .iter()
            .map(|&(t, az, el, d)| PolarPoint { t: t as f64 * 0.1, azimuth_deg: az, elevation_deg: el, distance: d })
            .collect();
        let b = binning();
        let out = bin_fov(&points, &b).unwrap();
        let inside = points.iter().filter(|p| b.bin_of(p.azimuth_deg, p.elevation_deg).is_some()).count();
        prop_assert_eq!(out.out_of_fov, points.len() - inside);
        let samples: usize = out.series.iter().map(|s| s.samples.len()).sum();
        prop_assert!(samples <= inside);
        for s in &out.series {
            for w in s.samples.windows(2) {
                prop_assert!(w[0].0 < w[1].0);
            }
        }
    }

    #[test]
    fn beam_stats_are_shift_invariant(seed in any::<u64>(), shift in 0.0f64..100.0) {
        let data = noisy_beams(4, 30, 0.05, seed);
        let shifted: Vec<Vec<f64>> = data.iter().map(|b| b.iter().map(|v| v + shift).collect()).collect();
        let a = beam_stats(&series(&data)).unwrap();
        let b = beam_stats(&series(&shifted)).unwrap();
        prop_assert!((a.mean_std - b.mean_std).abs() < 1e-9);
    }
}
