use std::collections::BTreeSet;

use mapbot_core::postproc::{
    default_tolerance_s, deinterleave_bayer, demosaic_bilinear, interleave_bayer, restore_timestamps, BayerPattern,
    Grid, PostprocError,
};
use mapbot_core::sensors::SensorRecord;
use mapbot_core::trigger::{generate_schedule, Polarity, TriggerChannelConfig};
use proptest::prelude::*;

const PATTERNS: [BayerPattern; 4] = [BayerPattern::Rggb, BayerPattern::Bggr, BayerPattern::Grbg, BayerPattern::Gbrg];

fn record(seq: u64, t: i64) -> SensorRecord {
    SensorRecord {
        sensor_id: "cam".into(),
        sequence_index: seq,
        device_time_ns: t,
        payload_digest: seq,
        payload_size_bytes: 1,
    }
}

#[test]
fn restores_a_clean_stream() {
    let trig = generate_schedule(&TriggerChannelConfig::new(0, 10.0, Polarity::Rising), 0.0, 1.0).unwrap();
    let recs: Vec<_> = trig.iter().enumerate().map(|(i, t)| record(i as u64, t.true_time_ns + 3_000_000)).collect();
    let (out, rep) = restore_timestamps(&recs, &trig, default_tolerance_s(&trig).unwrap()).unwrap();
    assert_eq!(rep.matched, 10);
    assert!(rep.dropped_trigger_indices.is_empty());
    assert_eq!(rep.bias_s, 0.003);
    assert!(out.iter().zip(&trig).all(|(r, t)| r.device_time_ns == t.true_time_ns));
}

#[test]
fn half_period_tolerance_is_ambiguous() {
    let trig = generate_schedule(&TriggerChannelConfig::new(0, 10.0, Polarity::Rising), 0.0, 1.0).unwrap();
    assert!(matches!(
        restore_timestamps(&[], &trig, 0.05),
        Err(PostprocError::AmbiguousTolerance { .. })
    ));
}

#[test]
fn unsorted_records_are_refused() {
    let trig = generate_schedule(&TriggerChannelConfig::new(0, 10.0, Polarity::Rising), 0.0, 1.0).unwrap();
    let recs = vec![record(0, 100_000_000), record(1, 0)];
    assert!(matches!(restore_timestamps(&recs, &trig, 0.01), Err(PostprocError::Unsorted(_))));
}

#[test]
fn demosaic_of_a_flat_field_is_flat() {
    for p in PATTERNS {
        let img = demosaic_bilinear(&Grid::filled(8, 6, 77), p).unwrap();
        assert!(img.data.iter().all(|&v| v == 77));
    }
    assert!(demosaic_bilinear(&Grid::filled(7, 6, 0), BayerPattern::Rggb).is_err());
}

#[test]
fn demosaic_keeps_sampled_channels() {
    let data: Vec<u8> = (0..64u32).map(|i| (i * 37 % 251) as u8).collect();
    let m = Grid::new(8, 8, data);
    for p in PATTERNS {
        let img = demosaic_bilinear(&m, p).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let ch = match p.site(y, x) {
                    mapbot_core::postproc::BayerSite::B => 0,
                    mapbot_core::postproc::BayerSite::R => 2,
                    _ => 1,
                };
                assert_eq!(img.pixel(y, x)[ch], m.get(y, x));
            }
        }
    }
}

proptest! {
    #[test]
    fn drops_are_recovered_exactly(
        n in 5usize..200,
        drop_mask in proptest::collection::vec(any::<bool>(), 200),
        bias_us in -20_000i64..20_000,
        jitter in proptest::collection::vec(-2_000i64..2_000, 200),
    ) {
        let trig = generate_schedule(&TriggerChannelConfig::new(0, 20.0, Polarity::Rising), 0.0, n as f64 / 20.0).unwrap();
        let kept: Vec<_> = trig.iter().enumerate().filter(|(i, _)| !drop_mask[*i]).collect();
        prop_assume!(!kept.is_empty());
        let recs: Vec<_> = kept
            .iter()
            .enumerate()
            .map(|(j, (i, t))| record(j as u64, t.true_time_ns + bias_us * 1000 + jitter[*i] * 1000))
            .collect();
        let (out, rep) = restore_timestamps(&recs, &trig, default_tolerance_s(&trig).unwrap()).unwrap();
        let want: BTreeSet<u64> = trig.iter().enumerate().filter(|(i, _)| drop_mask[*i]).map(|(_, t)| t.sequence_index).collect();
        let got: BTreeSet<u64> = rep.dropped_trigger_indices.iter().copied().collect();
        prop_assert_eq!(got, want);
        prop_assert_eq!(rep.matched, kept.len());
        for (r, (_, t)) in out.iter().zip(&kept) {
            prop_assert_eq!(r.device_time_ns, t.true_time_ns);
        }
    }

    #[test]
    fn bayer_planes_round_trip(w in 1usize..16, h in 1usize..16, seed in any::<u64>(), p in 0usize..4) {
        let data: Vec<u8> = (0..4 * w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
        let mosaic = Grid::new(2 * w, 2 * h, data);
        let planes = deinterleave_bayer(&mosaic, PATTERNS[p]).unwrap();
        prop_assert_eq!(interleave_bayer(&planes).unwrap(), mosaic);
    }
}
