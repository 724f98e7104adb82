use std::collections::BTreeMap;
use std::path::Path;

use mapbot_core::cluster::run::{restore_all, run_collection};
use mapbot_core::cluster::{ClusterError, ClusterEvent, Coordinator, Phase};
use mapbot_core::config::RunConfig;
use mapbot_core::trigger::{Edge, TriggerChannelConfig};

/// Master plus `workers` workers, one 10 Hz camera on each of the first `cams`.
fn cluster_toml(workers: u8, cams: u8, extra: &str) -> String {
    let mut s = String::from(
        "seed = 42\n\n[syncboard]\nchannels = [{ channel_id = 0, frequency_hz = 10.0, polarity = \"rising\" }]\n\n[[nodes]]\nnode_id = 0\nrole = \"master\"\n",
    );
    for id in 1..=workers {
        s += &format!("\n[[nodes]]\nnode_id = {id}\nrole = \"worker\"\n");
    }
    for id in 1..=cams {
        s += &format!(
            "\n[[sensors]]\nsensor_id = \"cam{id}\"\nkind = \"triggered_camera\"\nnode = {id}\ntrigger_channel = 0\npayload_size_bytes = 1000\n"
        );
    }
    s + extra
}

fn config(workers: u8, cams: u8) -> RunConfig {
    RunConfig::from_toml_str(&cluster_toml(workers, cams, "")).unwrap()
}

fn ready(cfg: RunConfig, root: &Path) -> Coordinator {
    let mut c = Coordinator::new(cfg, root).unwrap();
    c.bringup().unwrap();
    c.time_sync_phase().unwrap();
    c.launch().unwrap();
    c
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn bringup_registers_fifteen_workers() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Coordinator::new(config(15, 10), dir.path()).unwrap();
    c.bringup().unwrap();
    assert_eq!(c.phase(), Phase::ClusterUp);
    assert_eq!(c.worker_count(), 15);
    assert_eq!(c.registry().len(), 16);
    assert_eq!(c.registry()[&3].assigned_sensors, vec!["cam3".to_string()]);
    let phases: Vec<_> = c.lifecycle().transitions.iter().map(|t| t.0).collect();
    assert_eq!(phases, vec![Phase::PoweredOff, Phase::MasterUp, Phase::ClusterUp]);
}

#[test]
fn workers_hold_the_canonical_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(4, 2);
    let digest = mapbot_core::seed::digest64(&[&cfg.canonical_bytes()]);
    let mut c = Coordinator::new(cfg, dir.path()).unwrap();
    c.bringup().unwrap();
    for (id, d) in c.registry() {
        if *id != 0 {
            assert_eq!(d.last_status.as_ref().unwrap().config_digest, digest);
        }
    }
}

#[test]
fn five_sensors_on_a_worker_is_refused() {
    let mut extra = String::new();
    for i in 0..4 {
        extra += &format!(
            "\n[[sensors]]\nsensor_id = \"x{i}\"\nkind = \"triggered_camera\"\nnode = 1\ntrigger_channel = 0\n"
        );
    }
    let cfg = RunConfig::from_toml_str(&cluster_toml(2, 1, &extra)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut c = Coordinator::new(cfg, dir.path()).unwrap();
    match c.bringup() {
        Err(ClusterError::SensorLimit { node, .. }) => assert_eq!(node, 1),
        other => panic!("{other:?}"),
    }
    assert_eq!(c.phase(), Phase::PoweredOff);
}

#[test]
fn zero_workers_is_legal() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Coordinator::new(config(0, 0), dir.path()).unwrap();
    c.bringup().unwrap();
    assert_eq!(c.phase(), Phase::ClusterUp);
    assert_eq!(c.worker_count(), 0);
    c.time_sync_phase().unwrap();
    c.launch().unwrap();
    c.start_recording("empty").unwrap();
    c.record_for(2.0).unwrap();
    let s = c.stop_recording().unwrap();
    assert!(s.nodes.is_empty());
}

#[test]
fn slow_worker_times_out() {
    let mut cfg = config(3, 0);
    cfg.nodes[2].boot_delay_s = 6.0;
    let dir = tempfile::tempdir().unwrap();
    let mut c = Coordinator::new(cfg, dir.path()).unwrap();
    match c.bringup() {
        Err(ClusterError::HelloTimeout { node, .. }) => assert_eq!(node, 2),
        other => panic!("{other:?}"),
    }
    assert_eq!(c.phase(), Phase::MasterUp);
}

#[test]
fn duplicate_node_rejected() {
    let mut cfg = config(3, 0);
    cfg.nodes[3].node_id = 2;
    let dir = tempfile::tempdir().unwrap();
    let mut c = Coordinator::new(cfg, dir.path()).unwrap();
    assert!(matches!(c.bringup(), Err(ClusterError::DuplicateNode(2))));
}

#[test]
fn ideal_clocks_converge_in_one_round() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Coordinator::new(config(5, 0), dir.path()).unwrap();
    c.bringup().unwrap();
    let reports = c.time_sync_phase().unwrap();
    assert_eq!(reports.len(), 6);
    assert!(reports.iter().all(|r| r.rounds_used() == 1 && r.converged));
    assert_eq!(c.phase(), Phase::TimeSynced);
}

#[test]
fn half_second_offset_converges() {
    let mut cfg = config(3, 0);
    cfg.nodes[2].clock.epoch_offset = 0.5;
    let dir = tempfile::tempdir().unwrap();
    let mut c = Coordinator::new(cfg, dir.path()).unwrap();
    c.bringup().unwrap();
    let r = c.time_sync_phase().unwrap().iter().find(|r| r.node_id == 2).unwrap().clone();
    assert!((r.pre_offset_s - 0.5).abs() < 1e-12);
    assert!(r.post_offset_s.abs() < 1e-3);
    assert!(r.converged);
    assert!(r.rounds_used() <= 3);
}

#[test]
fn asymmetric_link_blocks_sync() {
    let mut cfg = config(3, 0);
    cfg.nodes[1].link.forward_s = 0.010;
    cfg.nodes[1].link.backward_s = 0.001;
    let dir = tempfile::tempdir().unwrap();
    let mut c = Coordinator::new(cfg, dir.path()).unwrap();
    c.bringup().unwrap();
    match c.time_sync_phase() {
        Err(ClusterError::SyncFailed(failed)) => {
            assert_eq!(failed.len(), 1);
            let (node, residual) = failed[0];
            assert_eq!(node, 1);
            assert!((residual.abs() - 0.0045).abs() < 0.0045 * 0.01, "{residual}");
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(c.phase(), Phase::ClusterUp);
    assert!(c
        .events()
        .iter()
        .any(|e| matches!(e, ClusterEvent::NodeDegraded { node_id: 1, .. })));
}

#[test]
fn storage_full_rolls_back() {
    let mut cfg = config(5, 5);
    cfg.nodes[3].storage_capacity_bytes = 0;
    let dir = tempfile::tempdir().unwrap();
    let mut c = ready(cfg, dir.path());
    match c.start_recording("r") {
        Err(ClusterError::Nack { node, op, .. }) => assert_eq!((node, op), (3, "START_REC")),
        other => panic!("{other:?}"),
    }
    assert_eq!(c.phase(), Phase::SensorsUp);
    assert!(!c.board().running);
    for (_, s) in c.poll_status().unwrap() {
        assert_ne!(s.phase, mapbot_core::cluster::wire::WorkerPhase::Recording);
        assert_eq!(s.records, 0);
    }
    assert!(c.collect_chunks(None, None).unwrap().is_empty());
}

#[test]
fn repeated_start_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ready(config(2, 2), dir.path());
    c.start_recording("a").unwrap();
    let before = c.lifecycle().clone();
    let now = c.now_ns();
    assert!(matches!(
        c.start_recording("b"),
        Err(ClusterError::Phase { phase: Phase::Recording, .. })
    ));
    assert_eq!(c.lifecycle(), &before);
    assert_eq!(c.now_ns(), now);
}

#[test]
fn ten_seconds_at_ten_hertz() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ready(config(3, 3), dir.path());
    c.start_recording("r").unwrap();
    c.record_for(10.0).unwrap();
    let s = c.stop_recording().unwrap();
    for id in ["cam1", "cam2", "cam3"] {
        assert_eq!(s.sensor_counts()[id], 100, "{id}");
    }
    assert!(s.last_trigger_ns.unwrap() <= s.stop_rec_dispatch_ns);
    assert!(s.trigger_stop_ns < s.stop_rec_dispatch_ns);
    assert_eq!(c.phase(), Phase::SensorsUp);
}

#[test]
fn stop_before_any_trigger() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(2, 2);
    cfg.syncboard.channels[0].offset_s = 0.05;
    let mut c = ready(cfg, dir.path());
    c.start_recording("r").unwrap();
    let s = c.stop_recording().unwrap();
    assert!(s.sensor_counts().values().all(|&n| n == 0));
    assert!(s.last_trigger_ns.is_none());
}

#[test]
fn last_trigger_precedes_dispatch_over_many_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(2, 2);
    cfg.syncboard.channels.push(TriggerChannelConfig::new(1, 997.0, mapbot_core::trigger::Polarity::Both));
    cfg.sensors[1].trigger_channel = Some(1);
    let mut c = ready(cfg, dir.path());
    for k in 0..8 {
        c.start_recording(&format!("r{k}")).unwrap();
        c.record_for(0.137 * k as f64).unwrap();
        let s = c.stop_recording().unwrap();
        if let Some(last) = s.last_trigger_ns {
            assert!(last < s.trigger_stop_ns);
            assert!(last <= s.stop_rec_dispatch_ns);
        }
    }
    let phases: Vec<_> = c.lifecycle().transitions.iter().map(|t| t.0).collect();
    assert_eq!(phases.iter().filter(|p| **p == Phase::Recording).count(), 8);
    let times: Vec<_> = c.lifecycle().transitions.iter().map(|t| t.1).collect();
    assert!(times.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn exactly_once_against_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(3, 3);
    cfg.syncboard.channels.push(TriggerChannelConfig {
        offset_s: 0.0013,
        ..TriggerChannelConfig::new(1, 29.97, mapbot_core::trigger::Polarity::Falling)
    });
    cfg.sensors[2].trigger_channel = Some(1);
    cfg.cluster.chunk_max_span_s = 1.0;
    let mut c = ready(cfg, dir.path());
    c.start_recording("r").unwrap();
    c.record_for(3.3).unwrap();
    let s = c.stop_recording().unwrap();
    let events = c.board().channel_events(1, s.trigger_start_ns, s.trigger_stop_ns).unwrap();
    assert!(events.iter().all(|e| e.edge == Edge::Falling));
    assert_eq!(s.sensor_counts()["cam3"], events.len() as u64);
    let chunks = c.collect_chunks(None, Some("cam3")).unwrap();
    assert!(chunks.len() >= 3);
    let stored: usize = chunks.iter().map(|c| c.result.as_ref().unwrap().records.len()).sum();
    assert_eq!(stored, events.len());
}

#[test]
fn collect_flags_exactly_the_corrupt_chunk() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(2, 2);
    cfg.cluster.chunk_max_span_s = 1.0;
    let mut c = ready(cfg, dir.path());
    c.start_recording("r").unwrap();
    assert!(matches!(
        c.collect_chunks(None, None),
        Err(ClusterError::Phase { phase: Phase::Recording, .. })
    ));
    c.record_for(2.5).unwrap();
    let s = c.stop_recording().unwrap();
    let all = c.collect_chunks(None, None).unwrap();
    let cam1: Vec<_> = all.iter().filter(|c| c.sensor_id == "cam1").collect();
    assert_eq!(cam1.len(), 3);
    let sealed: u32 = s.nodes.iter().flat_map(|(_, n)| &n.sensors).map(|x| x.chunks).sum();
    assert_eq!(all.len() as u32, sealed);
    assert!(all.iter().all(|c| !c.is_corrupt()));

    let victim = &cam1[1].path;
    let mut bytes = std::fs::read(victim).unwrap();
    bytes[20] ^= 1;
    std::fs::write(victim, bytes).unwrap();
    let again = c.collect_chunks(None, None).unwrap();
    let corrupt: Vec<_> = again.iter().filter(|c| c.is_corrupt()).map(|c| &c.path).collect();
    assert_eq!(corrupt, vec![victim]);

    let only = c.collect_chunks(None, Some("cam2")).unwrap();
    assert!(!only.is_empty() && only.iter().all(|c| c.sensor_id == "cam2" && c.node_id == 2));
    let node1 = c.collect_chunks(Some(1), None).unwrap();
    assert!(node1.iter().all(|c| c.node_id == 1));
}

#[test]
fn flush_failure_degrades_and_retains() {
    let mut cfg = config(3, 3);
    cfg.nodes[2].fail_flush = true;
    let dir = tempfile::tempdir().unwrap();
    let mut c = ready(cfg, dir.path());
    c.start_recording("r").unwrap();
    c.record_for(1.0).unwrap();
    let s = c.stop_recording().unwrap();
    let degraded = s.degraded_nodes();
    assert_eq!(degraded.len(), 1);
    assert_eq!(degraded[0].0, 2);
    let cam2 = s.nodes.iter().find(|(id, _)| *id == 2).unwrap().1.sensors[0].clone();
    assert_eq!(cam2.retained, 10);
    assert_eq!(s.sensor_counts()["cam1"], 10);
    assert!(c.registry()[&2].degraded.is_some());
    assert!(c.collect_chunks(Some(2), None).unwrap().is_empty());
}

#[test]
fn heartbeats_once_per_second() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ready(config(2, 2), dir.path());
    c.start_recording("r").unwrap();
    c.record_for(5.0).unwrap();
    let beats: Vec<_> = c
        .events()
        .iter()
        .filter_map(|e| match e {
            ClusterEvent::Heartbeat { node_id: 1, at_ns, .. } => Some(*at_ns),
            _ => None,
        })
        .collect();
    assert_eq!(beats.len(), 5);
    assert!(beats.windows(2).all(|w| w[1] - w[0] == 1_000_000_000));
}

#[test]
fn drop_ledger_matches_restoration() {
    let mut cfg = config(3, 3);
    cfg.sensors[1].drop_probability = 0.2;
    cfg.sensors[1].report_jitter_sd = 0.0005;
    let dir = tempfile::tempdir().unwrap();
    let mut c = ready(cfg.clone(), dir.path());
    c.start_recording("r").unwrap();
    c.record_for(20.0).unwrap();
    let s = c.stop_recording().unwrap();
    let chunks = c.collect_chunks(None, None).unwrap();
    let reports = restore_all(&cfg, c.board(), &chunks).unwrap();
    let ledger = s.injected_drops();
    assert!(!ledger["cam2"].is_empty());
    for r in &reports {
        assert_eq!(r.dropped_trigger_indices, ledger[&r.sensor_id], "{}", r.sensor_id);
    }
}

#[test]
fn collection_runs_are_byte_identical() {
    let cfg = config(4, 4);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_collection(&cfg, a.path(), 3.0).unwrap();
    run_collection(&cfg, b.path(), 3.0).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.keys().any(|k| k.ends_with(".swch")));
    assert_eq!(ta, tb);
    let err = run_collection(&cfg, a.path(), 3.0).unwrap_err();
    assert_eq!(err.phase, Phase::PoweredOff);
}

#[test]
fn zero_duration_run_is_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_collection(&config(2, 2), dir.path(), 0.0).unwrap();
    assert!(out.summary.sensor_counts().values().all(|&n| n == 0));
    for f in ["schedule.csv", "restoration.txt", "summary.txt", "injected_drops.txt", "lifecycle.txt", "sync.txt", "chunks.txt"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}
