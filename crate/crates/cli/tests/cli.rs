use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn demo() -> PathBuf {
    root().join("configs/demo.toml")
}

fn mapbot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mapbot")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Demo config with `edit` applied to its text, written into `dir`.
fn edited_demo(dir: &Path, edit: impl FnOnce(String) -> String) -> PathBuf {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, edit(std::fs::read_to_string(demo()).unwrap())).unwrap();
    path
}

#[test]
fn demo_config_is_clean() {
    let o = mapbot(&["validate", p(&demo())]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("0 error(s), 0 warning(s)"));
}

#[test]
fn out_of_range_channel_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited_demo(dir.path(), |t| t.replacen("channel_id = 1,", "channel_id = 13,", 1));
    let o = mapbot(&["validate", p(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("channel"), "{}", stdout(&o));
    assert_eq!(code(&mapbot(&["validate", "/no/such/file.toml"])), 2);
}

#[test]
fn bad_flags_exit_two() {
    assert_eq!(code(&mapbot(&["run"])), 2);
    assert_eq!(code(&mapbot(&["no-such-command"])), 2);
    let o = mapbot(&["run", "--config", p(&demo()), "--duration", "-1", "--out", "/tmp/never"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn every_subcommand_has_help() {
    let cmds: &[&[&str]] = &[
        &[],
        &["validate"],
        &["run"],
        &["trigger", "schedule"],
        &["nmea", "encode"],
        &["nmea", "decode"],
        &["postproc", "restore"],
        &["analysis", "beams"],
        &["analysis", "plane"],
        &["analysis", "pixels"],
        &["analysis", "flags"],
        &["analysis", "plot"],
        &["serve"],
        &["cluster", "run"],
        &["cluster", "status"],
        &["cluster", "lifecycle"],
        &["cluster", "advance"],
        &["cluster", "collect"],
    ];
    for c in cmds {
        let mut args = c.to_vec();
        args.push("--help");
        let o = mapbot(&args);
        assert_eq!(code(&o), 0, "{c:?}");
        assert!(stdout(&o).contains("Usage"), "{c:?}");
    }
}

#[test]
fn runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = mapbot(&["run", "--config", p(&demo()), "--duration", "3", "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["summary.txt", "restoration.txt", "schedule.csv", "chunks.txt", "injected_drops.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let o = mapbot(&["run", "--config", p(&demo()), "--duration", "3", "--out", p(&a)]);
    assert_eq!(code(&o), 1, "existing output is refused");
}

#[test]
fn seed_override_changes_the_stream() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    mapbot(&["run", "--config", p(&demo()), "--duration", "2", "--out", p(&a)]);
    mapbot(&["run", "--config", p(&demo()), "--duration", "2", "--out", p(&b), "--seed", "7"]);
    assert_ne!(std::fs::read(a.join("chunks.txt")).unwrap(), std::fs::read(b.join("chunks.txt")).unwrap());
}

#[test]
fn zero_duration_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = mapbot(&["run", "--config", p(&demo()), "--duration", "0", "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("0 dropped triggers"));
    assert!(out.join("summary.txt").is_file());
}

#[test]
fn injected_drops_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited_demo(dir.path(), |t| {
        t.replacen("sensor_id = \"cam01\"\n", "sensor_id = \"cam01\"\ndrop_probability = 0.1\n", 1)
    });
    let out = dir.path().join("o");
    let o = mapbot(&["run", "--config", p(&cfg), "--duration", "20", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rest = std::fs::read_to_string(out.join("restoration.txt")).unwrap();
    let cam = rest.lines().find(|l| l.contains("sensor=cam01")).unwrap();
    assert!(!cam.contains("dropped_count=0 "), "{cam}");
    let ledger = std::fs::read_to_string(out.join("injected_drops.txt")).unwrap();
    let dropped = cam.split("dropped=").nth(1).unwrap().split(' ').next().unwrap();
    assert!(ledger.lines().any(|l| l.contains("sensor=cam01") && l.contains(dropped)), "{ledger}");
}

#[test]
fn restore_from_chunk_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    mapbot(&["run", "--config", p(&demo()), "--duration", "4", "--out", p(&out)]);
    let cam_dir = out.join("chunks/node_01/cam01");
    let mut chunks: Vec<PathBuf> = std::fs::read_dir(&cam_dir).unwrap().map(|e| e.unwrap().path()).collect();
    chunks.sort();
    let mut args = vec!["postproc", "restore", "--triggers"];
    let sched = out.join("schedule.csv");
    args.push(p(&sched));
    args.extend(["--channel", "0", "--records"]);
    args.extend(chunks.iter().map(|c| p(c)));
    let o = mapbot(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("total_triggers=40 matched=40 dropped_count=0"), "{}", stdout(&o));
}

#[test]
fn gprmc_codec() {
    let o = mapbot(&["nmea", "decode", "$GPRMC,123519,A,4807.038,N,01131.000,E,022.4,084.4,230394,003.1,W*6A"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("utc=12:35:19.000"));
    let o = mapbot(&["nmea", "decode", "$GPRMC,123519,A,4807.038,N,01131.000,E,022.4,084.4,230394,003.1,W*6B"]);
    assert_eq!(code(&o), 1);

    let dir = tempfile::tempdir().unwrap();
    let fields = dir.path().join("f.json");
    let o = mapbot(&["nmea", "decode", "--json", "$GPRMC,123519,A,4807.038,N,01131.000,E,022.4,084.4,230394,003.1,W*6A"]);
    std::fs::write(&fields, &o.stdout).unwrap();
    let o = mapbot(&["nmea", "encode", "--fields", p(&fields)]);
    assert_eq!(stdout(&o), "$GPRMC,123519,A,4807.038,N,01131.000,E,022.4,084.4,230394,003.1,W*6A\r\n");
}

#[test]
fn trigger_schedule_csv() {
    let o = mapbot(&["trigger", "schedule", "--frequency", "10", "--end", "1"]);
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    assert_eq!(s.lines().count(), 11);
    assert_eq!(s.lines().nth(10).unwrap(), "0,900000000,rising,9");
    let o = mapbot(&["trigger", "schedule", "--config", p(&demo()), "--end", "0.1"]);
    assert_eq!(stdout(&o).lines().count(), 1 + 1 + 4);
    assert_eq!(code(&mapbot(&["trigger", "schedule", "--frequency", "2000", "--end", "1"])), 2);
}

#[test]
fn flag_tables_reproduce() {
    for t in ["interference_precision.csv", "plane_accuracy.csv", "depth_difference.csv"] {
        let o = mapbot(&["analysis", "flags", "--table", p(&root().join("fixtures").join(t))]);
        assert_eq!(code(&o), 0, "{t}: {}", stdout(&o));
        assert!(!stdout(&o).contains("match=false"));
    }
}

#[test]
fn plane_analysis_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let ply = |name: &str, jitter: f64| {
        let path = dir.path().join(name);
        let mut s = String::from("ply\nformat ascii 1.0\nelement vertex 400\nproperty float x\nproperty float y\nproperty float z\nend_header\n");
        for i in 0..400 {
            let z = 2.0 + jitter * (((i * 7919) % 101) as f64 / 100.0 - 0.5);
            s += &format!("{} {} {z}\n", i % 20, i / 20);
        }
        std::fs::write(&path, s).unwrap();
        path
    };
    let (a, b) = (ply("a.ply", 0.01), ply("b.ply", 0.02));
    let o = mapbot(&["analysis", "plane", "--sole", p(&a), "--collective", p(&b)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("change=insignificant"));
    let svg = dir.path().join("h.svg");
    assert_eq!(code(&mapbot(&["analysis", "plot", "--sole", p(&a), "--collective", p(&b), "--out", p(&svg)])), 0);
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn beam_precision_from_points() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, spread: f64| {
        let path = dir.path().join(name);
        let mut s = String::from("t,beam_id,azimuth_deg,elevation_deg,distance_m\n");
        for k in 0..50 {
            for b in 0..4 {
                let d = 5.0 + spread * if k % 2 == 0 { 1.0 } else { -1.0 };
                s += &format!("{},{b},{},{},{d}\n", k as f64 * 0.1, b as f64 * 2.0, b as f64);
            }
        }
        std::fs::write(&path, s).unwrap();
        path
    };
    let (a, b) = (write("a.csv", 0.01), write("b.csv", 0.2));
    let o = mapbot(&["analysis", "beams", "--sole", p(&a), "--collective", p(&b)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("flag=flagged"), "{}", stdout(&o));
    let o = mapbot(&["analysis", "beams", "--sole", p(&a), "--fov", "-1,9,-1,5", "--bin-deg", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("beams=4"), "{}", stdout(&o));
}

struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn gateway_round_trip_through_the_client() {
    use std::io::BufRead;
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let mut child = Command::new(env!("CARGO_BIN_EXE_mapbot"))
        .args(["serve", "--config", p(&demo()), "--addr", "127.0.0.1:0", "--tick-ms", "0", "--store", p(&store)])
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let stderr = child.stderr.take().unwrap();
    let _server = Server(child);
    let mut line = String::new();
    std::io::BufReader::new(stderr).read_line(&mut line).unwrap();
    let url = line.trim().rsplit(' ').next().unwrap().to_string();
    assert!(url.starts_with("http://127.0.0.1:"), "{line}");

    for action in ["bringup", "sync", "launch", "start"] {
        let o = mapbot(&["cluster", "lifecycle", action, "--server", &url]);
        assert_eq!(code(&o), 0, "{action}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = mapbot(&["cluster", "collect", "--server", &url, "--out", p(&dir.path().join("x"))]);
    assert_eq!(code(&o), 1, "collect while recording is refused");
    assert_eq!(code(&mapbot(&["cluster", "advance", "2", "--server", &url])), 0);
    assert_eq!(code(&mapbot(&["cluster", "lifecycle", "stop", "--server", &url])), 0);
    let o = mapbot(&["cluster", "status", "--server", &url]);
    assert!(stdout(&o).contains("\"phase\""), "{}", stdout(&o));

    let out = dir.path().join("mirror");
    let o = mapbot(&["cluster", "collect", "--server", &url, "--out", p(&out), "--sensor", "cam01"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).ends_with(", 0 corrupt\n"), "{}", stdout(&o));
    let mirrored = std::fs::read(out.join("chunks/node_01/cam01/chunk_00000.swch")).unwrap();
    assert_eq!(mirrored, std::fs::read(store.join("chunks/node_01/cam01/chunk_00000.swch")).unwrap());
}
