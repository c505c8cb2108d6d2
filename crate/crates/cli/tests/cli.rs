use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use tw2_core::episode::{Episode, Mark, MarkKind};
use tw2_core::motion::Motion;
use tw2_core::retarget::retarget_neck;
use tw2_core::RobotModel;

fn tw2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tw2"))
        .args(args)
        .env_remove("TW2_BUS_PORT")
        .env_remove("TW2_BRIDGE_PORT")
        .env_remove("TW2_POLICY_ENDPOINT")
        .output()
        .expect("spawn tw2")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &TempDir, name: &str, kind: &str, duration: &str, seed: &str) -> std::path::PathBuf {
    let out = dir.path().join(name);
    ok(tw2(&["gen-motion", "--kind", kind, "--duration", duration, "--seed", seed, "-o", p(&out)]));
    out
}

#[test]
fn missing_model_is_a_config_error() {
    let o = tw2(&["teleop", "--model", "/nonexistent/robot.toml", "--duration", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = tw2(&["gen-motion", "--model", "/nonexistent/robot.toml", "-o", "/tmp/never.bin"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_motion_kind_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("m.bin");
    let o = tw2(&["gen-motion", "--kind", "cartwheel", "-o", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn malformed_config_file_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "duration_s = \"forever\"\n").unwrap();
    let o = tw2(&["teleop", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_motion_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let a = gen(&dir, "a.bin", "walk", "3", "7");
    let b = gen(&dir, "b.bin", "walk", "3", "7");
    let c = gen(&dir, "c.bin", "walk", "3", "8");
    let (a, b, c) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), std::fs::read(c).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn crouch_file_lowers_the_pelvis() {
    let dir = TempDir::new().unwrap();
    let m = Motion::read(gen(&dir, "crouch.bin", "crouch", "4", "1")).unwrap();
    let z = |i: usize| m.samples[i].frame.get("Pelvis").unwrap().position.z;
    assert!(z(0) - z(m.len() / 2) >= 0.2);
}

#[test]
fn head_scan_file_sweeps_the_neck() {
    let dir = TempDir::new().unwrap();
    let model = RobotModel::demo();
    let m = Motion::read(gen(&dir, "scan.bin", "head-scan", "8", "2")).unwrap();
    let yaws: Vec<f64> = m
        .samples
        .iter()
        .map(|s| retarget_neck(&s.frame, model.neck()).unwrap().target.yaw)
        .collect();
    let max = yaws.iter().cloned().fold(f64::MIN, f64::max);
    let min = yaws.iter().cloned().fold(f64::MAX, f64::min);
    assert!((max - 0.6).abs() < 1e-3 && (min + 0.6).abs() < 1e-3, "{min} {max}");
}

#[test]
fn local_latency_probe_reports_percentiles() {
    let out = ok(tw2(&["latency", "--local", "--count", "50", "--interval-ms", "2"]));
    assert!(out.contains("p99"), "{out}");
}

#[test]
fn recorded_teleop_session_flows_through_the_tools() {
    let dir = TempDir::new().unwrap();
    let rec = dir.path().join("session.tw2e");
    let out = ok(tw2(&[
        "teleop",
        "--duration",
        "3",
        "--bus-port",
        "0",
        "--record",
        p(&rec),
        "--motion",
        "walk",
        "--seed",
        "3",
    ]));
    assert!(!out.is_empty());

    let mut ep = Episode::read(&rec).unwrap();
    assert!(ep.len() >= 60, "{} records", ep.len());
    let t: Vec<u64> = ep.records.iter().map(|r| r.timestamp).collect();
    for (i, kind) in [
        (5, MarkKind::EpisodeStart),
        (25, MarkKind::EpisodeEnd),
        (30, MarkKind::EpisodeStart),
        (40, MarkKind::Failure),
        (50, MarkKind::EpisodeEnd),
    ] {
        ep.add_mark(Mark::new(t[i], kind));
    }
    let marked = dir.path().join("marked.tw2e");
    ep.write(&marked).unwrap();

    let parts_dir = dir.path().join("parts");
    let seg = ok(tw2(&["segment", p(&marked), "--out-dir", p(&parts_dir)]));
    for m in &ep.marks {
        assert!(seg.contains(&m.timestamp.to_string()), "{seg}");
    }
    assert!(seg.contains(&format!("segment 0: 21 records, {}..={}", t[5], t[25])), "{seg}");
    assert!(!seg.contains("segment 1:"), "{seg}");
    assert!(seg.contains("dropped: "), "{seg}");
    let parts: Vec<_> = std::fs::read_dir(&parts_dir).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(parts.len(), 1);
    assert_eq!(Episode::read(&parts[0]).unwrap().len(), 21);

    let filtered = dir.path().join("filtered.tw2e");
    let f = ok(tw2(&["filter", p(&rec), "-o", p(&filtered)]));
    assert!(f.contains(&format!("input {}", ep.len())), "{f}");
    let back = Episode::read(&filtered).unwrap();
    assert!(back.len() <= ep.len() && !back.is_empty());

    let stats = dir.path().join("stats.json");
    let s = ok(tw2(&["stats", p(&rec), p(&filtered), "--out", p(&stats)]));
    assert_eq!(s.lines().count(), 1 + ep.header.layout.dim());
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    assert_eq!(json["offset"].as_array().unwrap().len(), ep.header.layout.dim());
}
