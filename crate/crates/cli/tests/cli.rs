use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_acoustic-fusion"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

/// Renders a short two-second scene with camera frames into `dir`.
fn simulate(dir: &Path) {
    let scene = dir.join("scene.in.toml");
    std::fs::write(
        &scene,
        "duration = 2.0\n[[sources]]\nazimuth = -20.0\ndistance = 2.0\nsignal = { kind = \"white\" }\n[noise]\nsnr_db = 20.0\n",
    )
    .unwrap();
    let out = run(bin()
        .args(["simulate", "--seed", "4", "--fps", "15"])
        .arg("--scene")
        .arg(&scene)
        .arg("--out")
        .arg(dir)
        .arg("--camera")
        .arg(configs().join("camera.toml")));
    assert!(out.status.success());
}

#[test]
fn simulate_then_run_offline_and_streaming() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    for file in ["audio.wav", "ground_truth.csv", "geometry.toml", "pipeline.toml", "frames.csv", "camera.toml"] {
        assert!(dir.path().join(file).exists(), "{file} missing");
    }
    let config = dir.path().join("pipeline.toml");
    let offline = run(bin().arg("run").arg("--config").arg(&config));
    assert!(offline.status.success());
    let stdout = String::from_utf8_lossy(&offline.stdout);
    assert!(stdout.contains("real-time factor"), "{stdout}");

    let streamed = dir.path().join("streamed");
    let stream = run(bin().args(["run", "--stream"]).arg("--config").arg(&config).arg("--out").arg(&streamed));
    assert!(stream.status.success());
    let results = dir.path().join("results");
    for file in ["ssl.jsonl", "weights.csv", "rects.jsonl", "keypoints_filtered.csv"] {
        let a = std::fs::read(results.join(file)).unwrap();
        let b = std::fs::read(streamed.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between offline and streaming");
    }
    let masks = std::fs::read_dir(results.join("masks")).unwrap().count();
    assert_eq!(masks, 30);
}

#[test]
fn overrides_and_audio_only_mode() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let out_dir = dir.path().join("audio_only");
    std::fs::write(dir.path().join("audio_only.toml"), "[inputs]\naudio = \"audio.wav\"\n").unwrap();
    let out = run(bin()
        .arg("run")
        .arg("--config")
        .arg(dir.path().join("audio_only.toml"))
        .args(["--set", "clustering.delta=0.5", "--set", "estimator.forgetting=0.95"])
        .arg("--out")
        .arg(&out_dir));
    assert!(out.status.success());
    assert!(out_dir.join("ssl.jsonl").exists());
    assert!(!out_dir.join("masks").exists());

    let flagged = dir.path().join("flagged");
    let out = run(bin()
        .arg("run")
        .arg("--config")
        .arg(dir.path().join("audio_only.toml"))
        .args(["--window", "512", "--hop", "256", "--noise-floor-factor", "2.0"])
        .arg("--out")
        .arg(&flagged));
    assert!(out.status.success());
    // Two seconds at a 256-sample hop.
    let rows = std::fs::read_to_string(flagged.join("weights.csv")).unwrap().lines().count();
    assert!((120..=126).contains(&rows), "{rows}");
    let bad_hop = run(bin().arg("run").arg("--config").arg(dir.path().join("audio_only.toml")).args(["--hop", "0"]));
    assert_eq!(bad_hop.status.code(), Some(2));
}

#[test]
fn bench_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let report = dir.path().join("bench.json");
    let out = run(bin()
        .args(["bench", "--repetitions", "2"])
        .arg("--config")
        .arg(dir.path().join("pipeline.toml"))
        .arg("--report")
        .arg(&report));
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["repetitions"], 2);
    assert!(json["real_time_factor"].as_f64().unwrap() > 0.0);
    assert!(json["stage_timings"]["dprtf_s"].is_number());
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let config = dir.path().join("pipeline.toml");
    let unknown_key = run(bin().arg("run").arg("--config").arg(&config).args(["--set", "estimator.nonsense=1"]));
    assert_eq!(unknown_key.status.code(), Some(2));
    let bad_range = run(bin().arg("run").arg("--config").arg(&config).args(["--set", "estimator.forgetting=1.5"]));
    assert_eq!(bad_range.status.code(), Some(2));
    let missing = run(bin().arg("run").arg("--config").arg(dir.path().join("nope.toml")));
    assert_eq!(missing.status.code(), Some(2));
    let usage = run(bin().arg("frobnicate"));
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn corrupt_camera_frame_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    // A depth image of the wrong size fails while fusing that frame.
    std::fs::write(dir.path().join("depth/000003.pgm"), b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0").unwrap();
    let out = run(bin().arg("run").arg("--config").arg(dir.path().join("pipeline.toml")));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frame 3"));
}

#[test]
fn all_invalid_depth_still_runs() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    for entry in std::fs::read_dir(dir.path().join("depth")).unwrap() {
        let path = entry.unwrap().path();
        let bytes = std::fs::read(&path).unwrap();
        // Keep the header, zero every sample.
        let header_end = bytes.windows(6).position(|w| w == b"65535\n").unwrap() + 6;
        let mut zeroed = bytes[..header_end].to_vec();
        zeroed.resize(bytes.len(), 0);
        std::fs::write(&path, zeroed).unwrap();
    }
    let out = run(bin().arg("run").arg("--config").arg(dir.path().join("pipeline.toml")));
    assert!(out.status.success());
    assert_eq!(std::fs::read_dir(dir.path().join("results/masks")).unwrap().count(), 30);
}
