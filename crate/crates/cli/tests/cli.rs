use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn difrint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_difrint"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn small_clip(dir: &Path, frames: usize) -> (PathBuf, PathBuf) {
    let spec = dir.join("spec.toml");
    fs::write(&spec, format!("frames = {frames}\nwidth = 64\nheight = 48\nsigma = 2.0\nseed = 3\n")).unwrap();
    let clip = dir.join("clip");
    let gt = dir.join("gt.csv");
    let o = difrint(&["synth", "--spec", s(&spec), "--out", s(&clip), "--gt", s(&gt)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (clip, gt)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn every_subcommand_documents_its_flags() {
    let cases: [(&str, &[&str]); 6] = [
        ("synth", &["--spec", "--out", "--gt", "--seed", "--jobs"]),
        ("train", &["--config", "--out", "--checkpoint", "--loss-log", "--seed", "--estimator", "--jobs"]),
        (
            "stabilize",
            &["--in", "--out", "--iterations", "--skip", "--estimator", "--checkpoint", "--jobs", "--report", "--bypass-fusion", "--gt"],
        ),
        ("evaluate", &["--in", "--stab", "--report", "--estimator", "--jobs"]),
        ("respond", &["--iterations", "--skip", "--samples", "--out"]),
        ("flow", &["--a", "--b", "--out", "--estimator"]),
    ];
    for (cmd, flags) in cases {
        let o = difrint(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let text = String::from_utf8_lossy(&o.stdout);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn parse_io_and_pipeline_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&difrint(&["stabilize", "--bogus"])), 2);
    assert_eq!(code(&difrint(&["frobnicate"])), 2);
    let missing = dir.path().join("nope");
    let out = dir.path().join("out");
    let o = difrint(&["stabilize", "--in", s(&missing), "--out", s(&out), "--bypass-fusion"]);
    assert_eq!(code(&o), 3);
    assert_eq!(String::from_utf8_lossy(&o.stderr).trim().lines().count(), 1);

    let (clip, _) = small_clip(dir.path(), 2);
    let o = difrint(&["stabilize", "--in", s(&clip), "--out", s(&out), "--bypass-fusion"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let o = difrint(&["stabilize", "--in", s(&clip), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = difrint(&["stabilize", "--in", s(&clip), "--out", s(&out), "--bypass-fusion", "--estimator", "oracle"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn zero_iterations_reproduce_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let (clip, _) = small_clip(dir.path(), 6);
    let out = dir.path().join("stab");
    let o = difrint(&["stabilize", "--in", s(&clip), "--out", s(&out), "--iterations", "0", "--bypass-fusion"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files(&clip), files(&out));
}

#[test]
fn evaluate_identity_reports_unit_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (clip, _) = small_clip(dir.path(), 20);
    let report = dir.path().join("r.json");
    let o = difrint(&["evaluate", "--in", s(&clip), "--stab", s(&clip), "--report", s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["cropping_ratio", "distortion_value", "stability_score"] {
        assert!(json[key].is_number(), "{key}");
    }
    assert!((json["cropping_ratio"].as_f64().unwrap() - 1.0).abs() < 1e-3);
    assert!((json["distortion_value"].as_f64().unwrap() - 1.0).abs() < 1e-3);
}

#[test]
fn oracle_bypass_output_is_independent_of_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let (clip, gt) = small_clip(dir.path(), 20);
    let run = |jobs: &str, name: &str| {
        let out = dir.path().join(name);
        let report = dir.path().join(format!("{name}.json"));
        let o = difrint(&[
            "stabilize", "--in", s(&clip), "--out", s(&out), "--estimator", "oracle", "--gt", s(&gt),
            "--bypass-fusion", "--iterations", "3", "--jobs", jobs, "--report", s(&report),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        (files(&out), fs::read(&report).unwrap())
    };
    let a = run("1", "a");
    let b = run("3", "b");
    assert_eq!(a, b);
    assert_ne!(a.0, files(&clip));
}

#[test]
fn respond_writes_the_gain_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("curve.csv");
    let o = difrint(&["respond", "--iterations", "2", "--skip", "1", "--samples", "3", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "frequency,gain");
    assert_eq!(rows.len(), 4);
    let gain_at_half_pi: f64 = rows[2].split(',').nth(1).unwrap().parse().unwrap();
    assert!(gain_at_half_pi.abs() < 1e-12);
}

#[test]
fn train_then_stabilize_with_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("train.toml");
    fs::write(
        &config,
        "batch_size = 2\npatch_size = 32\nmax_steps = 2\n\n[fusion]\nwidth = 8\n\n[data]\nsynthetic_clips = 2\n\n[data.synthetic]\nframes = 4\nwidth = 40\nheight = 36\n",
    )
    .unwrap();
    let ckpt = dir.path().join("nets.dfck");
    let log = dir.path().join("loss.csv");
    let o = difrint(&["train", "--config", s(&config), "--out", s(&ckpt), "--loss-log", s(&log), "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&log).unwrap();
    assert!(text.starts_with("epoch,step,l1_out,perceptual_out,l1_int,perceptual_int,total\n"));
    assert_eq!(text.lines().count(), 3);

    let (clip, _) = small_clip(dir.path(), 5);
    let out = dir.path().join("stab");
    let o = difrint(&["stabilize", "--in", s(&clip), "--out", s(&out), "--checkpoint", s(&ckpt), "--iterations", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files(&out).len(), 5);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "max_translation_fraction = 0.7\n").unwrap();
    assert_eq!(code(&difrint(&["train", "--config", s(&bad), "--out", s(&ckpt)])), 2);
}
