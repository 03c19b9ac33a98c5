use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dire_core::datagen::SplitCounts;
use dire_core::evalkit::Perturbation;
use dire_core::{EpsConfig, RunConfig};

fn dire(wd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dire"))
        .arg("--workdir")
        .arg(wd)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::compact();
    c.schedule.steps = 60;
    c.diffusion.model = EpsConfig {
        channels: 1,
        image_size: 8,
        width: 4,
        levels: 1,
        time_dim: 8,
    };
    c.diffusion.steps = 20;
    c.diffusion.batch_size = 8;
    c.diffusion.pool_size = 16;
    c.dataset.recon_steps = 4;
    for s in &mut c.dataset.samplers {
        s.counts = if s.tag == "ddim20" {
            SplitCounts {
                train: 6,
                val: 2,
                test: 3,
            }
        } else {
            SplitCounts {
                train: 0,
                val: 0,
                test: 3,
            }
        };
    }
    c.detector.crop = 6;
    c.detector.width = 2;
    c.detector.blocks = 2;
    c.detector.train.steps = 4;
    c.detector.train.eval_every = 2;
    c.detector.train.batch_size = 4;
    c.eval.perturbations = vec![Perturbation::Identity];
    c
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_flag_prints_usage_to_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let out = dire(dir.path(), &["eval", "--frobnicate"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn failures_are_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dire(dir.path(), &["--profile", "compact", "build-dataset"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["error"], "io");
    assert!(v["message"].as_str().unwrap().contains("eps-0.dirm"));

    let out = dire(dir.path(), &["--set", "diffusion.nope=3", "train-diffusion"]);
    assert!(!out.status.success());
    let v: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(v["error"], "invalid_parameter");
}

#[test]
fn eval_twice_is_byte_identical_and_configs_replay() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    fs::write(wd.join("tiny.json"), tiny_config().to_json()).unwrap();
    let base = ["--config", "tiny.json"];
    for cmd in [
        &["train-diffusion"][..],
        &["build-dataset"],
        &["train-detector", "--mode", "dire"],
    ] {
        ok(&dire(wd, &[&base[..], cmd].concat()));
    }
    let first = dire(wd, &[&base[..], &["eval"]].concat());
    ok(&first);
    let report = wd.join("reports/eval-dire.jsonl");
    let bytes = fs::read(&report).unwrap();
    let stdout = String::from_utf8_lossy(&first.stdout);
    assert!(stdout.contains("ddim20") && stdout.contains("ddim20-m2"));

    // Replay from the stored config with a different worker count.
    let stored = wd.join("reports/eval-dire.run_config.json");
    assert!(stored.exists());
    let again = dire(wd, &["--config", stored.to_str().unwrap(), "--jobs", "2", "eval"]);
    ok(&again);
    assert_eq!(fs::read(&report).unwrap(), bytes);
    assert_eq!(again.stdout, first.stdout);

    let cfg = RunConfig::from_json(&fs::read_to_string(wd.join("models/run_config.json")).unwrap()).unwrap();
    assert_eq!(cfg.diffusion.steps, 20);
}
