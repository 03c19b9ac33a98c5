//! The full stage chain on a tiny configuration: every stage runs, artifacts
//! validate, and a second run in a fresh directory is byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use dire_core::datagen::SplitCounts;
use dire_core::evalkit::Perturbation;
use dire_core::pipeline::{self, Ablation, Analysis};
use dire_core::{EpsConfig, InputMode, RunConfig, Split};

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
    c.diffusion.steps = 30;
    c.diffusion.batch_size = 8;
    c.diffusion.pool_size = 32;
    c.dataset.recon_steps = 4;
    for s in &mut c.dataset.samplers {
        s.counts = if s.tag == "ddim20" {
            SplitCounts {
                train: 8,
                val: 4,
                test: 4,
            }
        } else {
            SplitCounts {
                train: 0,
                val: 0,
                test: 4,
            }
        };
    }
    c.detector.crop = 6;
    c.detector.width = 2;
    c.detector.blocks = 2;
    c.detector.train.steps = 6;
    c.detector.train.eval_every = 3;
    c.detector.train.batch_size = 4;
    c.eval.perturbations = vec![Perturbation::Identity, Perturbation::Jpeg { quality: 65 }];
    c.ablation.steps = vec![2, 4];
    c.ablation.modes = vec![InputMode::Rgb, InputMode::Dire];
    c
}

fn run_all(cfg: &RunConfig, wd: &Path) {
    pipeline::train_diffusion_models(cfg, wd).unwrap();
    let m = pipeline::build_dataset_stage(cfg, wd).unwrap();
    m.validate().unwrap();
    for mode in [InputMode::Dire, InputMode::Rgb] {
        pipeline::train_detector_stage(cfg, wd, mode).unwrap();
    }
    let (_, report) = pipeline::eval_stage(cfg, wd, &[InputMode::Dire, InputMode::Rgb]).unwrap();
    assert_eq!(report.cells.len(), 2 * 2 * 5);
    for c in &report.cells {
        assert_eq!(c.n_samples, 8);
        assert_eq!(c.split, Split::Test);
        let (acc, ap) = (c.acc.unwrap(), c.ap.unwrap());
        assert!((0.0..=100.0).contains(&acc) && (0.0..=100.0).contains(&ap));
    }
    for kind in [Ablation::Steps, Ablation::Abs, Ablation::InputMode] {
        let (_, r) = pipeline::ablate_stage(cfg, wd, kind).unwrap();
        assert!(!r.cells.is_empty());
    }
    let out = pipeline::analyze_stage(cfg, wd, Analysis::Fft, Path::new("dataset/ddpm")).unwrap();
    assert!(out.join("mean.png").exists());
    pipeline::analyze_stage(cfg, wd, Analysis::Noise, Path::new("dataset/ddim20")).unwrap();
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn stages_run_and_reproduce_bytewise() {
    let cfg = tiny_config();
    cfg.validate().unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all(&cfg, a.path());
    run_all(&cfg, b.path());
    let fa = files(a.path());
    assert_eq!(fa, files(b.path()));
    assert!(fa.len() > 100);
    for f in &fa {
        assert!(
            fs::read(a.path().join(f)).unwrap() == fs::read(b.path().join(f)).unwrap(),
            "{} differs",
            f.display()
        );
    }
}

#[test]
fn missing_artifacts_are_errors() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    assert!(pipeline::build_dataset_stage(&cfg, dir.path()).is_err());
    assert!(pipeline::train_detector_stage(&cfg, dir.path(), InputMode::Dire).is_err());
    assert!(pipeline::analyze_stage(&cfg, dir.path(), Analysis::Fft, Path::new("nothing")).is_err());
}
