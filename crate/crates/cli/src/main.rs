//! `dire`: train the toy diffusion model, build the triplet dataset, train
//! and evaluate detectors, run ablations and analyses.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dire_core::checkpoint::write_atomic;
use dire_core::pipeline::{self, Ablation, Analysis};
use dire_core::{InputMode, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "dire", version, about = "Diffusion reconstruction error detection pipeline")]
struct Cli {
    /// Root for every input and output path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// Start from a stored RunConfig (JSON) instead of a built-in profile.
    #[arg(long, global = true, conflicts_with = "profile")]
    config: Option<PathBuf>,

    /// Built-in settings: `default` or `compact`.
    #[arg(long, global = true)]
    profile: Option<String>,

    /// Override one config field, e.g. `--set diffusion.steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Worker threads; outputs do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the ε-prediction models.
    TrainDiffusion,
    /// Sample images and compute their DIRE triples.
    BuildDataset,
    /// Train a real-vs-generated detector.
    TrainDetector {
        /// Input representation (rgb, rec, dire, rgb_and_dire).
        #[arg(long)]
        mode: Option<InputMode>,
    },
    /// Score saved detectors on every tag and perturbation.
    Eval {
        #[arg(long)]
        mode: Vec<InputMode>,
    },
    /// Retrain and evaluate under one varied factor.
    Ablate {
        /// steps, abs or input-mode
        kind: Ablation,
    },
    /// Render FFT spectra or noise patterns of stored tensors.
    Analyze {
        /// fft or noise
        kind: Analysis,
        /// Directory of .dtf files, relative to the workdir.
        #[arg(long)]
        input: PathBuf,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, &cli.profile) {
        (Some(path), _) => {
            let path = cli.workdir.join(path);
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_json(&text)?
        }
        (None, Some(name)) => RunConfig::profile(name)?,
        (None, None) => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    match &cli.command {
        Command::TrainDetector { mode: Some(m) } => cfg.detector.mode = *m,
        Command::Eval { mode } if !mode.is_empty() => cfg.eval.modes = mode.clone(),
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn save_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    write_atomic(path, cfg.to_json().as_bytes())?;
    Ok(())
}

/// `reports/eval-dire.jsonl` → `reports/eval-dire.run_config.json`
fn config_beside(output: &Path) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
    output.with_file_name(format!("{stem}.run_config.json"))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build_global()
        .context("starting worker pool")?;
    let wd = &cli.workdir;
    match &cli.command {
        Command::TrainDiffusion => {
            let paths = pipeline::train_diffusion_models(&cfg, wd)?;
            save_config(&cfg, &wd.join(&cfg.paths.models).join("run_config.json"))?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::BuildDataset => {
            let m = pipeline::build_dataset_stage(&cfg, wd)?;
            save_config(&cfg, &m.root.join("run_config.json"))?;
            println!("{}", m.root.join(dire_core::datagen::MANIFEST_FILE).display());
        }
        Command::TrainDetector { .. } => {
            let (path, trace) = pipeline::train_detector_stage(&cfg, wd, cfg.detector.mode)?;
            save_config(&cfg, &config_beside(&path))?;
            log::info!(
                "best validation ACC {:.2}% at step {}",
                trace.best_val_acc,
                trace.best_step
            );
            println!("{}", path.display());
        }
        Command::Eval { .. } => {
            let (path, report) = pipeline::eval_stage(&cfg, wd, &cfg.eval_modes())?;
            save_config(&cfg, &config_beside(&path))?;
            print!("{}", report.to_table());
            println!("{}", path.display());
        }
        Command::Ablate { kind } => {
            let (path, report) = pipeline::ablate_stage(&cfg, wd, *kind)?;
            save_config(&cfg, &config_beside(&path))?;
            print!("{}", report.to_table());
            println!("{}", path.display());
        }
        Command::Analyze { kind, input } => {
            let dir = pipeline::analyze_stage(&cfg, wd, *kind, input)?;
            save_config(&cfg, &dir.join("run_config.json"))?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .downcast_ref::<dire_core::Error>()
        .map(|e| e.kind())
        .unwrap_or("error");
    let message = format!("{err:#}");
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
