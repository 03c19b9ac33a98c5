//! End-to-end stages driven by a [`RunConfig`]; each reads and writes
//! artifacts under a work directory.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::checkpoint::write_atomic;
use crate::config::RunConfig;
use crate::datagen::{self, build_dataset, gen_real, load_split, DatasetManifest};
use crate::dire::{DireTriple, InputMode, Split};
use crate::epsnet::{train_diffusion, EpsModel, TrainConfig};
use crate::error::{Error, Result};
use crate::evalkit::{self, AblationPlan, Condition, EvalReport, TripleSource};
use crate::forensics::{train_detector, DetectorModel, DetectorTrace};
use crate::image::ImageTensor;

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).expect("value serializes") + "\n";
    write_atomic(path, text.as_bytes())
}

/// Train one ε-model per configured seed on the procedural training pool.
pub fn train_diffusion_models(cfg: &RunConfig, workdir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let d = &cfg.diffusion;
    let sched = cfg.schedule.build()?;
    let shape = d.model.image_shape();
    let mut pool = gen_real(&cfg.dataset.family, shape, d.pool_seed, d.pool_size)?;
    let mut out = Vec::new();
    for (i, &s) in d.seeds.iter().enumerate() {
        info!("training diffusion model {i} (seed {s}) for {} steps", d.steps);
        let model = EpsModel::init(d.model.clone(), sched.clone(), s)?;
        let train_cfg = TrainConfig {
            batch_size: d.batch_size,
            lr: d.lr,
            steps: d.steps,
            seed: s,
        };
        let (model, losses) = train_diffusion(model, &mut pool, &train_cfg)?;
        let path = cfg.model_path(workdir, i);
        model.save(&path)?;
        write_json(&path.with_extension("losses.json"), &losses)?;
        out.push(path);
    }
    Ok(out)
}

pub fn load_models(cfg: &RunConfig, workdir: &Path) -> Result<Vec<EpsModel>> {
    (0..cfg.diffusion.seeds.len())
        .map(|i| EpsModel::load(&cfg.model_path(workdir, i)))
        .collect()
}

/// Sample, reconstruct and persist every configured sampler's triples.
pub fn build_dataset_stage(cfg: &RunConfig, workdir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let models = load_models(cfg, workdir)?;
    let sched = models[0].schedule().clone();
    let root = workdir.join(&cfg.paths.dataset);
    build_dataset(&models, &sched, cfg.diffusion.model.image_shape(), &cfg.dataset, &root)
}

pub fn load_manifest(cfg: &RunConfig, workdir: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(&workdir.join(&cfg.paths.dataset))
}

/// Train and save the detector for `mode` on the configured train tags.
pub fn train_detector_stage(cfg: &RunConfig, workdir: &Path, mode: InputMode) -> Result<(PathBuf, DetectorTrace)> {
    cfg.validate()?;
    let manifest = load_manifest(cfg, workdir)?;
    let tags = &cfg.detector.train_tags;
    let train = load_split(&manifest, Split::Train, Some(tags))?;
    let val = load_split(&manifest, Split::Val, Some(tags))?;
    let (model, trace) = fit_detector(cfg, mode, &train, &val)?;
    let path = cfg.detector_path(workdir, mode);
    model.save(&path)?;
    write_json(&path.with_extension("trace.json"), &trace)?;
    Ok((path, trace))
}

pub fn fit_detector(
    cfg: &RunConfig,
    mode: InputMode,
    train: &[DireTriple],
    val: &[DireTriple],
) -> Result<(DetectorModel, DetectorTrace)> {
    info!("training {mode} detector on {} triples", train.len());
    train_detector(train, val, cfg.detector_config(mode), &cfg.detector.train)
}

/// Evaluate saved detectors over every eval tag × perturbation.
pub fn eval_stage(cfg: &RunConfig, workdir: &Path, modes: &[InputMode]) -> Result<(PathBuf, EvalReport)> {
    cfg.validate()?;
    let manifest = load_manifest(cfg, workdir)?;
    let models = load_models(cfg, workdir)?;
    let sched = models[0].schedule().clone();
    let mut source = TripleSource::new(&manifest, &models[0], &sched);
    let conditions: Vec<Condition> = cfg
        .eval
        .perturbations
        .iter()
        .flat_map(|&p| {
            cfg.eval_tags()
                .into_iter()
                .map(move |t| Condition::new(t, cfg.dataset.recon_steps, p))
        })
        .collect();
    let mut report = EvalReport::default();
    for &mode in modes {
        let detector = DetectorModel::load(&cfg.detector_path(workdir, mode))?;
        report.extend(evalkit::evaluate(
            &detector,
            mode.as_str(),
            &mut source,
            &conditions,
            cfg.eval.split,
            cfg.detector.train.seed,
        )?);
    }
    let name: Vec<&str> = modes.iter().map(|m| m.as_str()).collect();
    let path = workdir
        .join(&cfg.paths.reports)
        .join(format!("eval-{}.jsonl", name.join("-")));
    report.write(&path)?;
    Ok((path, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Steps,
    Abs,
    InputMode,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steps" => Ok(Ablation::Steps),
            "abs" => Ok(Ablation::Abs),
            "input-mode" => Ok(Ablation::InputMode),
            _ => Err(Error::InvalidParameter(format!("unknown ablation {s:?}"))),
        }
    }
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Steps => "steps",
            Ablation::Abs => "abs",
            Ablation::InputMode => "input-mode",
        }
    }
}

pub fn ablate_stage(cfg: &RunConfig, workdir: &Path, kind: Ablation) -> Result<(PathBuf, EvalReport)> {
    cfg.validate()?;
    let manifest = load_manifest(cfg, workdir)?;
    let models = load_models(cfg, workdir)?;
    let sched = models[0].schedule().clone();
    let mut source = TripleSource::new(&manifest, &models[0], &sched);
    let plan = AblationPlan {
        train_tags: cfg.detector.train_tags.clone(),
        eval_tags: cfg.ablation_tags(),
        seed: cfg.detector.train.seed,
    };
    let mut factory =
        |mode: InputMode, train: &[DireTriple], val: &[DireTriple]| fit_detector(cfg, mode, train, val).map(|(m, _)| m);
    let report = match kind {
        Ablation::Steps => evalkit::ablate_steps(&mut factory, &mut source, &plan, &cfg.ablation.steps)?,
        Ablation::Abs => evalkit::ablate_abs(&mut factory, &mut source, &plan)?,
        Ablation::InputMode => evalkit::ablate_input_mode(&mut factory, &mut source, &plan, &cfg.ablation.modes)?,
    };
    let path = workdir
        .join(&cfg.paths.reports)
        .join(format!("ablate-{}.jsonl", kind.as_str()));
    report.write(&path)?;
    Ok((path, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Analysis {
    Fft,
    Noise,
}

impl std::str::FromStr for Analysis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fft" => Ok(Analysis::Fft),
            "noise" => Ok(Analysis::Noise),
            _ => Err(Error::InvalidParameter(format!("unknown analysis {s:?}"))),
        }
    }
}

/// Render the spectrum or noise pattern of every `.dtf` tensor under
/// `input` (sorted by path) as PNGs, plus their pixelwise mean.
pub fn analyze_stage(cfg: &RunConfig, workdir: &Path, kind: Analysis, input: &Path) -> Result<PathBuf> {
    let input = workdir.join(input);
    let mut files = Vec::new();
    collect_tensors(&input, &mut files)?;
    files.sort();
    if files.is_empty() {
        return Err(Error::Empty(format!("no .dtf files under {}", input.display())));
    }
    let name = match kind {
        Analysis::Fft => "fft",
        Analysis::Noise => "noise",
    };
    let out_dir = workdir.join(&cfg.paths.analysis).join(name);
    let mut sum: Option<ImageTensor> = None;
    for f in &files {
        let img = datagen::read_tensor(f)?;
        let view = match kind {
            Analysis::Fft => evalkit::fft_spectrum(&img),
            Analysis::Noise => evalkit::noise_pattern(&img),
        };
        let rel = f.strip_prefix(&input).unwrap_or(f).with_extension("png");
        datagen::write_png(&out_dir.join(rel), &evalkit::normalize_for_export(&view), -1.0, 1.0)?;
        sum = Some(match sum {
            None => view,
            Some(s) => s.zip_map(&view, |a, b| a + b)?,
        });
    }
    let mean = sum.expect("at least one file").map(|v| v / files.len() as f32);
    datagen::write_png(
        &out_dir.join("mean.png"),
        &evalkit::normalize_for_export(&mean),
        -1.0,
        1.0,
    )?;
    Ok(out_dir)
}

fn collect_tensors(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_tensors(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "dtf") {
            out.push(path);
        }
    }
    Ok(())
}
