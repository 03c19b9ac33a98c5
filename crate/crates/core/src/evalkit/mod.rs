//! Metrics, perturbation robustness, ablation harnesses and image analyses.

pub mod analysis;
pub mod metrics;
pub mod perturb;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

pub use analysis::{fft_spectrum, noise_pattern, normalize_for_export};
pub use metrics::{accuracy, average_precision};
pub use perturb::{gaussian_blur, jpeg_compress, Perturbation};

use crate::checkpoint::write_atomic;
use crate::datagen::{load_split, DatasetManifest};
use crate::ddim::StepSequence;
use crate::dire::{compute_dire_par, DireTriple, InputMode, Split};
use crate::epsnet::EpsPredictor;
use crate::error::{ensure, Error, Result};
use crate::forensics::DetectorModel;
use crate::schedule::NoiseSchedule;

/// One test cell: which images, how they are degraded, how DIRE is computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub sampler_tag: String,
    /// Reconstruction steps used when recomputing DIRE.
    pub steps: usize,
    pub perturbation: Perturbation,
    #[serde(default = "default_abs")]
    pub abs: bool,
}

fn default_abs() -> bool {
    true
}

impl Condition {
    pub fn new(sampler_tag: impl Into<String>, steps: usize, perturbation: Perturbation) -> Self {
        Self {
            sampler_tag: sampler_tag.into(),
            steps,
            perturbation,
            abs: true,
        }
    }
}

/// Metrics for one (detector, condition) pair. Absent cells carry `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub detector: String,
    pub sampler_tag: String,
    pub input_mode: InputMode,
    pub steps: usize,
    pub perturbation: Perturbation,
    pub abs: bool,
    pub split: Split,
    pub seed: u64,
    pub acc: Option<f64>,
    pub ap: Option<f64>,
    pub n_samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
}

impl EvalReport {
    pub fn extend(&mut self, other: EvalReport) {
        self.cells.extend(other.cells);
    }

    /// First cell matching the detector name, tag, steps and perturbation.
    pub fn find(&self, detector: &str, tag: &str, steps: usize, perturbation: Perturbation) -> Option<&EvalCell> {
        self.cells.iter().find(|c| {
            c.detector == detector && c.sampler_tag == tag && c.steps == steps && c.perturbation == perturbation
        })
    }

    /// Line-delimited JSON, one cell per line.
    pub fn to_jsonl(&self) -> String {
        self.cells
            .iter()
            .map(|c| serde_json::to_string(c).expect("cell serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let cells = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { cells })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Grid with one row per (detector, steps, perturbation) and one
    /// ACC/AP column per sampler tag.
    pub fn to_table(&self) -> String {
        let mut tags: Vec<&str> = Vec::new();
        let mut rows: Vec<String> = Vec::new();
        let mut grid: HashMap<(String, &str), String> = HashMap::new();
        for c in &self.cells {
            if !tags.contains(&c.sampler_tag.as_str()) {
                tags.push(&c.sampler_tag);
            }
            let abs = if c.abs { "" } else { " signed" };
            let row = format!(
                "{} [{}] S={} {}{abs}",
                c.detector, c.input_mode, c.steps, c.perturbation
            );
            if !rows.contains(&row) {
                rows.push(row.clone());
            }
            let value = match (c.acc, c.ap) {
                (Some(acc), Some(ap)) => format!("{acc:.1}/{ap:.1}"),
                (Some(acc), None) => format!("{acc:.1}/-"),
                _ => "-".to_string(),
            };
            grid.insert((row, &c.sampler_tag), value);
        }
        let label_w = rows.iter().map(|r| r.len()).max().unwrap_or(0).max("condition".len());
        let col_w = tags.iter().map(|t| t.len()).max().unwrap_or(0).max(11);
        let mut out = format!("{:label_w$}", "condition");
        for t in &tags {
            let _ = write!(out, "  {t:>col_w$}");
        }
        out.push('\n');
        for r in &rows {
            let _ = write!(out, "{r:label_w$}");
            for t in &tags {
                let v = grid.get(&(r.clone(), *t)).map(String::as_str).unwrap_or("");
                let _ = write!(out, "  {v:>col_w$}");
            }
            out.push('\n');
        }
        out
    }
}

/// Loads triples from the manifest and recomputes DIRE when a condition
/// asks for a perturbation, a different step count or signed residuals.
pub struct TripleSource<'a, M> {
    manifest: &'a DatasetManifest,
    reconstructor: &'a M,
    sched: &'a NoiseSchedule,
    stored: HashMap<(String, Split), Vec<DireTriple>>,
    derived: HashMap<(String, Split, usize, String, bool), Vec<DireTriple>>,
}

impl<'a, M: EpsPredictor> TripleSource<'a, M> {
    pub fn new(manifest: &'a DatasetManifest, reconstructor: &'a M, sched: &'a NoiseSchedule) -> Self {
        Self {
            manifest,
            reconstructor,
            sched,
            stored: HashMap::new(),
            derived: HashMap::new(),
        }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        self.manifest
    }

    fn stored(&mut self, tag: &str, split: Split) -> Result<&Vec<DireTriple>> {
        let key = (tag.to_string(), split);
        if !self.stored.contains_key(&key) {
            let triples = load_split(self.manifest, split, Some(std::slice::from_ref(&key.0)))?;
            self.stored.insert(key.clone(), triples);
        }
        Ok(&self.stored[&key])
    }

    /// Triples of `tag`/`split` as seen under `cond`.
    pub fn get(&mut self, split: Split, cond: &Condition) -> Result<Vec<DireTriple>> {
        let stored_steps = self.manifest.info.spec.recon_steps;
        let tag = cond.sampler_tag.as_str();
        if cond.perturbation.is_identity() && cond.steps == stored_steps {
            let abs = cond.abs;
            return self.stored(tag, split)?.iter().map(|t| t.with_abs(abs)).collect();
        }
        let key = (
            tag.to_string(),
            split,
            cond.steps,
            cond.perturbation.to_string(),
            cond.abs,
        );
        if let Some(v) = self.derived.get(&key) {
            return Ok(v.clone());
        }
        let base = self.stored(tag, split)?.clone();
        let sources = base
            .iter()
            .map(|t| cond.perturbation.apply(&t.source).map(|x| x.clamp(-1.0, 1.0)))
            .collect::<Result<Vec<_>>>()?;
        let seq = StepSequence::uniform(self.sched.steps(), cond.steps)?;
        let residuals = compute_dire_par(&sources, self.reconstructor, self.sched, &seq, cond.abs)?;
        let triples: Vec<DireTriple> = residuals
            .into_iter()
            .zip(&base)
            .map(|(r, t)| r.labeled(t.id.clone(), t.label, t.sampler_tag.clone(), t.split, t.seed))
            .collect();
        self.derived.insert(key, triples.clone());
        Ok(triples)
    }
}

fn score_cell(detector: &DetectorModel, triples: &[DireTriple]) -> Result<(Option<f64>, Option<f64>)> {
    if triples.is_empty() {
        return Ok((None, None));
    }
    let scores = detector.score_triples(triples)?;
    let labels: Vec<f32> = triples.iter().map(|t| t.label.target()).collect();
    let acc = accuracy(&scores, &labels, 0.5)?;
    let ap = if labels.contains(&1.0) {
        Some(average_precision(&scores, &labels)?)
    } else {
        None
    };
    Ok((Some(acc), ap))
}

/// Score `detector` on every condition over `split`. Perturbations hit the
/// source image; reconstruction and DIRE are then recomputed from it.
pub fn evaluate<M: EpsPredictor>(
    detector: &DetectorModel,
    name: &str,
    source: &mut TripleSource<'_, M>,
    conditions: &[Condition],
    split: Split,
    seed: u64,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for cond in conditions {
        let triples = source.get(split, cond)?;
        info!(
            "eval {name}: {} S={} {} ({} images)",
            cond.sampler_tag,
            cond.steps,
            cond.perturbation,
            triples.len()
        );
        let (acc, ap) = score_cell(detector, &triples)?;
        report.cells.push(EvalCell {
            detector: name.to_string(),
            sampler_tag: cond.sampler_tag.clone(),
            input_mode: detector.config().mode,
            steps: cond.steps,
            perturbation: cond.perturbation,
            abs: cond.abs,
            split,
            seed,
            acc,
            ap,
            n_samples: triples.len(),
        });
    }
    Ok(report)
}

/// Trains a detector for an input mode from train and validation triples.
pub trait DetectorFactory {
    fn train(&mut self, mode: InputMode, train: &[DireTriple], val: &[DireTriple]) -> Result<DetectorModel>;
}

impl<F> DetectorFactory for F
where
    F: FnMut(InputMode, &[DireTriple], &[DireTriple]) -> Result<DetectorModel>,
{
    fn train(&mut self, mode: InputMode, train: &[DireTriple], val: &[DireTriple]) -> Result<DetectorModel> {
        self(mode, train, val)
    }
}

/// What an ablation trains on and where it is evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub train_tags: Vec<String>,
    pub eval_tags: Vec<String>,
    pub seed: u64,
}

fn gather<M: EpsPredictor>(
    source: &mut TripleSource<'_, M>,
    tags: &[String],
    split: Split,
    steps: usize,
    abs: bool,
) -> Result<Vec<DireTriple>> {
    let mut out = Vec::new();
    for tag in tags {
        let cond = Condition {
            abs,
            ..Condition::new(tag.clone(), steps, Perturbation::Identity)
        };
        out.extend(source.get(split, &cond)?);
    }
    Ok(out)
}

fn train_and_eval<M: EpsPredictor>(
    factory: &mut impl DetectorFactory,
    source: &mut TripleSource<'_, M>,
    plan: &AblationPlan,
    mode: InputMode,
    steps: usize,
    abs: bool,
    name: &str,
) -> Result<EvalReport> {
    let train = gather(source, &plan.train_tags, Split::Train, steps, abs)?;
    let val = gather(source, &plan.train_tags, Split::Val, steps, abs)?;
    info!("{name}: training on {} triples", train.len());
    let detector = factory.train(mode, &train, &val)?;
    let conditions: Vec<Condition> = plan
        .eval_tags
        .iter()
        .map(|t| Condition {
            abs,
            ..Condition::new(t.clone(), steps, Perturbation::Identity)
        })
        .collect();
    evaluate(&detector, name, source, &conditions, Split::Test, plan.seed)
}

/// Rebuild DIRE with each step count, retrain, and evaluate.
pub fn ablate_steps<M: EpsPredictor>(
    factory: &mut impl DetectorFactory,
    source: &mut TripleSource<'_, M>,
    plan: &AblationPlan,
    steps_list: &[usize],
) -> Result<EvalReport> {
    ensure!(!steps_list.is_empty(), "no step counts to ablate");
    let mut report = EvalReport::default();
    for &s in steps_list {
        report.extend(train_and_eval(
            factory,
            source,
            plan,
            InputMode::Dire,
            s,
            true,
            &format!("dire-s{s}"),
        )?);
    }
    Ok(report)
}

/// Detectors on signed and absolute DIRE, each evaluated on its own variant.
pub fn ablate_abs<M: EpsPredictor>(
    factory: &mut impl DetectorFactory,
    source: &mut TripleSource<'_, M>,
    plan: &AblationPlan,
) -> Result<EvalReport> {
    let steps = source.manifest().info.spec.recon_steps;
    let mut report = train_and_eval(factory, source, plan, InputMode::Dire, steps, false, "dire-signed")?;
    report.extend(train_and_eval(
        factory,
        source,
        plan,
        InputMode::Dire,
        steps,
        true,
        "dire-abs",
    )?);
    Ok(report)
}

/// One detector per input representation.
pub fn ablate_input_mode<M: EpsPredictor>(
    factory: &mut impl DetectorFactory,
    source: &mut TripleSource<'_, M>,
    plan: &AblationPlan,
    modes: &[InputMode],
) -> Result<EvalReport> {
    let steps = source.manifest().info.spec.recon_steps;
    let mut report = EvalReport::default();
    for &mode in modes {
        report.extend(train_and_eval(factory, source, plan, mode, steps, true, mode.as_str())?);
    }
    Ok(report)
}

/// Fraction of pixels with a negative value, over a set of images.
pub fn negative_fraction(triples: &[DireTriple]) -> f64 {
    let (neg, total) = triples.iter().fold((0usize, 0usize), |(n, t), tr| {
        (
            n + tr.dire.data().iter().filter(|&&v| v < 0.0).count(),
            t + tr.dire.len(),
        )
    });
    if total == 0 {
        0.0
    } else {
        neg as f64 / total as f64
    }
}

/// Mean AP over the cells of `detector` whose tag is in `tags`.
pub fn mean_ap(report: &EvalReport, detector: &str, tags: &[String]) -> Option<f64> {
    let aps: Vec<f64> = report
        .cells
        .iter()
        .filter(|c| c.detector == detector && tags.contains(&c.sampler_tag))
        .filter_map(|c| c.ap)
        .collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}
