//! Desk-scale triplet dataset: procedural real images, sampler outputs, their
//! DIRE triples, splits, and on-disk persistence.

mod tensor_io;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use tensor_io::{
    decode_tensor, encode_tensor, read_tensor, to_bytes, write_pgm, write_png, write_tensor, TENSOR_MAGIC,
};

use crate::checkpoint::write_atomic;
use crate::ddim::{self, StepSequence};
use crate::dire::{compute_dire_par, DireResidual, DireTriple, Label, Split};
use crate::epsnet::EpsPredictor;
use crate::error::{ensure, Error, Result};
use crate::image::{ImageShape, ImageTensor};
use crate::schedule::NoiseSchedule;
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DATASET_FILE: &str = "dataset.json";

/// Procedural stand-ins for natural image pools.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RealFamily {
    /// Anti-aliased rectangles and discs over a smooth random background.
    Shapes,
    /// Oriented sinusoidal gratings under soft Gaussian blobs.
    Gratings,
}

impl std::str::FromStr for RealFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(RealFamily::Shapes),
            "gratings" => Ok(RealFamily::Gratings),
            _ => Err(Error::InvalidParameter(format!("unknown image family {s:?}"))),
        }
    }
}

/// `n` procedural images of family `kind`; image `i` depends only on (seed, i).
pub fn gen_real(kind: &str, shape: ImageShape, seed_v: u64, n: usize) -> Result<Vec<ImageTensor>> {
    let family: RealFamily = kind.parse()?;
    ensure!(n >= 1, "need at least one image");
    ensure!(shape.height >= 2 && shape.width >= 2, "images must be at least 2x2");
    Ok((0..n)
        .map(|i| {
            let mut rng = seed::rng(seed_v, &[seed::key(kind), i as u64]);
            match family {
                RealFamily::Shapes => shapes_scene(shape, &mut rng),
                RealFamily::Gratings => gratings_scene(shape, &mut rng),
            }
        })
        .collect())
}

/// Smooth field: a handful of low-frequency cosines with random phases.
fn smooth_field<R: Rng>(shape: ImageShape, rng: &mut R, amplitude: f64) -> Vec<f64> {
    let (h, w) = (shape.height, shape.width);
    let modes: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let fy = rng.random_range(0..3) as f64;
            let fx = rng.random_range(0..3) as f64;
            let a: f64 = StandardNormal.sample(rng);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (fy, fx, a * amplitude / (1.0 + fy + fx), phase)
        })
        .collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = modes
                .iter()
                .map(|&(fy, fx, a, p)| {
                    a * (std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + p).cos()
                })
                .sum();
        }
    }
    out
}

/// Fraction of a pixel's 4×4 subsamples inside `inside`.
fn coverage(y: usize, x: usize, inside: impl Fn(f64, f64) -> bool) -> f64 {
    let mut hits = 0;
    for sy in 0..4 {
        for sx in 0..4 {
            if inside(y as f64 + (sy as f64 + 0.5) / 4.0, x as f64 + (sx as f64 + 0.5) / 4.0) {
                hits += 1;
            }
        }
    }
    hits as f64 / 16.0
}

fn shapes_scene<R: Rng>(shape: ImageShape, rng: &mut R) -> ImageTensor {
    let (h, w) = (shape.height, shape.width);
    let size = h.min(w) as f64;
    let mut img = vec![0.0f64; shape.numel()];
    for c in 0..shape.channels {
        let base = rng.random_range(-0.4..0.4);
        let field = smooth_field(shape, rng, 0.25);
        for (v, f) in img[c * h * w..(c + 1) * h * w].iter_mut().zip(field) {
            *v = base + f;
        }
    }
    for _ in 0..rng.random_range(1..=3) {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let color: Vec<f64> = (0..shape.channels).map(|_| rng.random_range(-0.9..0.9)).collect();
        let inside: Box<dyn Fn(f64, f64) -> bool> = if rng.random_bool(0.5) {
            let hy = rng.random_range(0.12..0.35) * size;
            let hx = rng.random_range(0.12..0.35) * size;
            Box::new(move |y, x| (y - cy).abs() <= hy && (x - cx).abs() <= hx)
        } else {
            let r = rng.random_range(0.1..0.3) * size;
            Box::new(move |y, x| (y - cy).powi(2) + (x - cx).powi(2) <= r * r)
        };
        for y in 0..h {
            for x in 0..w {
                let cov = coverage(y, x, &inside);
                if cov > 0.0 {
                    for (c, &col) in color.iter().enumerate() {
                        let v = &mut img[(c * h + y) * w + x];
                        *v = (1.0 - cov) * *v + cov * col;
                    }
                }
            }
        }
    }
    finish(shape, img, rng)
}

fn gratings_scene<R: Rng>(shape: ImageShape, rng: &mut R) -> ImageTensor {
    let (h, w) = (shape.height, shape.width);
    let size = h.min(w) as f64;
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let freq = rng.random_range(1.5..5.0) / size;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let contrast = rng.random_range(0.2..0.6);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..=3))
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(0.1..0.3) * size,
                rng.random_range(-0.6..0.6),
            )
        })
        .collect();
    let mut img = vec![0.0f64; shape.numel()];
    for c in 0..shape.channels {
        let tint = rng.random_range(-0.2..0.2);
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64) * theta.cos() + (y as f64) * theta.sin();
                let mut v = tint + contrast * (std::f64::consts::TAU * freq * u + phase).sin();
                for &(by, bx, s, a) in &blobs {
                    v += a * (-((y as f64 - by).powi(2) + (x as f64 - bx).powi(2)) / (2.0 * s * s)).exp();
                }
                img[(c * h + y) * w + x] = v;
            }
        }
    }
    finish(shape, img, rng)
}

/// Mild per-pixel sensor noise, then clamp to [-1, 1].
fn finish<R: Rng>(shape: ImageShape, img: Vec<f64>, rng: &mut R) -> ImageTensor {
    let data = img
        .into_iter()
        .map(|v| {
            let n: f64 = StandardNormal.sample(rng);
            (v + 0.02 * n).clamp(-1.0, 1.0) as f32
        })
        .collect();
    ImageTensor::new(shape, data).expect("scene matches its shape")
}

/// How a sampler produces generated images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SampleMethod {
    /// Deterministic DDIM with `steps` uniformly strided steps.
    Ddim { steps: usize },
    /// Full-length stochastic DDPM sampling.
    Ancestral,
}

impl fmt::Display for SampleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleMethod::Ddim { steps } => write!(f, "ddim{steps}"),
            SampleMethod::Ancestral => f.write_str("ddpm"),
        }
    }
}

/// Per-class image counts for each split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub tag: String,
    pub method: SampleMethod,
    /// Index into the model list; 0 is also the reconstructor.
    #[serde(default)]
    pub model: usize,
    pub counts: SplitCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub family: String,
    pub samplers: Vec<SamplerSpec>,
    /// DDIM steps used by the reconstructor.
    pub recon_steps: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self, n_models: usize) -> Result<()> {
        self.family.parse::<RealFamily>()?;
        ensure!(!self.samplers.is_empty(), "dataset needs at least one sampler");
        ensure!(self.recon_steps >= 1, "recon_steps must be >= 1");
        let mut tags = HashSet::new();
        for s in &self.samplers {
            ensure!(
                !s.tag.is_empty() && s.tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_'),
                "sampler tag {:?} must be non-empty [A-Za-z0-9_-]",
                s.tag
            );
            ensure!(tags.insert(s.tag.as_str()), "duplicate sampler tag {:?}", s.tag);
            ensure!(s.counts.total() >= 1, "sampler {:?} has no images", s.tag);
            ensure!(
                s.model < n_models,
                "sampler {:?} uses model {} but only {n_models} given",
                s.tag,
                s.model
            );
            if let SampleMethod::Ddim { steps } = s.method {
                ensure!(steps >= 1, "sampler {:?}: DDIM steps must be >= 1", s.tag);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    /// Relative to the dataset root.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleFiles {
    pub source: FileRef,
    pub reconstruction: FileRef,
    pub dire: FileRef,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub label: Label,
    pub sampler_tag: String,
    pub split: Split,
    /// Seed of the stream that produced the source image.
    pub seed: u64,
    pub index: usize,
    pub files: TripleFiles,
}

/// Header stored beside the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub spec: DatasetSpec,
    pub image_shape: ImageShape,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub info: DatasetInfo,
    pub records: Vec<ManifestRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn stream_seed(base: u64, tag: &str, stream: &str) -> u64 {
    seed::derive(base, &[seed::key(tag), seed::key(stream)])
}

/// Generate `n` images with `method`.
pub fn sample_images(
    model: &impl EpsPredictor,
    method: SampleMethod,
    shape: ImageShape,
    sched: &NoiseSchedule,
    seed_v: u64,
    n: usize,
) -> Result<Vec<ImageTensor>> {
    match method {
        SampleMethod::Ddim { steps } => {
            let seq = StepSequence::uniform(sched.steps(), steps)?;
            ddim::ddim_generate(model, shape, sched, &seq, seed_v, n)
        }
        SampleMethod::Ancestral => ddim::ancestral_generate(model, shape, sched, seed_v, n),
    }
}

/// Build and persist the dataset under `root`; `models[0]` reconstructs.
pub fn build_dataset<M: EpsPredictor>(
    models: &[M],
    sched: &NoiseSchedule,
    shape: ImageShape,
    spec: &DatasetSpec,
    root: &Path,
) -> Result<DatasetManifest> {
    ensure!(!models.is_empty(), "build_dataset needs at least one model");
    spec.validate(models.len())?;
    let seq = StepSequence::uniform(sched.steps(), spec.recon_steps)?;
    let mut records = Vec::new();
    for sampler in &spec.samplers {
        let n = sampler.counts.total();
        let real_seed = stream_seed(spec.seed, &sampler.tag, "real");
        let gen_seed = stream_seed(spec.seed, &sampler.tag, "gen");
        info!("{}: sampling {n} images ({})", sampler.tag, sampler.method);
        let generated = sample_images(&models[sampler.model], sampler.method, shape, sched, gen_seed, n)?;
        let real = gen_real(&spec.family, shape, real_seed, n)?;
        for (label, images, stream) in [(Label::Real, real, real_seed), (Label::Generated, generated, gen_seed)] {
            info!("{}: computing DIRE for {n} {label:?} images", sampler.tag);
            let residuals = compute_dire_par(&images, &models[0], sched, &seq, true)?;
            for (i, r) in residuals.into_iter().enumerate() {
                let kind = match label {
                    Label::Real => "real",
                    Label::Generated => "gen",
                };
                let id = format!("{}-{kind}-{i:05}", sampler.tag);
                let files = write_triple(root, &sampler.tag, &id, &r)?;
                records.push(ManifestRecord {
                    id,
                    label,
                    sampler_tag: sampler.tag.clone(),
                    split: sampler.counts.split_of(i),
                    seed: stream,
                    index: i,
                    files,
                });
            }
        }
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        info: DatasetInfo {
            spec: spec.clone(),
            image_shape: shape,
        },
        records,
    };
    manifest.write()?;
    Ok(manifest)
}

fn write_triple(root: &Path, tag: &str, id: &str, r: &DireResidual) -> Result<TripleFiles> {
    let put = |part: &str, img: &ImageTensor| -> Result<FileRef> {
        let rel = format!("{tag}/{id}.{part}.dtf");
        let bytes = encode_tensor(img);
        write_atomic(&root.join(&rel), &bytes)?;
        Ok(FileRef {
            path: rel,
            sha256: sha256_hex(&bytes),
        })
    };
    Ok(TripleFiles {
        source: put("src", &r.source)?,
        reconstruction: put("rec", &r.reconstruction)?,
        dire: put("dire", &r.dire)?,
    })
}

impl DatasetManifest {
    /// Write `dataset.json` and `manifest.jsonl` (one record per line).
    pub fn write(&self) -> Result<()> {
        let info = serde_json::to_string_pretty(&self.info).expect("info serializes") + "\n";
        write_atomic(&self.root.join(DATASET_FILE), info.as_bytes())?;
        let mut lines = String::new();
        for r in &self.records {
            lines.push_str(&serde_json::to_string(r).expect("record serializes"));
            lines.push('\n');
        }
        write_atomic(&self.root.join(MANIFEST_FILE), lines.as_bytes())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let info_path = root.join(DATASET_FILE);
        let text = fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
        let info: DatasetInfo = serde_json::from_str(&text).map_err(|e| Error::format(&info_path, e.to_string()))?;
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::format(&path, format!("line {}: {e}", n + 1))))
            .collect::<Result<Vec<ManifestRecord>>>()?;
        Ok(Self {
            root: root.to_path_buf(),
            info,
            records,
        })
    }

    /// Sampler tags in build order.
    pub fn sampler_tags(&self) -> Vec<String> {
        self.info.spec.samplers.iter().map(|s| s.tag.clone()).collect()
    }

    pub fn records_for<'a>(
        &'a self,
        split: Split,
        tags: Option<&'a [String]>,
    ) -> impl Iterator<Item = &'a ManifestRecord> + 'a {
        self.records
            .iter()
            .filter(move |r| r.split == split && tags.is_none_or(|t| t.contains(&r.sampler_tag)))
    }

    fn read_file(&self, id: &str, f: &FileRef) -> Result<ImageTensor> {
        let record_err = |message: String| Error::Record {
            id: id.to_string(),
            message,
        };
        let path = self.root.join(&f.path);
        let bytes = fs::read(&path).map_err(|e| record_err(format!("{}: {e}", path.display())))?;
        if sha256_hex(&bytes) != f.sha256 {
            return Err(record_err(format!("{}: hash mismatch", f.path)));
        }
        let img = decode_tensor(&bytes).map_err(|m| record_err(format!("{}: {m}", f.path)))?;
        if img.shape() != self.info.image_shape {
            return Err(record_err(format!(
                "{}: shape {:?} differs from dataset shape {:?}",
                f.path,
                img.shape().dims(),
                self.info.image_shape.dims()
            )));
        }
        Ok(img)
    }

    pub fn load_record(&self, r: &ManifestRecord) -> Result<DireTriple> {
        let t = DireTriple {
            id: r.id.clone(),
            source: self.read_file(&r.id, &r.files.source)?,
            reconstruction: self.read_file(&r.id, &r.files.reconstruction)?,
            dire: self.read_file(&r.id, &r.files.dire)?,
            abs: true,
            label: r.label,
            sampler_tag: r.sampler_tag.clone(),
            split: r.split,
            seed: r.seed,
        };
        t.validate().map_err(|e| Error::Record {
            id: r.id.clone(),
            message: e.to_string(),
        })?;
        Ok(t)
    }

    /// Check every invariant: files parse and match their hashes, ids are
    /// unique, split sizes match the dataset spec and classes are paired per tag.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Record {
                    id: r.id.clone(),
                    message: "duplicate id".into(),
                });
            }
            self.load_record(r)?;
        }
        let mut counts: BTreeMap<(&str, Split, bool), usize> = BTreeMap::new();
        for r in &self.records {
            *counts
                .entry((r.sampler_tag.as_str(), r.split, r.label == Label::Real))
                .or_default() += 1;
        }
        for s in &self.info.spec.samplers {
            for split in [Split::Train, Split::Val, Split::Test] {
                for real in [true, false] {
                    let got = counts.remove(&(s.tag.as_str(), split, real)).unwrap_or(0);
                    if got != s.counts.get(split) {
                        return Err(Error::format(
                            self.root.join(MANIFEST_FILE),
                            format!(
                                "{} {split} {}: {got} records, expected {}",
                                s.tag,
                                if real { "real" } else { "generated" },
                                s.counts.get(split)
                            ),
                        ));
                    }
                }
            }
        }
        if let Some(((tag, ..), _)) = counts.into_iter().next() {
            return Err(Error::format(
                self.root.join(MANIFEST_FILE),
                format!("records for unknown sampler tag {tag:?}"),
            ));
        }
        Ok(())
    }
}

/// Triples of one split, optionally restricted to some sampler tags, in
/// manifest order. No match gives an empty list.
pub fn load_split(manifest: &DatasetManifest, split: Split, tags: Option<&[String]>) -> Result<Vec<DireTriple>> {
    manifest
        .records_for(split, tags)
        .map(|r| manifest.load_record(r))
        .collect()
}
