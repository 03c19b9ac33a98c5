//! Serializable record of every setting a pipeline run depends on.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::{DatasetSpec, SampleMethod, SamplerSpec, SplitCounts};
use crate::dire::{InputMode, Split};
use crate::epsnet::EpsConfig;
use crate::error::{ensure, Error, Result};
use crate::evalkit::Perturbation;
use crate::forensics::{DetectorConfig, DetectorTrainConfig};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub model: EpsConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    /// One model is trained per seed; the first one also reconstructs.
    pub seeds: Vec<u64>,
    /// Size of the procedural training pool.
    pub pool_size: usize,
    pub pool_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSection {
    pub mode: InputMode,
    pub crop: usize,
    pub width: usize,
    pub blocks: usize,
    pub train: DetectorTrainConfig,
    /// Sampler tags whose train/val splits the detector learns from.
    pub train_tags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    /// Detectors to evaluate; empty means `detector.mode`.
    pub modes: Vec<InputMode>,
    pub split: Split,
    /// Empty means every tag in the dataset.
    pub tags: Vec<String>,
    pub perturbations: Vec<Perturbation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSection {
    pub steps: Vec<usize>,
    pub modes: Vec<InputMode>,
    /// Empty means every tag in the dataset.
    pub eval_tags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathsConfig {
    pub models: PathBuf,
    pub dataset: PathBuf,
    pub detectors: PathBuf,
    pub reports: PathBuf,
    pub analysis: PathBuf,
}

/// Everything a run depends on. Paths are relative to the work directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub diffusion: DiffusionConfig,
    pub dataset: DatasetSpec,
    pub detector: DetectorSection,
    pub eval: EvalSection,
    pub ablation: AblationSection,
    pub paths: PathsConfig,
    /// Worker threads; results do not depend on it.
    pub jobs: usize,
}

fn sampler(tag: &str, method: SampleMethod, model: usize, counts: SplitCounts) -> SamplerSpec {
    SamplerSpec {
        tag: tag.into(),
        method,
        model,
        counts,
    }
}

/// The seen sampler plus the four unseen ones.
fn samplers(seen: SplitCounts, test: usize) -> Vec<SamplerSpec> {
    let unseen = SplitCounts { train: 0, val: 0, test };
    vec![
        sampler("ddim20", SampleMethod::Ddim { steps: 20 }, 0, seen),
        sampler("ddim5", SampleMethod::Ddim { steps: 5 }, 0, unseen),
        sampler("ddim50", SampleMethod::Ddim { steps: 50 }, 0, unseen),
        sampler("ddpm", SampleMethod::Ancestral, 0, unseen),
        sampler("ddim20-m2", SampleMethod::Ddim { steps: 20 }, 1, unseen),
    ]
}

impl Default for RunConfig {
    /// Full desk-scale settings: 32×32 images, width-32 ε-network trained for
    /// 20k steps, 2000/200/200 images per class for the seen sampler.
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig {
                steps: 200,
                beta_start: 1e-4,
                beta_end: 0.02,
            },
            diffusion: DiffusionConfig {
                model: EpsConfig::default(),
                batch_size: 64,
                lr: 2e-4,
                steps: 20_000,
                seeds: vec![0, 1],
                pool_size: 20_000,
                pool_seed: 7,
            },
            dataset: DatasetSpec {
                family: "shapes".into(),
                samplers: samplers(
                    SplitCounts {
                        train: 2000,
                        val: 200,
                        test: 200,
                    },
                    200,
                ),
                recon_steps: 20,
                seed: 11,
            },
            detector: DetectorSection {
                mode: InputMode::Dire,
                crop: 28,
                width: 16,
                blocks: 4,
                train: DetectorTrainConfig {
                    batch_size: 32,
                    lr: 1e-3,
                    steps: 3000,
                    eval_every: 100,
                    seed: 13,
                    augment: true,
                },
                train_tags: vec!["ddim20".into()],
            },
            eval: EvalSection {
                modes: Vec::new(),
                split: Split::Test,
                tags: Vec::new(),
                perturbations: vec![
                    Perturbation::Identity,
                    Perturbation::Blur { sigma: 1.0 },
                    Perturbation::Blur { sigma: 2.0 },
                    Perturbation::Blur { sigma: 3.0 },
                    Perturbation::Jpeg { quality: 65 },
                    Perturbation::Jpeg { quality: 30 },
                ],
            },
            ablation: AblationSection {
                steps: vec![5, 10, 20, 50],
                modes: InputMode::ALL.to_vec(),
                eval_tags: Vec::new(),
            },
            paths: PathsConfig {
                models: "models".into(),
                dataset: "dataset".into(),
                detectors: "detectors".into(),
                reports: "reports".into(),
                analysis: "analysis".into(),
            },
            jobs: 1,
        }
    }
}

impl RunConfig {
    /// Reduced profile that finishes on a single CPU core in well under an
    /// hour: 16×16 images, width-16 ε-network, fewer steps and images.
    pub fn compact() -> Self {
        let mut c = Self::default();
        // Same β·T as a 1000-step 0.02 schedule, so ᾱ_T ≈ 3e-5 and sampling
        // from N(0, I) at T matches the forward process.
        c.schedule.beta_end = 0.1;
        c.diffusion.model = EpsConfig {
            image_size: 16,
            width: 16,
            ..EpsConfig::default()
        };
        c.diffusion.batch_size = 32;
        c.diffusion.lr = 1e-3;
        c.diffusion.steps = 4000;
        c.diffusion.pool_size = 4000;
        c.dataset.samplers = samplers(
            SplitCounts {
                train: 600,
                val: 100,
                test: 200,
            },
            200,
        );
        c.detector.crop = 14;
        c.detector.width = 8;
        c.detector.train.steps = 1500;
        c
    }

    /// A named built-in profile.
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "compact" => Ok(Self::compact()),
            _ => Err(Error::InvalidParameter(format!("unknown profile {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.diffusion.model.validate()?;
        ensure!(!self.diffusion.seeds.is_empty(), "diffusion.seeds must not be empty");
        ensure!(self.diffusion.pool_size >= 1, "diffusion.pool_size must be >= 1");
        self.dataset.validate(self.diffusion.seeds.len())?;
        let t = self.schedule.steps;
        let ddim_steps = self.dataset.samplers.iter().filter_map(|s| match s.method {
            SampleMethod::Ddim { steps } => Some(steps),
            SampleMethod::Ancestral => None,
        });
        for s in ddim_steps
            .chain([self.dataset.recon_steps])
            .chain(self.ablation.steps.iter().copied())
        {
            ensure!((1..=t).contains(&s), "step count {s} is outside 1..={t}");
        }
        ensure!(
            self.detector.crop <= self.diffusion.model.image_size,
            "detector.crop {} exceeds the image size {}",
            self.detector.crop,
            self.diffusion.model.image_size
        );
        self.detector_config(self.detector.mode).validate()?;
        for tag in self
            .detector
            .train_tags
            .iter()
            .chain(&self.eval.tags)
            .chain(&self.ablation.eval_tags)
        {
            ensure!(
                self.dataset.samplers.iter().any(|s| &s.tag == tag),
                "tag {tag:?} is not a dataset sampler"
            );
        }
        ensure!(
            !self.detector.train_tags.is_empty(),
            "detector.train_tags must not be empty"
        );
        ensure!(self.jobs >= 1, "jobs must be >= 1");
        Ok(())
    }

    pub fn detector_config(&self, mode: InputMode) -> DetectorConfig {
        DetectorConfig {
            width: self.detector.width,
            blocks: self.detector.blocks,
            ..DetectorConfig::new(mode, self.diffusion.model.channels, self.detector.crop)
        }
    }

    pub fn eval_tags(&self) -> Vec<String> {
        if self.eval.tags.is_empty() {
            self.dataset.samplers.iter().map(|s| s.tag.clone()).collect()
        } else {
            self.eval.tags.clone()
        }
    }

    pub fn eval_modes(&self) -> Vec<InputMode> {
        if self.eval.modes.is_empty() {
            vec![self.detector.mode]
        } else {
            self.eval.modes.clone()
        }
    }

    pub fn ablation_tags(&self) -> Vec<String> {
        if self.ablation.eval_tags.is_empty() {
            self.dataset.samplers.iter().map(|s| s.tag.clone()).collect()
        } else {
            self.ablation.eval_tags.clone()
        }
    }

    pub fn model_path(&self, workdir: &Path, index: usize) -> PathBuf {
        workdir.join(&self.paths.models).join(format!("eps-{index}.dirm"))
    }

    pub fn detector_path(&self, workdir: &Path, mode: InputMode) -> PathBuf {
        workdir.join(&self.paths.detectors).join(format!("{mode}.dird"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidParameter(format!("bad config: {e}")))
    }

    /// Apply a `dotted.path=value` override. The value is parsed as JSON
    /// when possible and taken as a string otherwise; list elements are
    /// addressed by index (`dataset.samplers.0.counts.train=10`).
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidParameter(format!("override {assignment:?} is not key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let mut node = &mut root;
        for part in path.split('.') {
            node = match node {
                Value::Object(map) => map.get_mut(part),
                Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| Error::InvalidParameter(format!("unknown config key {path:?}")))?;
        }
        *node = value;
        *self = serde_json::from_value(root)
            .map_err(|e| Error::InvalidParameter(format!("override {assignment:?}: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_settings() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(
            (c.schedule.steps, c.schedule.beta_start, c.schedule.beta_end),
            (200, 1e-4, 0.02)
        );
        assert_eq!(c.diffusion.model, EpsConfig::default());
        assert_eq!(
            (c.diffusion.batch_size, c.diffusion.lr, c.diffusion.steps),
            (64, 2e-4, 20_000)
        );
        assert_eq!(c.dataset.recon_steps, 20);
        assert_eq!(c.detector.crop, 28);
        assert_eq!(
            c.dataset.samplers[0].counts,
            SplitCounts {
                train: 2000,
                val: 200,
                test: 200
            }
        );
        RunConfig::compact().validate().unwrap();
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::compact();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert!(RunConfig::from_json("{}").is_err());
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.set("diffusion.steps=12").unwrap();
        c.set("detector.mode=rgb").unwrap();
        c.set("dataset.samplers.1.counts.test=3").unwrap();
        c.set("eval.perturbations=[{\"kind\":\"jpeg\",\"quality\":30}]")
            .unwrap();
        c.set("dataset.family=gratings").unwrap();
        assert_eq!(c.diffusion.steps, 12);
        assert_eq!(c.detector.mode, InputMode::Rgb);
        assert_eq!(c.dataset.samplers[1].counts.test, 3);
        assert_eq!(c.eval.perturbations, vec![Perturbation::Jpeg { quality: 30 }]);
        assert_eq!(c.dataset.family, "gratings");
        assert!(c.set("diffusion.nope=1").is_err());
        assert!(c.set("diffusion.steps=-1").is_err());
        assert!(c.set("noequals").is_err());
        assert_eq!(c.diffusion.steps, 12);
    }

    #[test]
    fn validation_catches_conflicts() {
        let mut c = RunConfig::compact();
        c.detector.crop = 20;
        assert!(c.validate().is_err());
        let mut c = RunConfig::compact();
        c.diffusion.seeds = vec![0];
        assert!(c.validate().is_err());
        let mut c = RunConfig::compact();
        c.eval.tags = vec!["gan".into()];
        assert!(c.validate().is_err());
    }
}
