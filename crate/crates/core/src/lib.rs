pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod ddim;
pub mod dire;
pub mod epsnet;
pub mod error;
pub mod evalkit;
pub mod forensics;
pub mod image;
pub mod nn;
pub mod pipeline;
pub mod schedule;
pub mod seed;

pub use config::RunConfig;
pub use datagen::{DatasetManifest, DatasetSpec, SampleMethod, SamplerSpec, SplitCounts};
pub use ddim::StepSequence;
pub use dire::{DireTriple, InputMode, Label, Split};
pub use epsnet::{EpsConfig, EpsModel, EpsPredictor, TrainConfig};
pub use error::{Error, Result};
pub use evalkit::{Condition, EvalCell, EvalReport, Perturbation};
pub use forensics::{DetectorConfig, DetectorModel, DetectorTrainConfig};
pub use image::{ImageShape, ImageTensor};
pub use schedule::NoiseSchedule;
