//! DIRE: the residual between an image and its DDIM reconstruction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ddim::{self, StepSequence};
use crate::epsnet::EpsPredictor;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Generated,
}

impl Label {
    /// 0 for real, 1 for generated.
    pub fn target(self) -> f32 {
        match self {
            Label::Real => 0.0,
            Label::Generated => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidParameter(format!("unknown split {s:?}"))),
        }
    }
}

/// Source image, its reconstruction, and the residual between them.
#[derive(Clone, Debug, PartialEq)]
pub struct DireResidual {
    pub source: ImageTensor,
    pub reconstruction: ImageTensor,
    pub dire: ImageTensor,
    /// Whether `dire` holds |source − reconstruction| or the signed difference.
    pub abs: bool,
}

impl DireResidual {
    /// Residual from an existing reconstruction.
    pub fn from_parts(source: ImageTensor, reconstruction: ImageTensor, abs: bool) -> Result<Self> {
        let dire = residual(&source, &reconstruction, abs)?;
        Ok(Self {
            source,
            reconstruction,
            dire,
            abs,
        })
    }

    pub fn labeled(
        self,
        id: impl Into<String>,
        label: Label,
        sampler_tag: impl Into<String>,
        split: Split,
        seed: u64,
    ) -> DireTriple {
        DireTriple {
            id: id.into(),
            source: self.source,
            reconstruction: self.reconstruction,
            dire: self.dire,
            abs: self.abs,
            label,
            sampler_tag: sampler_tag.into(),
            split,
            seed,
        }
    }
}

fn residual(source: &ImageTensor, reconstruction: &ImageTensor, abs: bool) -> Result<ImageTensor> {
    if abs {
        source.zip_map(reconstruction, |a, b| (a - b).abs())
    } else {
        source.zip_map(reconstruction, |a, b| a - b)
    }
}

/// A labeled (source, reconstruction, DIRE) record.
#[derive(Clone, Debug, PartialEq)]
pub struct DireTriple {
    pub id: String,
    pub source: ImageTensor,
    pub reconstruction: ImageTensor,
    pub dire: ImageTensor,
    pub abs: bool,
    pub label: Label,
    pub sampler_tag: String,
    pub split: Split,
    pub seed: u64,
}

impl DireTriple {
    /// Check shape agreement, the residual identity and the value range.
    pub fn validate(&self) -> Result<()> {
        let err = |message: String| Error::Record {
            id: self.id.clone(),
            message,
        };
        let shape = self.source.shape();
        if self.reconstruction.shape() != shape || self.dire.shape() != shape {
            return Err(err("source, reconstruction and dire shapes differ".into()));
        }
        let expected = residual(&self.source, &self.reconstruction, self.abs)?;
        let diff = expected.max_abs_diff(&self.dire);
        if diff > 1e-6 {
            return Err(err(format!("stored dire deviates from recomputed residual by {diff}")));
        }
        let (lo, hi) = if self.abs { (0.0, 2.0) } else { (-2.0, 2.0) };
        if self.dire.min() < lo || self.dire.max() > hi {
            return Err(err(format!("dire outside [{lo}, {hi}]")));
        }
        Ok(())
    }

    /// Same record with the residual recomputed under the other sign convention.
    pub fn with_abs(&self, abs: bool) -> Result<Self> {
        Ok(Self {
            dire: residual(&self.source, &self.reconstruction, abs)?,
            abs,
            ..self.clone()
        })
    }
}

/// DIRE for a batch: reconstruction = clamp(R(I(x0))), dire = |x0 − rec| (or signed).
pub fn compute_dire_batch(
    x0s: &[ImageTensor],
    model: &impl EpsPredictor,
    sched: &NoiseSchedule,
    seq: &StepSequence,
    use_abs: bool,
) -> Result<Vec<DireResidual>> {
    let latents = ddim::invert_batch(x0s, model, sched, seq)?;
    let recs = ddim::reconstruct_batch(&latents, model, sched, seq)?;
    x0s.iter()
        .zip(recs)
        .map(|(x0, rec)| DireResidual::from_parts(x0.clone(), rec.clamp(-1.0, 1.0), use_abs))
        .collect()
}

pub fn compute_dire(
    x0: &ImageTensor,
    model: &impl EpsPredictor,
    sched: &NoiseSchedule,
    seq: &StepSequence,
    use_abs: bool,
) -> Result<DireResidual> {
    Ok(compute_dire_batch(std::slice::from_ref(x0), model, sched, seq, use_abs)?.remove(0))
}

/// Parallel [`compute_dire_batch`] over fixed-size chunks; order preserved.
pub fn compute_dire_par(
    x0s: &[ImageTensor],
    model: &impl EpsPredictor,
    sched: &NoiseSchedule,
    seq: &StepSequence,
    use_abs: bool,
) -> Result<Vec<DireResidual>> {
    use rayon::prelude::*;
    let parts: Vec<Vec<DireResidual>> = x0s
        .par_chunks(ddim::CHUNK)
        .map(|chunk| compute_dire_batch(chunk, model, sched, seq, use_abs))
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// What the detector sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Rgb,
    Rec,
    Dire,
    RgbAndDire,
}

impl InputMode {
    pub const ALL: [InputMode; 4] = [InputMode::Rgb, InputMode::Rec, InputMode::Dire, InputMode::RgbAndDire];

    /// Detector input channels for images with `channels` channels.
    pub fn channels(self, channels: usize) -> usize {
        match self {
            InputMode::RgbAndDire => 2 * channels,
            _ => channels,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::Rgb => "rgb",
            InputMode::Rec => "rec",
            InputMode::Dire => "dire",
            InputMode::RgbAndDire => "rgb_and_dire",
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(InputMode::Rgb),
            "rec" => Ok(InputMode::Rec),
            "dire" => Ok(InputMode::Dire),
            "rgb_and_dire" | "rgb&dire" | "rgb+dire" => Ok(InputMode::RgbAndDire),
            _ => Err(Error::InvalidParameter(format!("unknown input mode {s:?}"))),
        }
    }
}

/// Detector input for `mode`; RGB&DIRE stacks source then dire channels.
pub fn make_input(mode: InputMode, triple: &DireTriple) -> ImageTensor {
    match mode {
        InputMode::Rgb => triple.source.clone(),
        InputMode::Rec => triple.reconstruction.clone(),
        InputMode::Dire => triple.dire.clone(),
        InputMode::RgbAndDire => triple
            .source
            .concat_channels(&triple.dire)
            .expect("triple tensors share a shape"),
    }
}
