//! Deterministic DDIM inversion/reconstruction and the ancestral DDPM sampler.
//!
//! All per-element arithmetic runs in `f64` and is rounded once to `f32`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epsnet::EpsPredictor;
use crate::error::{ensure, Error, Result};
use crate::image::{ImageShape, ImageTensor};
use crate::schedule::NoiseSchedule;
use crate::seed;

/// Images per model call in the batched drivers. Fixed so that results do
/// not depend on how work is spread over threads.
pub const CHUNK: usize = 16;

/// Strictly increasing step indices τ_1 < … < τ_S within [1, T].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSequence {
    tau: Vec<usize>,
}

impl StepSequence {
    /// `S` evenly spaced indices with stride ⌊T/S⌋, the last one exactly `T`.
    pub fn uniform(total: usize, steps: usize) -> Result<Self> {
        ensure!(
            steps >= 1 && steps <= total,
            "need 1 <= S <= T, got S={steps}, T={total}"
        );
        let stride = total / steps;
        let tau = (1..=steps).map(|i| total - (steps - i) * stride).collect();
        Ok(Self { tau })
    }

    pub fn from_indices(tau: Vec<usize>, total: usize) -> Result<Self> {
        ensure!(!tau.is_empty(), "empty step sequence");
        ensure!(tau[0] >= 1, "step indices start at 1");
        ensure!(
            tau.windows(2).all(|w| w[0] < w[1]),
            "step indices must be strictly increasing"
        );
        ensure!(*tau.last().unwrap() <= total, "step index beyond T={total}");
        Ok(Self { tau })
    }

    pub fn indices(&self) -> &[usize] {
        &self.tau
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    /// Consecutive (lower, upper) pairs over {0} ∪ τ, in increasing order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        std::iter::once(0)
            .chain(self.tau.iter().copied())
            .zip(self.tau.iter().copied())
            .collect()
    }
}

/// DDIM reverse update with explicit ᾱ values:
/// √ᾱ_lo·(x − √(1−ᾱ_hi)·ε)/√ᾱ_hi + √(1−ᾱ_lo−σ²)·ε + σ·noise.
pub fn reverse_step_with(
    x_hi: &ImageTensor,
    ab_hi: f64,
    ab_lo: f64,
    eps_hat: &ImageTensor,
    sigma: f64,
    noise: Option<&ImageTensor>,
) -> Result<ImageTensor> {
    ensure!(sigma >= 0.0, "sigma must be nonnegative, got {sigma}");
    let dir_var = 1.0 - ab_lo - sigma * sigma;
    // Slack for rounding when σ² equals 1 − ᾱ_lo exactly in real arithmetic.
    ensure!(
        dir_var >= -1e-12,
        "invalid stochasticity: 1 - alpha_bar_lo - sigma^2 = {dir_var} < 0"
    );
    eps_hat.ensure_shape(x_hi.shape())?;
    let dir = dir_var.max(0.0).sqrt();
    let pred_coef = (ab_lo / ab_hi).sqrt();
    let eps_coef = (1.0 - ab_hi).sqrt();
    let zero = ImageTensor::zeros(x_hi.shape());
    let noise = match (sigma > 0.0, noise) {
        (false, _) => &zero,
        (true, Some(z)) => {
            z.ensure_shape(x_hi.shape())?;
            z
        }
        (true, None) => return Err(Error::InvalidParameter("sigma > 0 requires a noise tensor".into())),
    };
    let out = x_hi
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(noise.data())
        .map(|((&x, &e), &z)| {
            let (x, e, z) = (x as f64, e as f64, z as f64);
            (pred_coef * (x - eps_coef * e) + dir * e + sigma * z) as f32
        })
        .collect();
    ImageTensor::new(x_hi.shape(), out)
}

/// One DDIM reverse step from `t_hi` down to `t_lo`.
pub fn ddim_reverse_step(
    x_hi: &ImageTensor,
    t_hi: usize,
    t_lo: usize,
    eps_hat: &ImageTensor,
    sched: &NoiseSchedule,
    sigma: f64,
    noise: Option<&ImageTensor>,
) -> Result<ImageTensor> {
    sched.check_index(t_hi)?;
    ensure!(t_lo < t_hi, "reverse step needs t_lo < t_hi, got {t_lo} >= {t_hi}");
    reverse_step_with(
        x_hi,
        sched.alpha_bar(t_hi),
        sched.alpha_bar(t_lo),
        eps_hat,
        sigma,
        noise,
    )
}

/// DDIM inversion update with explicit ᾱ values:
/// √ᾱ_hi·( x/√ᾱ_lo + (√((1−ᾱ_hi)/ᾱ_hi) − √((1−ᾱ_lo)/ᾱ_lo))·ε ).
pub fn inversion_step_with(x_lo: &ImageTensor, ab_lo: f64, ab_hi: f64, eps_hat: &ImageTensor) -> Result<ImageTensor> {
    let (s_lo, s_hi) = (ab_lo.sqrt(), ab_hi.sqrt());
    let delta = ((1.0 - ab_hi) / ab_hi).sqrt() - ((1.0 - ab_lo) / ab_lo).sqrt();
    x_lo.zip_map(eps_hat, |x, e| (s_hi * (x as f64 / s_lo + delta * e as f64)) as f32)
}

/// One DDIM inversion step from `t_lo` up to `t_hi`.
pub fn ddim_inversion_step(
    x_lo: &ImageTensor,
    t_lo: usize,
    t_hi: usize,
    eps_hat: &ImageTensor,
    sched: &NoiseSchedule,
) -> Result<ImageTensor> {
    sched.check_index(t_hi)?;
    ensure!(t_lo < t_hi, "inversion step needs t_lo < t_hi, got {t_lo} >= {t_hi}");
    inversion_step_with(x_lo, sched.alpha_bar(t_lo), sched.alpha_bar(t_hi), eps_hat)
}

fn check_batch(xs: &[ImageTensor]) -> Result<()> {
    if let Some(first) = xs.first() {
        for x in xs {
            x.ensure_shape(first.shape())?;
        }
    }
    Ok(())
}

/// Invert a batch of clean images to their x_T. One model call per step.
///
/// ε_θ is evaluated at the current lower state. Its step label is clamped to
/// 1 on the first step (step 0 is not a valid network input).
pub fn invert_batch(
    x0s: &[ImageTensor],
    model: &impl EpsPredictor,
    sched: &NoiseSchedule,
    seq: &StepSequence,
) -> Result<Vec<ImageTensor>> {
    check_batch(x0s)?;
    let mut xs = x0s.to_vec();
    if xs.is_empty() {
        return Ok(xs);
    }
    for (t_lo, t_hi) in seq.pairs() {
        let eps = model.predict_eps(&xs, t_lo.max(1))?;
        xs = xs
            .iter()
            .zip(&eps)
            .map(|(x, e)| ddim_inversion_step(x, t_lo, t_hi, e, sched))
            .collect::<Result<_>>()?;
    }
    Ok(xs)
}

/// Deterministically denoise a batch of x_T back to x_0 (no clamping).
pub fn reconstruct_batch(
    xts: &[ImageTensor],
    model: &impl EpsPredictor,
    sched: &NoiseSchedule,
    seq: &StepSequence,
) -> Result<Vec<ImageTensor>> {
    check_batch(xts)?;
    let mut xs = xts.to_vec();
    if xs.is_empty() {
        return Ok(xs);
    }
    for (t_lo, t_hi) in seq.pairs().into_iter().rev() {
        let eps = model.predict_eps(&xs, t_hi)?;
        xs = xs
            .iter()
            .zip(&eps)
            .map(|(x, e)| ddim_reverse_step(x, t_hi, t_lo, e, sched, 0.0, None))
            .collect::<Result<_>>()?;
    }
    Ok(xs)
}

/// I(·): map a clean image to its DDIM latent x_T.
pub fn invert(
    x0: &ImageTensor,
    model: &impl EpsPredictor,
    sched: &NoiseSchedule,
    seq: &StepSequence,
) -> Result<ImageTensor> {
    Ok(invert_batch(std::slice::from_ref(x0), model, sched, seq)?.remove(0))
}

/// R(·): deterministic reconstruction from x_T.
pub fn reconstruct(
    xt: &ImageTensor,
    model: &impl EpsPredictor,
    sched: &NoiseSchedule,
    seq: &StepSequence,
) -> Result<ImageTensor> {
    Ok(reconstruct_batch(std::slice::from_ref(xt), model, sched, seq)?.remove(0))
}

/// Run `f` over fixed-size chunks of `0..n` in parallel, concatenating in order.
pub(crate) fn par_chunks<F>(n: usize, f: F) -> Result<Vec<ImageTensor>>
where
    F: Fn(std::ops::Range<usize>) -> Result<Vec<ImageTensor>> + Sync + Send,
{
    let ranges: Vec<_> = (0..n).step_by(CHUNK).map(|s| s..(s + CHUNK).min(n)).collect();
    let parts: Vec<Vec<ImageTensor>> = ranges.into_par_iter().map(f).collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Per-image starting noise; image `i` always gets the same x_T for a seed.
pub fn latent_noise(shape: ImageShape, seed_v: u64, index: usize) -> ImageTensor {
    let mut rng = seed::rng(seed_v, &[seed::key("latent"), index as u64]);
    ImageTensor::randn(shape, &mut rng)
}

/// Generate `n` images: seeded x_T ~ N(0, I), DDIM reconstruct, clamp to [-1, 1].
pub fn ddim_generate(
    model: &impl EpsPredictor,
    shape: ImageShape,
    sched: &NoiseSchedule,
    seq: &StepSequence,
    seed_v: u64,
    n: usize,
) -> Result<Vec<ImageTensor>> {
    ensure!(n >= 1, "need at least one image");
    par_chunks(n, |range| {
        let xts: Vec<_> = range.map(|i| latent_noise(shape, seed_v, i)).collect();
        Ok(reconstruct_batch(&xts, model, sched, seq)?
            .into_iter()
            .map(|x| x.clamp(-1.0, 1.0))
            .collect())
    })
}

/// Ancestral DDPM update: posterior mean plus √β̃_t·noise (no noise at t = 1).
pub fn ddpm_sample_step(
    x_t: &ImageTensor,
    t: usize,
    eps_hat: &ImageTensor,
    sched: &NoiseSchedule,
    noise: Option<&ImageTensor>,
) -> Result<ImageTensor> {
    if t < 1 || t > sched.steps() {
        return Err(Error::StepOutOfRange {
            t,
            min: 1,
            max: sched.steps(),
        });
    }
    eps_hat.ensure_shape(x_t.shape())?;
    let alpha = sched.alpha(t);
    let beta = sched.beta(t);
    let eps_coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let mean = x_t.zip_map(eps_hat, |x, e| {
        (inv_sqrt_alpha * (x as f64 - eps_coef * e as f64)) as f32
    })?;
    if t == 1 {
        return Ok(mean);
    }
    let z = noise.ok_or_else(|| Error::InvalidParameter(format!("ancestral step at t={t} requires noise")))?;
    z.ensure_shape(x_t.shape())?;
    let sigma = sched.posterior_variance(t).sqrt();
    let out = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((&x, &e), &n)| (inv_sqrt_alpha * (x as f64 - eps_coef * e as f64) + sigma * n as f64) as f32)
        .collect();
    ImageTensor::new(x_t.shape(), out)
}

/// σ_t for the DDIM step that reproduces the ancestral sampler (η = 1).
pub fn ddpm_equivalent_sigma(ab_hi: f64, ab_lo: f64) -> f64 {
    ((1.0 - ab_lo) / (1.0 - ab_hi) * (1.0 - ab_hi / ab_lo)).sqrt()
}

/// Full T-step ancestral sampling, clamped to [-1, 1].
pub fn ancestral_generate(
    model: &impl EpsPredictor,
    shape: ImageShape,
    sched: &NoiseSchedule,
    seed_v: u64,
    n: usize,
) -> Result<Vec<ImageTensor>> {
    ensure!(n >= 1, "need at least one image");
    par_chunks(n, |range| {
        let idx: Vec<usize> = range.collect();
        let mut xs: Vec<_> = idx.iter().map(|&i| latent_noise(shape, seed_v, i)).collect();
        let mut rngs: Vec<_> = idx
            .iter()
            .map(|&i| seed::rng(seed_v, &[seed::key("ancestral"), i as u64]))
            .collect();
        for t in (1..=sched.steps()).rev() {
            let eps = model.predict_eps(&xs, t)?;
            xs = xs
                .iter()
                .zip(&eps)
                .zip(rngs.iter_mut())
                .map(|((x, e), rng)| {
                    let z = (t > 1).then(|| ImageTensor::randn(shape, rng));
                    ddpm_sample_step(x, t, e, sched, z.as_ref())
                })
                .collect::<Result<_>>()?;
        }
        Ok(xs.into_iter().map(|x| x.clamp(-1.0, 1.0)).collect())
    })
}
