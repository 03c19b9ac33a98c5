//! The ε-prediction network and its training loop.
//!
//! Architecture: a small convolutional encoder–decoder. Each resolution level
//! has one 3×3 conv whose input is scaled and shifted per channel by a
//! projection of a sinusoidal time embedding; levels are joined by stride-2
//! convs on the way down and nearest upsampling + conv on the way up, with
//! additive skips.

use std::path::Path;

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Container};
use crate::error::{ensure, Error, Result};
use crate::image::{ImageShape, ImageTensor};
use crate::nn::{self, Adam, AdamConfig, Gradients, Graph, ParamStore, Scalar, Tensor, Var};
use crate::schedule::NoiseSchedule;
use crate::seed;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DIRM";

/// Anything that predicts the noise component of a batch of states at step `t`.
pub trait EpsPredictor: Sync {
    fn predict_eps(&self, xs: &[ImageTensor], t: usize) -> Result<Vec<ImageTensor>>;
}

/// Predicts the same constant everywhere. With a constant prediction DDIM
/// inversion and reconstruction are exact inverses.
#[derive(Clone, Copy, Debug)]
pub struct ConstantEps(pub f32);

impl EpsPredictor for ConstantEps {
    fn predict_eps(&self, xs: &[ImageTensor], _t: usize) -> Result<Vec<ImageTensor>> {
        Ok(xs.iter().map(|x| ImageTensor::filled(x.shape(), self.0)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpsConfig {
    pub channels: usize,
    pub image_size: usize,
    pub width: usize,
    /// Number of 2× downsamplings.
    pub levels: usize,
    pub time_dim: usize,
}

impl Default for EpsConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            image_size: 32,
            width: 32,
            levels: 2,
            time_dim: 64,
        }
    }
}

impl EpsConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.channels >= 1, "channels must be >= 1");
        ensure!(self.width >= 1, "width must be >= 1");
        ensure!(
            self.time_dim >= 2 && self.time_dim % 2 == 0,
            "time_dim must be even and >= 2, got {}",
            self.time_dim
        );
        let factor = 1usize << self.levels;
        ensure!(
            self.image_size >= factor && self.image_size % factor == 0,
            "image_size {} must be divisible by 2^levels = {factor}",
            self.image_size
        );
        Ok(())
    }

    pub fn image_shape(&self) -> ImageShape {
        ImageShape::square(self.channels, self.image_size)
    }

    fn level_channels(&self, level: usize) -> usize {
        if level == 0 {
            self.width
        } else {
            2 * self.width
        }
    }
}

/// Optimization settings for [`train_diffusion`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 2e-4,
            steps: 20_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, "batch size must be >= 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "learning rate must be > 0");
        Ok(())
    }
}

/// Source of clean training images.
pub trait ImageSource {
    fn batch(&mut self, step: usize, n: usize) -> Result<Vec<ImageTensor>>;
}

/// Cycles through a fixed pool in order.
impl ImageSource for Vec<ImageTensor> {
    fn batch(&mut self, step: usize, n: usize) -> Result<Vec<ImageTensor>> {
        if self.is_empty() {
            return Err(Error::Empty("image pool".into()));
        }
        Ok((0..n).map(|i| self[(step * n + i) % self.len()].clone()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredConfig {
    model: EpsConfig,
    optimizer: AdamConfig,
}

/// Parameters plus architecture of ε_θ, bound to the schedule it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsModel {
    config: EpsConfig,
    schedule: NoiseSchedule,
    params: ParamStore<f32>,
    optimizer: AdamConfig,
}

fn conv_w(ps: &mut ParamStore<f32>, rng: &mut impl Rng, name: &str, cout: usize, cin: usize, gain: f64) {
    ps.insert(
        format!("{name}.w"),
        nn::init_normal(rng, vec![cout, cin, 3, 3], cin * 9, gain),
    );
    ps.insert(format!("{name}.b"), Tensor::zeros(vec![cout]));
}

fn linear_w(ps: &mut ParamStore<f32>, rng: &mut impl Rng, name: &str, out: usize, inp: usize, gain: f64) {
    ps.insert(format!("{name}.w"), nn::init_normal(rng, vec![out, inp], inp, gain));
    ps.insert(format!("{name}.b"), Tensor::zeros(vec![out]));
}

fn conv<T: Scalar>(g: &mut Graph<T>, x: Var, name: &str, stride: usize) -> Var {
    let w = g.param(&format!("{name}.w"));
    let b = g.param(&format!("{name}.b"));
    g.conv2d(x, w, b, stride, 1)
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, name: &str) -> Var {
    let w = g.param(&format!("{name}.w"));
    let b = g.param(&format!("{name}.b"));
    g.linear(x, w, b)
}

/// Time-conditioned conv block: silu(conv(modulate(h, t))).
fn block<T: Scalar>(g: &mut Graph<T>, h: Var, temb: Var, name: &str) -> Var {
    let scale = linear(g, temb, &format!("{name}.scale"));
    let shift = linear(g, temb, &format!("{name}.shift"));
    let h = g.modulate(h, scale, shift);
    let h = conv(g, h, name, 1);
    g.silu(h)
}

fn build_forward<T: Scalar>(g: &mut Graph<T>, cfg: &EpsConfig, x: Var, temb_raw: Var) -> Var {
    let temb = linear(g, temb_raw, "temb.fc1");
    let temb = g.silu(temb);

    let h = conv(g, x, "conv_in", 1);
    let mut h = g.silu(h);
    let mut skips = Vec::with_capacity(cfg.levels + 1);
    for level in 0..=cfg.levels {
        h = block(g, h, temb, &format!("enc{level}"));
        skips.push(h);
        if level < cfg.levels {
            let d = conv(g, h, &format!("down{level}"), 2);
            h = g.silu(d);
        }
    }
    for level in (0..cfg.levels).rev() {
        let u = g.upsample2(h);
        let u = conv(g, u, &format!("up{level}"), 1);
        let u = g.silu(u);
        let u = g.add(u, skips[level]);
        h = block(g, u, temb, &format!("dec{level}"));
    }
    conv(g, h, "conv_out", 1)
}

pub(crate) fn stack_images<T: Scalar>(xs: &[ImageTensor]) -> Tensor<T> {
    let s = xs[0].shape();
    let mut data = Vec::with_capacity(xs.len() * s.numel());
    for x in xs {
        data.extend(x.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor::from_vec(vec![xs.len(), s.channels, s.height, s.width], data)
}

pub(crate) fn unstack_images(t: &Tensor<f32>) -> Vec<ImageTensor> {
    let (n, c, h, w) = t.nchw();
    let per = c * h * w;
    (0..n)
        .map(|i| {
            ImageTensor::new(ImageShape::new(c, h, w), t.data()[i * per..(i + 1) * per].to_vec())
                .expect("unstack shape")
        })
        .collect()
}

impl EpsModel {
    /// Deterministic initialization from `seed`.
    pub fn init(config: EpsConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, &[seed::key("epsnet-init")]);
        let mut ps = ParamStore::new();
        let td = config.time_dim;
        linear_w(&mut ps, &mut rng, "temb.fc1", td, td, 1.0);
        conv_w(&mut ps, &mut rng, "conv_in", config.width, config.channels, 1.0);
        let modulation = |ps: &mut ParamStore<f32>, rng: &mut _, name: &str, ch: usize| {
            linear_w(ps, rng, &format!("{name}.scale"), ch, td, 0.2);
            linear_w(ps, rng, &format!("{name}.shift"), ch, td, 0.2);
        };
        for level in 0..=config.levels {
            let ch = config.level_channels(level);
            modulation(&mut ps, &mut rng, &format!("enc{level}"), ch);
            conv_w(&mut ps, &mut rng, &format!("enc{level}"), ch, ch, 1.0);
            if level < config.levels {
                let next = config.level_channels(level + 1);
                conv_w(&mut ps, &mut rng, &format!("down{level}"), next, ch, 1.0);
            }
        }
        for level in (0..config.levels).rev() {
            let (ch, below) = (config.level_channels(level), config.level_channels(level + 1));
            conv_w(&mut ps, &mut rng, &format!("up{level}"), ch, below, 1.0);
            modulation(&mut ps, &mut rng, &format!("dec{level}"), ch);
            conv_w(&mut ps, &mut rng, &format!("dec{level}"), ch, ch, 1.0);
        }
        conv_w(&mut ps, &mut rng, "conv_out", config.channels, config.width, 0.1);
        Ok(Self {
            config,
            schedule,
            params: ps,
            optimizer: AdamConfig::default(),
        })
    }

    pub fn config(&self) -> &EpsConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn optimizer(&self) -> AdamConfig {
        self.optimizer
    }

    fn check_step(&self, t: usize) -> Result<()> {
        let max = self.schedule.steps();
        if t < 1 || t > max {
            return Err(Error::StepOutOfRange { t, min: 1, max });
        }
        Ok(())
    }

    /// Predicted noise for a batch of states, each with its own step index.
    pub fn forward_batch(&self, xs: &[ImageTensor], ts: &[usize]) -> Result<Vec<ImageTensor>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        ensure!(
            xs.len() == ts.len(),
            "{} images but {} step indices",
            xs.len(),
            ts.len()
        );
        for x in xs {
            x.ensure_shape(self.config.image_shape())?;
        }
        for &t in ts {
            self.check_step(t)?;
        }
        let mut g = Graph::inference(&self.params);
        let x = g.input(stack_images(xs));
        let temb = g.input(nn::timestep_embedding(ts, self.config.time_dim));
        let out = build_forward(&mut g, &self.config, x, temb);
        Ok(unstack_images(g.value(out)))
    }

    /// ε_θ(x_t, t) for one image.
    pub fn eps_forward(&self, xt: &ImageTensor, t: usize) -> Result<ImageTensor> {
        Ok(self.forward_batch(std::slice::from_ref(xt), &[t])?.remove(0))
    }

    /// Simplified objective and its parameter gradients for one batch.
    pub fn loss_and_grads(
        &self,
        x0s: &[ImageTensor],
        ts: &[usize],
        eps: &[ImageTensor],
    ) -> Result<(f64, Gradients<f32>)> {
        loss_and_grads_with(&self.params, &self.config, &self.schedule, x0s, ts, eps)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let stored = StoredConfig {
            model: self.config.clone(),
            optimizer: self.optimizer,
        };
        let container = Container {
            magic: CHECKPOINT_MAGIC,
            config: serde_json::to_string(&stored).expect("config serializes"),
            alpha_bar: self.schedule.alpha_bar_table().to_vec(),
            params: self.params.clone(),
        };
        checkpoint::write(path, &container)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = checkpoint::read(path, CHECKPOINT_MAGIC)?;
        let stored: StoredConfig =
            serde_json::from_str(&c.config).map_err(|e| Error::format(path, format!("bad config block: {e}")))?;
        let schedule = NoiseSchedule::from_alpha_bar(c.alpha_bar)?;
        let reference = Self::init(stored.model.clone(), schedule.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = c
                .params
                .get(name)
                .ok_or_else(|| Error::format(path, format!("missing parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::format(
                    path,
                    format!("parameter {name} has shape {:?}", got.shape()),
                ));
            }
        }
        if c.params.len() != reference.params.len() {
            return Err(Error::format(path, "unexpected extra parameters"));
        }
        Ok(Self {
            config: stored.model,
            schedule,
            params: c.params,
            optimizer: stored.optimizer,
        })
    }
}

impl EpsPredictor for EpsModel {
    fn predict_eps(&self, xs: &[ImageTensor], t: usize) -> Result<Vec<ImageTensor>> {
        self.forward_batch(xs, &vec![t; xs.len()])
    }
}

/// Generic-precision loss + gradients; `f64` is used by gradient checks.
pub fn loss_and_grads_with<T: Scalar>(
    params: &ParamStore<T>,
    config: &EpsConfig,
    schedule: &NoiseSchedule,
    x0s: &[ImageTensor],
    ts: &[usize],
    eps: &[ImageTensor],
) -> Result<(f64, Gradients<T>)> {
    ensure!(!x0s.is_empty(), "empty batch");
    ensure!(
        x0s.len() == ts.len() && x0s.len() == eps.len(),
        "batch lengths differ: {} images, {} steps, {} noises",
        x0s.len(),
        ts.len(),
        eps.len()
    );
    let shape = config.image_shape();
    for (x, e) in x0s.iter().zip(eps) {
        x.ensure_shape(shape)?;
        e.ensure_shape(shape)?;
    }
    for &t in ts {
        if t < 1 || t > schedule.steps() {
            return Err(Error::StepOutOfRange {
                t,
                min: 1,
                max: schedule.steps(),
            });
        }
    }
    let per = shape.numel();
    let mut xt = Vec::with_capacity(x0s.len() * per);
    for ((x0, e), &t) in x0s.iter().zip(eps).zip(ts) {
        let ab = schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        xt.extend(
            x0.data()
                .iter()
                .zip(e.data())
                .map(|(&x, &n)| T::from_f64_lossy(a * x as f64 + b * n as f64)),
        );
    }
    let target: Tensor<T> = stack_images(eps);
    let mut g = Graph::new(params);
    let x = g.input(Tensor::from_vec(
        vec![x0s.len(), shape.channels, shape.height, shape.width],
        xt,
    ));
    let temb = g.input(nn::timestep_embedding(ts, config.time_dim));
    let out = build_forward(&mut g, config, x, temb);
    let numel = target.numel() as f64;
    let pred = g.value(out).data();
    let mut loss = 0.0f64;
    let scale = T::from_f64_lossy(2.0 / numel);
    let seed_grad: Vec<T> = pred
        .iter()
        .zip(target.data())
        .map(|(&p, &e)| {
            let d = p - e;
            loss += d.to_f64_lossy() * d.to_f64_lossy();
            d * scale
        })
        .collect();
    let grads = g.backward(out, Tensor::from_vec(target.shape().to_vec(), seed_grad));
    Ok((loss / numel, grads))
}

/// Mean over batch and elements of ‖eps − ε_θ(√ᾱ_t·x0 + √(1−ᾱ_t)·eps, t)‖².
pub fn simple_loss(
    model: &impl EpsPredictor,
    schedule: &NoiseSchedule,
    x0s: &[ImageTensor],
    ts: &[usize],
    eps: &[ImageTensor],
) -> Result<f64> {
    ensure!(!x0s.is_empty(), "empty batch");
    ensure!(x0s.len() == ts.len() && x0s.len() == eps.len(), "batch lengths differ");
    let mut total = 0.0;
    let mut count = 0usize;
    for ((x0, e), &t) in x0s.iter().zip(eps).zip(ts) {
        let xt = crate::schedule::q_sample(x0, t, e, schedule)?;
        let pred = model.predict_eps(std::slice::from_ref(&xt), t)?.remove(0);
        pred.ensure_shape(e.shape())?;
        total += pred
            .data()
            .iter()
            .zip(e.data())
            .map(|(&p, &n)| (p as f64 - n as f64).powi(2))
            .sum::<f64>();
        count += e.len();
    }
    Ok(total / count as f64)
}

/// Draw the (t, eps) pairs for one training step.
pub fn sample_noise_batch(
    seed_v: u64,
    step: usize,
    n: usize,
    shape: ImageShape,
    max_t: usize,
) -> (Vec<usize>, Vec<ImageTensor>) {
    let mut rng = seed::rng(seed_v, &[seed::key("diffusion-train"), step as u64]);
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=max_t)).collect();
    let eps = (0..n).map(|_| ImageTensor::randn(shape, &mut rng)).collect();
    (ts, eps)
}

/// One optimizer step per iteration on freshly drawn (x0, t, eps).
///
/// Returns the trained model and the per-step loss trace.
pub fn train_diffusion(
    mut model: EpsModel,
    source: &mut impl ImageSource,
    cfg: &TrainConfig,
) -> Result<(EpsModel, Vec<f32>)> {
    cfg.validate()?;
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut adam = Adam::new(adam_cfg, &model.params);
    let shape = model.config.image_shape();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let x0s = source.batch(step, cfg.batch_size)?;
        let (ts, eps) = sample_noise_batch(cfg.seed, step, cfg.batch_size, shape, model.schedule.steps());
        let (loss, grads) = model.loss_and_grads(&x0s, &ts, &eps)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: loss });
        }
        adam.step(&mut model.params, &grads);
        if !model.params.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: f64::NAN });
        }
        if step % 500 == 0 {
            debug!("diffusion step {step}: loss {loss:.5}");
        }
        losses.push(loss as f32);
    }
    model.optimizer = adam_cfg;
    Ok((model, losses))
}
