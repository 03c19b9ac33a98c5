//! Real-vs-generated detector: a small strided CNN trained with binary
//! cross-entropy on randomly cropped and flipped inputs.

use std::path::Path;

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Container};
use crate::dire::{make_input, DireTriple, InputMode, Label};
use crate::epsnet::stack_images;
use crate::error::{ensure, Error, Result};
use crate::evalkit::metrics::accuracy;
use crate::image::{ImageShape, ImageTensor};
use crate::nn::{self, Adam, AdamConfig, Gradients, Graph, ParamStore, Scalar, Tensor, Var};
use crate::seed;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DIRD";

/// Probabilities are clamped to [EPS, 1 − EPS] inside the loss.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub mode: InputMode,
    pub in_channels: usize,
    /// Side of the square crop the network consumes.
    pub crop: usize,
    pub width: usize,
    pub blocks: usize,
}

impl DetectorConfig {
    pub fn new(mode: InputMode, image_channels: usize, crop: usize) -> Self {
        Self {
            mode,
            in_channels: mode.channels(image_channels),
            crop,
            width: 16,
            blocks: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.in_channels >= 1, "detector needs at least one input channel");
        ensure!(self.crop >= 1, "crop must be >= 1");
        ensure!(self.width >= 1 && self.blocks >= 1, "width and blocks must be >= 1");
        Ok(())
    }

    pub fn input_shape(&self) -> ImageShape {
        ImageShape::square(self.in_channels, self.crop)
    }

    fn block_channels(&self, i: usize) -> usize {
        self.width << i.min(2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    /// Validation accuracy is measured every this many steps and at the end.
    pub eval_every: usize,
    pub seed: u64,
    pub augment: bool,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-3,
            steps: 1000,
            eval_every: 100,
            seed: 0,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrace {
    pub losses: Vec<f32>,
    /// (step, validation ACC in percent)
    pub val_acc: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_val_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel {
    config: DetectorConfig,
    params: ParamStore<f32>,
}

/// Σ_i −[y_i·ln y′_i + (1−y_i)·ln(1−y′_i)] with y′ clamped to [1e-7, 1−1e-7].
pub fn bce_loss(y: &[f32], y_prime: &[f64]) -> Result<f64> {
    ensure!(
        y.len() == y_prime.len(),
        "bce_loss: {} labels vs {} predictions",
        y.len(),
        y_prime.len()
    );
    Ok(y.iter()
        .zip(y_prime)
        .map(|(&yi, &pi)| {
            let p = pi.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let yi = yi as f64;
            -(yi * p.ln() + (1.0 - yi) * (1.0 - p).ln())
        })
        .sum())
}

/// ∂bce/∂y′ = (y′ − y)/(y′(1 − y′)); zero where the clamp is active.
pub fn bce_grad(y: &[f32], y_prime: &[f64]) -> Vec<f64> {
    y.iter()
        .zip(y_prime)
        .map(|(&yi, &p)| {
            if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
                0.0
            } else {
                (p - yi as f64) / (p * (1.0 - p))
            }
        })
        .collect()
}

/// A sampled crop window and flip decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

impl Augmentation {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, crop: usize) -> Result<Self> {
        ensure!(
            height >= crop && width >= crop,
            "image {height}x{width} smaller than crop {crop}"
        );
        Ok(Self {
            top: rng.random_range(0..=height - crop),
            left: rng.random_range(0..=width - crop),
            flip: rng.random_bool(0.5),
        })
    }

    pub fn apply(&self, img: &ImageTensor, crop: usize) -> Result<ImageTensor> {
        let out = img.crop(self.top, self.left, crop, crop)?;
        Ok(if self.flip { out.flip_horizontal() } else { out })
    }
}

/// Random crop to `crop`×`crop`, then horizontal flip with probability 0.5.
pub fn augment_train<R: Rng + ?Sized>(img: &ImageTensor, crop: usize, rng: &mut R) -> Result<ImageTensor> {
    Augmentation::sample(rng, img.height(), img.width(), crop)?.apply(img, crop)
}

/// Deterministic central `crop`×`crop` window.
pub fn center_crop_test(img: &ImageTensor, crop: usize) -> Result<ImageTensor> {
    ensure!(
        img.height() >= crop && img.width() >= crop,
        "image {}x{} smaller than crop {crop}",
        img.height(),
        img.width()
    );
    img.crop((img.height() - crop) / 2, (img.width() - crop) / 2, crop, crop)
}

fn conv<T: Scalar>(g: &mut Graph<T>, x: Var, name: &str, stride: usize) -> Var {
    let w = g.param(&format!("{name}.w"));
    let b = g.param(&format!("{name}.b"));
    let h = g.conv2d(x, w, b, stride, 1);
    g.silu(h)
}

fn build_forward<T: Scalar>(g: &mut Graph<T>, cfg: &DetectorConfig, x: Var) -> Var {
    let mut h = x;
    for i in 0..cfg.blocks {
        h = conv(g, h, &format!("block{i}.conv"), 1);
        h = conv(g, h, &format!("block{i}.down"), 2);
    }
    let pooled = g.global_avg_pool(h);
    let w = g.param("head.w");
    let b = g.param("head.b");
    g.linear(pooled, w, b)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Summed BCE over a batch and its parameter gradients, in any precision.
pub fn loss_and_grads_with<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &DetectorConfig,
    inputs: &[ImageTensor],
    labels: &[f32],
) -> Result<(f64, Gradients<T>)> {
    ensure!(!inputs.is_empty(), "empty batch");
    ensure!(inputs.len() == labels.len(), "inputs and labels differ in length");
    for x in inputs {
        x.ensure_shape(cfg.input_shape())?;
    }
    let mut g = Graph::new(params);
    let x = g.input(stack_images(inputs));
    let logits = build_forward(&mut g, cfg, x);
    let probs: Vec<f64> = g
        .value(logits)
        .data()
        .iter()
        .map(|l| sigmoid(l.to_f64_lossy()))
        .collect();
    let loss = bce_loss(labels, &probs)?;
    let dprob = bce_grad(labels, &probs);
    let dlogit: Vec<T> = dprob
        .iter()
        .zip(&probs)
        .map(|(d, p)| T::from_f64_lossy(d * p * (1.0 - p)))
        .collect();
    let grads = g.backward(logits, Tensor::from_vec(vec![inputs.len(), 1], dlogit));
    Ok((loss, grads))
}

impl DetectorModel {
    pub fn init(config: DetectorConfig, seed_v: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed_v, &[seed::key("detector-init")]);
        let mut ps = ParamStore::new();
        let mut cin = config.in_channels;
        for i in 0..config.blocks {
            let c = config.block_channels(i);
            for (part, from) in [("conv", cin), ("down", c)] {
                ps.insert(
                    format!("block{i}.{part}.w"),
                    nn::init_normal(&mut rng, vec![c, from, 3, 3], from * 9, 1.0),
                );
                ps.insert(format!("block{i}.{part}.b"), Tensor::zeros(vec![c]));
            }
            cin = c;
        }
        ps.insert("head.w", nn::init_normal(&mut rng, vec![1, cin], cin, 1.0));
        ps.insert("head.b", Tensor::zeros(vec![1]));
        Ok(Self { config, params: ps })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    /// Probabilities of "generated" for crop-sized inputs.
    pub fn predict_batch(&self, imgs: &[ImageTensor]) -> Result<Vec<f64>> {
        if imgs.is_empty() {
            return Ok(Vec::new());
        }
        for x in imgs {
            x.ensure_shape(self.config.input_shape())?;
        }
        let mut g = Graph::inference(&self.params);
        let x = g.input(stack_images(imgs));
        let logits = build_forward(&mut g, &self.config, x);
        Ok(g.value(logits).data().iter().map(|&l| sigmoid(l as f64)).collect())
    }

    /// Probability that a crop-sized input is generated.
    pub fn predict(&self, img: &ImageTensor) -> Result<f64> {
        Ok(self.predict_batch(std::slice::from_ref(img))?[0])
    }

    /// Center-crop then [`DetectorModel::predict_batch`], in fixed-size chunks.
    pub fn score_images(&self, imgs: &[ImageTensor]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(imgs.len());
        for chunk in imgs.chunks(64) {
            let crops = chunk
                .iter()
                .map(|x| center_crop_test(x, self.config.crop))
                .collect::<Result<Vec<_>>>()?;
            out.extend(self.predict_batch(&crops)?);
        }
        Ok(out)
    }

    /// Scores for triples under this detector's input mode.
    pub fn score_triples(&self, triples: &[DireTriple]) -> Result<Vec<f64>> {
        let inputs: Vec<_> = triples.iter().map(|t| make_input(self.config.mode, t)).collect();
        self.score_images(&inputs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let container = Container {
            magic: CHECKPOINT_MAGIC,
            config: serde_json::to_string(&self.config).expect("config serializes"),
            alpha_bar: Vec::new(),
            params: self.params.clone(),
        };
        checkpoint::write(path, &container)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = checkpoint::read(path, CHECKPOINT_MAGIC)?;
        let config: DetectorConfig =
            serde_json::from_str(&c.config).map_err(|e| Error::format(path, format!("bad config block: {e}")))?;
        let reference = Self::init(config.clone(), 0)?;
        if reference.params.len() != c.params.len()
            || reference
                .params
                .iter()
                .any(|(n, t)| c.params.get(n).map(|p| p.shape() != t.shape()).unwrap_or(true))
        {
            return Err(Error::format(path, "parameters do not match the stored config"));
        }
        Ok(Self {
            config,
            params: c.params,
        })
    }
}

/// Mini-batch BCE training with class-balanced batches; returns the
/// parameters with the best validation accuracy (earliest on ties).
pub fn train_detector(
    train: &[DireTriple],
    val: &[DireTriple],
    config: DetectorConfig,
    cfg: &DetectorTrainConfig,
) -> Result<(DetectorModel, DetectorTrace)> {
    ensure!(cfg.batch_size >= 2, "detector batch must hold both classes");
    ensure!(cfg.lr > 0.0, "learning rate must be > 0");
    ensure!(cfg.eval_every >= 1, "eval_every must be >= 1");
    let inputs: Vec<ImageTensor> = train.iter().map(|t| make_input(config.mode, t)).collect();
    let real: Vec<usize> = (0..train.len()).filter(|&i| train[i].label == Label::Real).collect();
    let fake: Vec<usize> = (0..train.len())
        .filter(|&i| train[i].label == Label::Generated)
        .collect();
    if real.is_empty() || fake.is_empty() {
        return Err(Error::InvalidParameter(
            "detector training set must contain both real and generated samples".into(),
        ));
    }
    let val_inputs: Vec<ImageTensor> = val.iter().map(|t| make_input(config.mode, t)).collect();
    let val_labels: Vec<f32> = val.iter().map(|t| t.label.target()).collect();

    let mut model = DetectorModel::init(config, cfg.seed)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &model.params);
    let crop = model.config.crop;
    let half = cfg.batch_size / 2;
    let mut trace = DetectorTrace {
        losses: Vec::with_capacity(cfg.steps),
        val_acc: Vec::new(),
        best_step: 0,
        best_val_acc: f64::NEG_INFINITY,
    };
    let mut best = model.params.clone();

    let evaluate =
        |model: &DetectorModel, step: usize, trace: &mut DetectorTrace, best: &mut ParamStore<f32>| -> Result<()> {
            if val_inputs.is_empty() {
                *best = model.params.clone();
                trace.best_step = step;
                return Ok(());
            }
            let scores = model.score_images(&val_inputs)?;
            let acc = accuracy(&scores, &val_labels, 0.5)?;
            trace.val_acc.push((step, acc));
            if acc > trace.best_val_acc {
                trace.best_val_acc = acc;
                trace.best_step = step;
                *best = model.params.clone();
            }
            Ok(())
        };

    for step in 0..cfg.steps {
        let mut rng = seed::rng(cfg.seed, &[seed::key("detector-train"), step as u64]);
        let mut picks: Vec<usize> = (0..half).map(|_| real[rng.random_range(0..real.len())]).collect();
        picks.extend((half..cfg.batch_size).map(|_| fake[rng.random_range(0..fake.len())]));
        let batch = picks
            .iter()
            .map(|&i| {
                if cfg.augment {
                    augment_train(&inputs[i], crop, &mut rng)
                } else {
                    center_crop_test(&inputs[i], crop)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<f32> = picks.iter().map(|&i| train[i].label.target()).collect();
        let (loss, grads) = loss_and_grads_with(&model.params, &model.config, &batch, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: loss });
        }
        adam.step(&mut model.params, &grads);
        trace.losses.push(loss as f32);
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            evaluate(&model, step + 1, &mut trace, &mut best)?;
            debug!(
                "detector step {}: loss {loss:.4}, val acc {:?}",
                step + 1,
                trace.val_acc.last()
            );
        }
    }
    if cfg.steps == 0 {
        evaluate(&model, 0, &mut trace, &mut best)?;
    }
    model.params = best;
    Ok((model, trace))
}
