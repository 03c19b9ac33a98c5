//! Acceptance suite. Prints one PASS/FAIL line per criterion. A stage that
//! errors always exits nonzero; a criterion that runs but misses its target
//! only does so under `DIRE_ACCEPTANCE_STRICT=1`, since some targets are out
//! of reach for the compact profile (see README).
//!
//! The pipeline criteria run the `compact` profile end to end (about half an
//! hour on one core). Set `DIRE_ACCEPTANCE_DIR` to keep the artifacts; stages
//! whose outputs already exist there are not rerun. `DIRE_ACCEPTANCE_QUICK=1`
//! skips the pipeline criteria.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use dire_core::datagen::{load_split, SplitCounts};
use dire_core::ddim::{self, StepSequence};
use dire_core::dire::{compute_dire_batch, make_input};
use dire_core::epsnet::{self, ConstantEps};
use dire_core::evalkit::analysis::dft2;
use dire_core::evalkit::perturb::{quantization_table, LUMINANCE_TABLE};
use dire_core::evalkit::{self, average_precision, Condition, EvalReport, Perturbation, TripleSource};
use dire_core::forensics::{self, bce_loss};
use dire_core::pipeline::{self, Ablation};
use dire_core::{
    seed, DetectorModel, EpsConfig, EpsModel, ImageShape, ImageTensor, InputMode, Label, NoiseSchedule, RunConfig,
    Split,
};

struct Check {
    name: String,
    ok: bool,
    errored: bool,
    detail: String,
}

#[derive(Default)]
struct Checks(Vec<Check>);

impl Checks {
    fn add(&mut self, name: &str, ok: bool, detail: impl Into<String>) {
        self.0.push(Check {
            name: name.to_string(),
            ok,
            errored: false,
            detail: detail.into(),
        });
    }

    fn error(&mut self, name: &str, detail: impl Into<String>) {
        self.add(name, false, detail);
        self.0.last_mut().unwrap().errored = true;
    }

    fn near(&mut self, name: &str, got: f64, want: f64, tol: f64) {
        self.add(
            name,
            (got - want).abs() <= tol,
            format!("got {got:.9}, want {want:.9} ± {tol:e}"),
        );
    }

    fn passed(&self) -> bool {
        self.0.iter().all(|c| c.ok)
    }
}

struct Outcome {
    id: &'static str,
    title: &'static str,
    checks: Checks,
    seconds: f64,
}

impl Outcome {
    fn print_details(&self) {
        println!("{} {}", self.id, self.title);
        for c in &self.checks.0 {
            println!("    {} {}: {}", if c.ok { "ok  " } else { "FAIL" }, c.name, c.detail);
        }
    }

    fn print_verdict(&self) {
        let n_ok = self.checks.0.iter().filter(|c| c.ok).count();
        println!(
            "{} {} {} ({}/{} checks, {:.1} s)",
            if self.checks.passed() { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            n_ok,
            self.checks.0.len(),
            self.seconds
        );
    }
}

fn report(outcomes: &[Outcome]) -> ExitCode {
    for o in outcomes {
        o.print_details();
    }
    println!();
    for o in outcomes {
        o.print_verdict();
    }
    let errored = outcomes.iter().flat_map(|o| &o.checks.0).any(|c| c.errored);
    let strict = std::env::var_os("DIRE_ACCEPTANCE_STRICT").is_some();
    if errored || (strict && !outcomes.iter().all(|o| o.checks.passed())) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn timed(id: &'static str, title: &'static str, f: impl FnOnce(&mut Checks)) -> Outcome {
    let start = Instant::now();
    let mut checks = Checks::default();
    f(&mut checks);
    Outcome {
        id,
        title,
        checks,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn scalar(v: f32) -> ImageTensor {
    ImageTensor::filled(ImageShape::square(1, 1), v)
}

fn random_images(n: usize, shape: ImageShape, s: u64) -> Vec<ImageTensor> {
    let mut rng = seed::rng(s, &[]);
    (0..n)
        .map(|_| ImageTensor::randn(shape, &mut rng).clamp(-1.0, 1.0))
        .collect()
}

// ---------------------------------------------------------------- C1 ----

fn equation_suite(c: &mut Checks) {
    // Schedule: ᾱ as a running product of (1 − β).
    let sched = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let mut prod = 1.0f64;
    let mut worst = 0.0f64;
    for t in 1..=200 {
        let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 199.0;
        prod *= 1.0 - beta;
        worst = worst.max((sched.alpha_bar(t) - prod).abs() / prod);
    }
    c.add("alpha_bar product", worst < 1e-12, format!("max rel err {worst:e}"));

    // DDIM reverse step, scalar cases.
    let one = scalar(1.0);
    let zero = scalar(0.0);
    let out = ddim::reverse_step_with(&one, 0.25, 0.5, &zero, 0.0, None).unwrap();
    c.near("reverse step zero eps", out.data()[0] as f64, 2f64.sqrt(), 1e-6);
    let two = NoiseSchedule::from_alpha_bar(vec![1.0, 0.9, 0.6]).unwrap();
    let x = scalar(0.3);
    let got = ddim::ddim_reverse_step(&x, 2, 1, &one, &two, 0.0, None).unwrap().data()[0] as f64;
    let want = 0.9f64.sqrt() * (0.3 - 0.4f64.sqrt()) / 0.6f64.sqrt() + 0.1f64.sqrt();
    c.near("reverse step scalar", got, want, 1e-6);
    let stalled = ddim::reverse_step_with(&x, 0.7, 0.7, &scalar(-3.0), 0.0, None).unwrap();
    c.near("reverse step stalled", stalled.data()[0] as f64, 0.3, 1e-7);

    // Inversion step, scalar cases and inverse symmetry.
    let got = ddim::ddim_inversion_step(&x, 1, 2, &one, &two).unwrap().data()[0] as f64;
    let want = 0.6f64.sqrt() * (0.3 / 0.9f64.sqrt() + ((0.4f64 / 0.6).sqrt() - (0.1f64 / 0.9).sqrt()));
    c.near("inversion step scalar", got, want, 1e-6);
    let got = ddim::inversion_step_with(&x, 0.9, 0.6, &zero).unwrap().data()[0] as f64;
    c.near("inversion step zero eps", got, (0.6f64 / 0.9).sqrt() * 0.3, 1e-7);
    let up = ddim::ddim_inversion_step(&x, 1, 2, &scalar(0.7), &two).unwrap();
    let back = ddim::ddim_reverse_step(&up, 2, 1, &scalar(0.7), &two, 0.0, None).unwrap();
    c.near("inversion then reverse", back.data()[0] as f64, 0.3, 1e-6);

    // Ancestral step agrees with DDIM at the DDPM-equivalent σ.
    let t = 120;
    let (ab_hi, ab_lo) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
    let sigma = ddim::ddpm_equivalent_sigma(ab_hi, ab_lo);
    let (xt, e, z) = (scalar(0.4), scalar(-0.8), scalar(1.3));
    let a = ddim::ddpm_sample_step(&xt, t, &e, &sched, Some(&z)).unwrap().data()[0] as f64;
    let b = ddim::ddim_reverse_step(&xt, t, t - 1, &e, &sched, sigma, Some(&z))
        .unwrap()
        .data()[0] as f64;
    c.near("ddpm = ddim at eta 1", a, b, 1e-6);

    // Subsequences.
    let s20 = StepSequence::uniform(200, 20).unwrap();
    let stride_ok = s20.len() == 20 && s20.indices().windows(2).all(|w| w[1] - w[0] == 10) && s20.indices()[19] == 200;
    c.add("subsequence S=20", stride_ok, format!("{:?}", s20.indices()));
    c.add(
        "subsequence S=1",
        StepSequence::uniform(200, 1).unwrap().indices() == [200],
        "",
    );
    c.add("subsequence S>T rejected", StepSequence::uniform(200, 201).is_err(), "");

    // Finite-difference gradients of both networks, 1e-3 relative, f64.
    let eps_cfg = EpsConfig {
        channels: 1,
        image_size: 8,
        width: 4,
        levels: 2,
        time_dim: 8,
    };
    let small = NoiseSchedule::linear(20, 1e-3, 0.1).unwrap();
    let model = EpsModel::init(eps_cfg.clone(), small.clone(), 3).unwrap();
    let p = model.params().cast::<f64>();
    let xs = random_images(2, eps_cfg.image_shape(), 1);
    let (ts, noise) = epsnet::sample_noise_batch(2, 0, 2, eps_cfg.image_shape(), 20);
    let loss = |q: &dire_core::nn::ParamStore<f64>| {
        epsnet::loss_and_grads_with(q, &eps_cfg, &small, &xs, &ts, &noise).unwrap()
    };
    let (_, grads) = loss(&p);
    c.add(
        "eps-net gradients",
        fd_check(&p, |q| loss(q).0, |i, j| grads.get(i).unwrap().data()[j]),
        "10 coordinates",
    );

    let det_cfg = forensics::DetectorConfig {
        width: 2,
        blocks: 2,
        ..forensics::DetectorConfig::new(InputMode::Dire, 1, 6)
    };
    let det = DetectorModel::init(det_cfg.clone(), 4).unwrap();
    let dp = det.params().cast::<f64>();
    let inputs = random_images(4, ImageShape::square(1, 6), 2);
    let labels = [0.0, 1.0, 0.0, 1.0];
    let dloss =
        |q: &dire_core::nn::ParamStore<f64>| forensics::loss_and_grads_with(q, &det_cfg, &inputs, &labels).unwrap();
    let (_, dgrads) = dloss(&dp);
    c.add(
        "detector gradients",
        fd_check(&dp, |q| dloss(q).0, |i, j| dgrads.get(i).unwrap().data()[j]),
        "10 coordinates",
    );

    // BCE cases.
    c.near(
        "bce ignorance",
        bce_loss(&[1.0, 0.0, 1.0], &[0.5; 3]).unwrap(),
        3.0 * 2f64.ln(),
        1e-12,
    );
    c.near(
        "bce scalar",
        bce_loss(&[1.0, 0.0], &[0.9, 0.2]).unwrap(),
        -(0.9f64.ln() + 0.8f64.ln()),
        1e-12,
    );

    // Metrics.
    c.near(
        "acc tie rule",
        evalkit::accuracy(&[0.5, 0.5], &[1.0, 0.0], 0.5).unwrap(),
        50.0,
        0.0,
    );
    c.near(
        "ap last of four",
        average_precision(&[0.9, 0.8, 0.7, 0.1], &[0.0, 0.0, 0.0, 1.0]).unwrap(),
        25.0,
        1e-12,
    );
    c.add(
        "ap exhaustive 2^8 oracle",
        ap_exhaustive(),
        "3 score sets × 255 labelings",
    );

    // JPEG and blur.
    c.add("jpeg q50 table", quantization_table(50).unwrap() == LUMINANCE_TABLE, "");
    let gray = ImageTensor::zeros(ImageShape::square(1, 16));
    let err = evalkit::jpeg_compress(&gray, 65).unwrap().max_abs_diff(&gray) as f64;
    c.add("jpeg mid-gray", err <= 1.0 / 255.0 + 1e-6, format!("max err {err:e}"));
    let tex = ImageTensor::from_fn(ImageShape::square(1, 16), |_, y, x| {
        ((x as f32 * 0.9).sin() * (y as f32 * 0.6).cos()) * 0.8
    });
    let m30 = evalkit::jpeg_compress(&tex, 30).unwrap().mse(&tex);
    let m65 = evalkit::jpeg_compress(&tex, 65).unwrap().mse(&tex);
    c.add(
        "jpeg distortion monotone",
        m30 >= m65,
        format!("mse q30 {m30:e}, q65 {m65:e}"),
    );
    let mut imp = ImageTensor::zeros(ImageShape::square(1, 15));
    imp.set(0, 7, 7, 1.0);
    let w: Vec<f64> = (-3i32..=3).map(|k| (-(k * k) as f64 / 2.0).exp()).collect();
    let centre = (w[3] / w.iter().sum::<f64>()).powi(2);
    c.near(
        "blur impulse centre",
        evalkit::gaussian_blur(&imp, 1.0).unwrap().get(0, 7, 7) as f64,
        centre,
        1e-6,
    );
    let blurred = evalkit::gaussian_blur(&tex, 2.0).unwrap();
    c.near("blur preserves mean", blurred.mean(), tex.mean(), 1e-6);

    // FFT: Parseval against a direct DFT.
    let f = dft2(tex.data(), 16, 16);
    let spatial: f64 = tex.data().iter().map(|&v| (v as f64).powi(2)).sum();
    let freq: f64 = f.iter().map(|z| z.norm_sqr()).sum::<f64>() / 256.0;
    c.add(
        "parseval",
        ((spatial - freq) / spatial).abs() < 1e-6,
        format!("{spatial:.9} vs {freq:.9}"),
    );
    let mut direct_err = 0.0f64;
    for (u, v) in [(0usize, 0usize), (1, 3), (7, 12), (15, 15)] {
        let mut s = (0.0f64, 0.0f64);
        for y in 0..16 {
            for x in 0..16 {
                let ang = -2.0 * std::f64::consts::PI * ((u * y + v * x) as f64) / 16.0;
                let val = tex.get(0, y, x) as f64;
                s.0 += val * ang.cos();
                s.1 += val * ang.sin();
            }
        }
        let z = f[u * 16 + v];
        direct_err = direct_err.max((z.re - s.0).abs().max((z.im - s.1).abs()));
    }
    c.add(
        "fft vs direct dft",
        direct_err < 1e-9,
        format!("max err {direct_err:e}"),
    );

    // Noise pattern of an impulse is the impulse.
    let np = evalkit::noise_pattern(&imp);
    c.add(
        "noise pattern impulse",
        np.get(0, 7, 7) == 1.0 && np.data().iter().filter(|&&v| v != 0.0).count() == 1,
        "",
    );

    // Input modes.
    let triple = dire_core::dire::DireResidual::from_parts(tex.clone(), blurred.clone(), true)
        .unwrap()
        .labeled("x", Label::Real, "t", Split::Test, 0);
    c.add(
        "rgb&dire channels",
        make_input(InputMode::RgbAndDire, &triple).channels() == 2,
        "",
    );
    c.add(
        "dire mode passthrough",
        make_input(InputMode::Dire, &triple) == triple.dire,
        "",
    );
}

fn fd_check(
    p: &dire_core::nn::ParamStore<f64>,
    loss: impl Fn(&dire_core::nn::ParamStore<f64>) -> f64,
    analytic: impl Fn(usize, usize) -> f64,
) -> bool {
    let h = 1e-5;
    let mut checked = 0;
    let mut i = 0;
    while checked < 10 {
        let pi = i % p.len();
        let j = (i * 7919) % p.tensor(pi).numel();
        i += 1;
        let mut plus = p.clone();
        plus.tensor_mut(pi).data_mut()[j] += h;
        let mut minus = p.clone();
        minus.tensor_mut(pi).data_mut()[j] -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let an = analytic(pi, j);
        if fd.abs().max(an.abs()) < 1e-6 {
            continue;
        }
        if (fd - an).abs() / fd.abs().max(an.abs()) > 1e-3 {
            return false;
        }
        checked += 1;
    }
    true
}

/// AP from every distinct threshold, tied groups split in input order.
fn ap_oracle(scores: &[f64], labels: &[f32]) -> f64 {
    let positives = labels.iter().filter(|&&y| y == 1.0).count() as f64;
    let mut ths = scores.to_vec();
    ths.sort_by(|a, b| b.total_cmp(a));
    ths.dedup();
    let (mut tp, mut count, mut ap) = (0.0, 0.0, 0.0);
    for th in ths {
        for i in (0..scores.len()).filter(|&i| scores[i] == th) {
            count += 1.0;
            if labels[i] == 1.0 {
                tp += 1.0;
                ap += tp / count / positives;
            }
        }
    }
    100.0 * ap
}

fn ap_exhaustive() -> bool {
    let sets: [[f64; 8]; 3] = [
        [0.91, 0.13, 0.55, 0.72, 0.05, 0.38, 0.64, 0.27],
        [0.5, 0.5, 0.2, 0.9, 0.2, 0.5, 0.7, 0.1],
        [0.3; 8],
    ];
    sets.iter().all(|s| {
        (1u32..256).all(|mask| {
            let labels: Vec<f32> = (0..8).map(|i| ((mask >> i) & 1) as f32).collect();
            (average_precision(s, &labels).unwrap() - ap_oracle(s, &labels)).abs() < 1e-12
        })
    })
}

// ---------------------------------------------------------------- C2 ----

fn constant_eps_invertibility(c: &mut Checks) {
    let sched = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let xs = random_images(16, ImageShape::square(3, 16), 5);
    for s in [1, 5, 20, 200] {
        let seq = StepSequence::uniform(200, s).unwrap();
        let model = ConstantEps(0.37);
        let lat = ddim::invert_batch(&xs, &model, &sched, &seq).unwrap();
        let rec = ddim::reconstruct_batch(&lat, &model, &sched, &seq).unwrap();
        let err = xs
            .iter()
            .zip(&rec)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0f32, f32::max);
        c.add(&format!("S={s}"), err <= 1e-5, format!("max abs err {err:e}"));
    }
}

// ------------------------------------------------------- pipeline run ----

struct Artifacts {
    cfg: RunConfig,
    wd: PathBuf,
}

fn prepare(cfg: RunConfig, wd: PathBuf) -> dire_core::Result<Artifacts> {
    if !cfg.model_path(&wd, cfg.diffusion.seeds.len() - 1).exists() {
        pipeline::train_diffusion_models(&cfg, &wd)?;
    }
    if !wd
        .join(&cfg.paths.dataset)
        .join(dire_core::datagen::MANIFEST_FILE)
        .exists()
    {
        pipeline::build_dataset_stage(&cfg, &wd)?;
    }
    for mode in [InputMode::Dire, InputMode::Rgb] {
        if !cfg.detector_path(&wd, mode).exists() {
            pipeline::train_detector_stage(&cfg, &wd, mode)?;
        }
    }
    Ok(Artifacts { cfg, wd })
}

fn seen_tag(a: &Artifacts) -> String {
    a.cfg.detector.train_tags[0].clone()
}

fn unseen_tags(a: &Artifacts) -> Vec<String> {
    a.cfg
        .dataset
        .samplers
        .iter()
        .map(|s| s.tag.clone())
        .filter(|t| !a.cfg.detector.train_tags.contains(t))
        .collect()
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

fn eval_report(a: &Artifacts, perturbations: &[Perturbation]) -> dire_core::Result<EvalReport> {
    let mut cfg = a.cfg.clone();
    cfg.eval.perturbations = perturbations.to_vec();
    let (_, report) = pipeline::eval_stage(&cfg, &a.wd, &[InputMode::Dire, InputMode::Rgb])?;
    Ok(report)
}

fn ap_of(report: &EvalReport, det: &str, tag: &str, steps: usize, p: Perturbation) -> f64 {
    report.find(det, tag, steps, p).and_then(|c| c.ap).unwrap_or(f64::NAN)
}

// ---------------------------------------------------------------- C3 ----

fn separability(a: &Artifacts, c: &mut Checks) -> dire_core::Result<()> {
    let manifest = pipeline::load_manifest(&a.cfg, &a.wd)?;
    let tag = seen_tag(a);
    let test = load_split(&manifest, Split::Test, Some(std::slice::from_ref(&tag)))?;
    let per_image = |label: Label| -> Vec<f64> {
        test.iter()
            .filter(|t| t.label == label)
            .map(|t| t.dire.mean())
            .collect()
    };
    let (gen, real) = (per_image(Label::Generated), per_image(Label::Real));
    let (mg, sg) = mean_sd(&gen);
    let (mr, sr) = mean_sd(&real);
    let se = (sg * sg / gen.len() as f64 + sr * sr / real.len() as f64).sqrt();
    c.add(
        "mean DIRE gap",
        gen.len() >= 200 && real.len() >= 200 && mg < mr && mr - mg >= 3.0 * se,
        format!(
            "generated {mg:.5} (n={}), real {mr:.5} (n={}), gap {:.2} SE",
            gen.len(),
            real.len(),
            (mr - mg) / se
        ),
    );
    let report = eval_report(a, &[Perturbation::Identity])?;
    let cell = report
        .find("dire", &tag, a.cfg.dataset.recon_steps, Perturbation::Identity)
        .expect("seen cell evaluated");
    let (acc, ap) = (cell.acc.unwrap_or(0.0), cell.ap.unwrap_or(0.0));
    c.add(
        "detector ACC >= 95",
        acc >= 95.0,
        format!("{acc:.2}% on {} images", cell.n_samples),
    );
    c.add("detector AP >= 99", ap >= 99.0, format!("{ap:.2}%"));
    Ok(())
}

/// Checks that need the trained model; they belong to the unit suite's
/// derived oracles but can only run after training.
fn trained_model_oracles(a: &Artifacts, c: &mut Checks) -> dire_core::Result<()> {
    let models = pipeline::load_models(&a.cfg, &a.wd)?;
    let model = &models[0];
    let sched = model.schedule();
    let shape = model.config().image_shape();
    let seq20 = StepSequence::uniform(sched.steps(), 20)?;
    let n = 64;

    // Inverting model-generated images lands near a standard normal.
    let gen = ddim::ddim_generate(model, shape, sched, &seq20, 4242, n)?;
    let lat = ddim::invert_batch(&gen, model, sched, &seq20)?;
    let vals: Vec<f64> = lat.iter().flat_map(|l| l.data().iter().map(|&v| v as f64)).collect();
    let m = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / m;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    c.add(
        "inverted latents ~ N(0,1)",
        mean.abs() <= 3.0 / m.sqrt() && (var - 1.0).abs() <= 3.0 * (2.0 / (m - 1.0)).sqrt(),
        format!(
            "mean {mean:.4} (3σ {:.4}), var {var:.4} (3σ {:.4})",
            3.0 / m.sqrt(),
            3.0 * (2.0 / (m - 1.0)).sqrt()
        ),
    );

    // Round-trip error on generated images shrinks as S grows.
    let mut errs = Vec::new();
    for s in [5, 10, 20, 50] {
        let seq = StepSequence::uniform(sched.steps(), s)?;
        let r = compute_dire_batch(&gen, model, sched, &seq, true)?;
        errs.push(r.iter().map(|t| t.dire.mean()).sum::<f64>() / n as f64);
    }
    c.add(
        "round-trip error non-increasing in S",
        errs.windows(2).all(|w| w[1] <= w[0]),
        format!("S=5,10,20,50 → {errs:.5?}"),
    );

    // DIRE gap on 64 generated vs 64 real images.
    let real = dire_core::datagen::gen_real(&a.cfg.dataset.family, shape, 4243, n)?;
    let dg: Vec<f64> = compute_dire_batch(&gen, model, sched, &seq20, true)?
        .iter()
        .map(|t| t.dire.mean())
        .collect();
    let dr: Vec<f64> = compute_dire_batch(&real, model, sched, &seq20, true)?
        .iter()
        .map(|t| t.dire.mean())
        .collect();
    let ((mg, sg), (mr, sr)) = (mean_sd(&dg), mean_sd(&dr));
    let se = (sg * sg / n as f64 + sr * sr / n as f64).sqrt();
    c.add(
        "DIRE gap on 64+64",
        mr - mg >= 3.0 * se,
        format!("generated {mg:.5}, real {mr:.5}, {:.2} SE", (mr - mg) / se),
    );

    // Evaluating on the training split scores at least the best validation ACC.
    let det = DetectorModel::load(&a.cfg.detector_path(&a.wd, InputMode::Dire))?;
    let trace: forensics::DetectorTrace = serde_json::from_str(
        &fs::read_to_string(a.cfg.detector_path(&a.wd, InputMode::Dire).with_extension("trace.json")).unwrap(),
    )
    .unwrap();
    let manifest = pipeline::load_manifest(&a.cfg, &a.wd)?;
    let mut src = TripleSource::new(&manifest, model, sched);
    let cond = Condition::new(seen_tag(a), a.cfg.dataset.recon_steps, Perturbation::Identity);
    let r = evalkit::evaluate(&det, "dire", &mut src, &[cond], Split::Train, 0)?;
    let train_acc = r.cells[0].acc.unwrap_or(0.0);
    c.add(
        "train-split ACC >= best val ACC",
        train_acc >= trace.best_val_acc,
        format!("train {train_acc:.2}%, val {:.2}%", trace.best_val_acc),
    );
    Ok(())
}

// ---------------------------------------------------------------- C4 ----

fn generalization(a: &Artifacts, c: &mut Checks) -> dire_core::Result<()> {
    let report = eval_report(a, &[Perturbation::Identity])?;
    let s = a.cfg.dataset.recon_steps;
    let id = Perturbation::Identity;
    let seen = ap_of(&report, "dire", &seen_tag(a), s, id);
    let unseen = unseen_tags(a);
    for t in &unseen {
        let ap = ap_of(&report, "dire", t, s, id);
        c.add(
            &format!("{t} within 10 of seen"),
            ap >= seen - 10.0,
            format!("AP {ap:.2} vs seen {seen:.2}"),
        );
    }
    let dire = evalkit::mean_ap(&report, "dire", &unseen).unwrap_or(f64::NAN);
    let rgb = evalkit::mean_ap(&report, "rgb", &unseen).unwrap_or(f64::NAN);
    c.add(
        "DIRE beats RGB by 5 on unseen",
        dire >= rgb + 5.0,
        format!("unseen mean AP: dire {dire:.2}, rgb {rgb:.2}"),
    );
    Ok(())
}

// ---------------------------------------------------------------- C5 ----

fn steps_trend(a: &Artifacts, c: &mut Checks) -> dire_core::Result<()> {
    let mut cfg = a.cfg.clone();
    cfg.ablation.eval_tags = unseen_tags(a);
    let path = a.wd.join(&cfg.paths.reports).join("ablate-steps.jsonl");
    let report = if path.exists() {
        EvalReport::read(&path)?
    } else {
        pipeline::ablate_stage(&cfg, &a.wd, Ablation::Steps)?.1
    };
    let aps: Vec<f64> = cfg
        .ablation
        .steps
        .iter()
        .map(|&s| evalkit::mean_ap(&report, &format!("dire-s{s}"), &cfg.ablation.eval_tags).unwrap_or(f64::NAN))
        .collect();
    c.add(
        "unseen AP non-decreasing in S (1 pt ties)",
        aps.windows(2).all(|w| w[1] >= w[0] - 1.0),
        format!("S={:?} → AP {aps:.2?}", cfg.ablation.steps),
    );
    Ok(())
}

// ---------------------------------------------------------------- C6 ----

fn robustness(a: &Artifacts, c: &mut Checks) -> dire_core::Result<()> {
    let id = Perturbation::Identity;
    let perturbed = [Perturbation::Jpeg { quality: 65 }, Perturbation::Blur { sigma: 1.0 }];
    let report = eval_report(a, &[id, perturbed[0], perturbed[1]])?;
    let (tag, s) = (seen_tag(a), a.cfg.dataset.recon_steps);
    for p in perturbed {
        let drop = |det: &str| ap_of(&report, det, &tag, s, id) - ap_of(&report, det, &tag, s, p);
        let (d, r) = (drop("dire"), drop("rgb"));
        c.add(
            &format!("{p} drop dire <= rgb"),
            d <= r,
            format!("AP drop dire {d:.2}, rgb {r:.2}"),
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- C7 ----

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::compact();
    c.schedule.steps = 60;
    c.diffusion.model = EpsConfig {
        channels: 1,
        image_size: 8,
        width: 4,
        levels: 1,
        time_dim: 8,
    };
    c.diffusion.steps = 30;
    c.diffusion.batch_size = 8;
    c.diffusion.pool_size = 32;
    c.dataset.recon_steps = 4;
    for s in &mut c.dataset.samplers {
        s.counts = if s.tag == "ddim20" {
            SplitCounts {
                train: 8,
                val: 4,
                test: 4,
            }
        } else {
            SplitCounts {
                train: 0,
                val: 0,
                test: 4,
            }
        };
    }
    c.detector.crop = 6;
    c.detector.width = 2;
    c.detector.blocks = 2;
    c.detector.train.steps = 6;
    c.detector.train.eval_every = 3;
    c.detector.train.batch_size = 4;
    c.eval.perturbations = vec![Perturbation::Identity, Perturbation::Jpeg { quality: 65 }];
    c.ablation.steps = vec![2, 4];
    c.ablation.modes = vec![InputMode::Rgb, InputMode::Dire];
    c
}

fn run_cli(wd: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dire"))
        .arg("--workdir")
        .arg(wd)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn reproducibility(c: &mut Checks) {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    fs::write(a.path().join("start.json"), tiny_config().to_json()).unwrap();
    // (arguments for the first run, stored config to replay from, extra replay arguments)
    let steps: Vec<(Vec<&str>, &str, Vec<&str>)> = vec![
        (
            vec!["train-diffusion"],
            "models/run_config.json",
            vec!["train-diffusion"],
        ),
        (vec!["build-dataset"], "dataset/run_config.json", vec!["build-dataset"]),
        (
            vec!["train-detector", "--mode", "dire"],
            "detectors/dire.run_config.json",
            vec!["train-detector"],
        ),
        (
            vec!["train-detector", "--mode", "rgb"],
            "detectors/rgb.run_config.json",
            vec!["train-detector"],
        ),
        (
            vec!["eval", "--mode", "dire", "--mode", "rgb"],
            "reports/eval-dire-rgb.run_config.json",
            vec!["eval"],
        ),
        (
            vec!["ablate", "steps"],
            "reports/ablate-steps.run_config.json",
            vec!["ablate", "steps"],
        ),
        (
            vec!["ablate", "abs"],
            "reports/ablate-abs.run_config.json",
            vec!["ablate", "abs"],
        ),
        (
            vec!["ablate", "input-mode"],
            "reports/ablate-input-mode.run_config.json",
            vec!["ablate", "input-mode"],
        ),
        (
            vec!["analyze", "fft", "--input", "dataset/ddpm"],
            "analysis/fft/run_config.json",
            vec!["analyze", "fft", "--input", "dataset/ddpm"],
        ),
        (
            vec!["analyze", "noise", "--input", "dataset/ddim20"],
            "analysis/noise/run_config.json",
            vec!["analyze", "noise", "--input", "dataset/ddim20"],
        ),
    ];
    for (args, stored, replay) in &steps {
        let first = [&["--config", "start.json"][..], args].concat();
        if let Err(e) = run_cli(a.path(), &first) {
            c.error(&args.join(" "), e);
            return;
        }
        let cfg_path = a.path().join(stored);
        let second = [&["--config", cfg_path.to_str().unwrap(), "--jobs", "2"][..], replay].concat();
        if let Err(e) = run_cli(b.path(), &second) {
            c.error(&args.join(" "), e);
            return;
        }
    }
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let names_a: Vec<_> = ta
        .iter()
        .map(|(p, _)| p.clone())
        .filter(|p| p != Path::new("start.json"))
        .collect();
    let names_b: Vec<_> = tb.iter().map(|(p, _)| p.clone()).collect();
    c.add(
        "same file set",
        names_a == names_b,
        format!("{} vs {} files", names_a.len(), names_b.len()),
    );
    let differing: Vec<String> = ta
        .iter()
        .filter(|(p, _)| p != Path::new("start.json"))
        .filter(|(p, bytes)| {
            // Replayed configs record the different worker count.
            let is_config = p.to_string_lossy().ends_with("run_config.json");
            tb.iter()
                .find(|(q, _)| q == p)
                .map(|(_, other)| other != bytes && !is_config)
                .unwrap_or(true)
        })
        .map(|(p, _)| p.display().to_string())
        .collect();
    c.add(
        "outputs byte-identical",
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} files compared", names_a.len())
        } else {
            format!("differ: {differing:?}")
        },
    );
    let configs_equal = ta
        .iter()
        .filter(|(p, _)| p.to_string_lossy().ends_with("run_config.json"))
        .all(|(p, bytes)| {
            let other = &tb.iter().find(|(q, _)| q == p).unwrap().1;
            let mut x = RunConfig::from_json(std::str::from_utf8(bytes).unwrap()).unwrap();
            let y = RunConfig::from_json(std::str::from_utf8(other).unwrap()).unwrap();
            x.jobs = y.jobs;
            x == y
        });
    c.add("stored configs agree apart from jobs", configs_equal, "");
}

fn main() -> ExitCode {
    let mut outcomes = Vec::new();
    outcomes.push(timed("C1", "equation unit suite", equation_suite));
    outcomes.push(timed(
        "C2",
        "constant-eps exact invertibility",
        constant_eps_invertibility,
    ));

    if std::env::var_os("DIRE_ACCEPTANCE_QUICK").is_some() {
        outcomes.push(timed("C7", "CLI reproducibility", reproducibility));
        println!("pipeline criteria C3-C6 skipped\n");
        return report(&outcomes);
    }

    let keep = std::env::var_os("DIRE_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let wd = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    let start = Instant::now();
    let prepared = prepare(RunConfig::compact(), wd);
    let prep_seconds = start.elapsed().as_secs_f64();

    type Stage = fn(&Artifacts, &mut Checks) -> dire_core::Result<()>;
    let stages: [(&'static str, &'static str, Stage); 5] = [
        (
            "C1",
            "equation unit suite: trained-model oracles",
            trained_model_oracles,
        ),
        ("C3", "DIRE separability", separability),
        ("C4", "generalization to unseen samplers", generalization),
        ("C5", "steps-ablation trend", steps_trend),
        ("C6", "robustness trend", robustness),
    ];
    for (id, title, f) in stages {
        outcomes.push(timed(id, title, |c| match &prepared {
            Ok(a) => {
                if let Err(e) = f(a, c) {
                    c.error("run", e.to_string());
                }
            }
            Err(e) => c.error("pipeline", e.to_string()),
        }));
    }
    outcomes.push(timed("C7", "CLI reproducibility", reproducibility));

    // Fold the trained-model oracles into C1.
    let extra = outcomes.remove(2);
    outcomes[0].checks.0.extend(extra.checks.0);
    outcomes[0].title = "equation unit suite (incl. trained-model oracles)";

    println!("pipeline preparation: {prep_seconds:.0} s\n");
    report(&outcomes)
}
