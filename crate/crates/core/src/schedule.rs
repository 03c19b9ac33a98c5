//! Noise schedule and the closed-form forward (noising) process.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::ImageTensor;

/// Cumulative signal-retention products `alpha_bar[t]` for `t = 0..=T`.
///
/// `alpha_bar[0] == 1` so that the clean-image end of every DDIM step has a
/// well defined coefficient. The sequence is strictly decreasing and
/// `alpha_bar[T]` lies in (0, 1). Immutable once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced per-step betas from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        ensure!(steps >= 1, "schedule needs at least one step, got {steps}");
        ensure!(
            beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
            "betas must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        );
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for s in 1..=steps {
            let frac = if steps == 1 {
                0.0
            } else {
                (s - 1) as f64 / (steps - 1) as f64
            };
            let beta = beta_start + (beta_end - beta_start) * frac;
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    /// Build from an explicit `alpha_bar` table, checking every invariant.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        ensure!(alpha_bar.len() >= 2, "alpha_bar needs T+1 >= 2 entries");
        ensure!(
            alpha_bar[0] == 1.0,
            "alpha_bar[0] must be exactly 1, got {}",
            alpha_bar[0]
        );
        for t in 1..alpha_bar.len() {
            ensure!(
                alpha_bar[t] < alpha_bar[t - 1],
                "alpha_bar must be strictly decreasing (t={t}: {} >= {})",
                alpha_bar[t],
                alpha_bar[t - 1]
            );
        }
        let last = *alpha_bar.last().unwrap();
        ensure!(last > 0.0 && last < 1.0, "alpha_bar[T] must lie in (0, 1), got {last}");
        Ok(Self { alpha_bar })
    }

    /// Total diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_index(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                min: 0,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// ᾱ_t; panics if `t > T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Per-step α_t = ᾱ_t / ᾱ_{t-1}, for t ≥ 1.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1, "alpha is defined for t >= 1");
        self.alpha_bar[t] / self.alpha_bar[t - 1]
    }

    /// Per-step β_t = 1 − α_t, for t ≥ 1.
    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha(t)
    }

    /// Posterior variance β̃_t = (1 − ᾱ_{t-1}) / (1 − ᾱ_t) · β_t.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let ab = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t - 1];
        (1.0 - ab_prev) / (1.0 - ab) * self.beta(t)
    }
}

/// √ᾱ·x0 + √(1−ᾱ)·eps for an explicit ᾱ.
pub fn q_sample_with(x0: &ImageTensor, alpha_bar: f64, eps: &ImageTensor) -> Result<ImageTensor> {
    ensure!(
        (0.0..=1.0).contains(&alpha_bar),
        "alpha_bar must lie in [0, 1], got {alpha_bar}"
    );
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).sqrt();
    x0.zip_map(eps, |x, e| (a * x as f64 + b * e as f64) as f32)
}

/// Draw x_t directly from x_0: √ᾱ_t·x0 + √(1−ᾱ_t)·eps.
pub fn q_sample(x0: &ImageTensor, t: usize, eps: &ImageTensor, sched: &NoiseSchedule) -> Result<ImageTensor> {
    sched.check_index(t)?;
    q_sample_with(x0, sched.alpha_bar(t), eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageShape;
    use crate::seed;
    use proptest::prelude::*;

    #[test]
    fn two_step_hand_product() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar_table(), &[1.0, 0.5, 0.25]);
    }

    #[test]
    fn zero_noise_limit() {
        let s = NoiseSchedule::linear(1, 1e-12, 1e-12).unwrap();
        assert!((s.alpha_bar(1) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn default_grid_matches_product_loop() {
        // Independent oracle: explicit betas then a plain running product.
        let t = 200usize;
        let betas: Vec<f64> = (0..t)
            .map(|i| 1e-4 + (0.02 - 1e-4) * i as f64 / (t - 1) as f64)
            .collect();
        let mut oracle = 1.0f64;
        for b in &betas {
            oracle *= 1.0 - b;
        }
        let s = NoiseSchedule::linear(t, 1e-4, 0.02).unwrap();
        let got = s.alpha_bar(t);
        assert!(((got - oracle) / oracle).abs() < 1e-12, "{got} vs {oracle}");
        assert!(got > 0.0 && got < 1.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.5]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![0.9, 0.5]).is_err());
    }

    #[test]
    fn q_sample_boundary_cases() {
        let shape = ImageShape::square(1, 4);
        let mut rng = seed::rng(3, &[]);
        let x0 = ImageTensor::randn(shape, &mut rng);
        let eps = ImageTensor::randn(shape, &mut rng);
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        assert_eq!(q_sample(&x0, 0, &eps, &s).unwrap(), x0);
        assert_eq!(q_sample_with(&x0, 0.0, &eps).unwrap(), eps);

        let zeros = ImageTensor::zeros(shape);
        let ones = ImageTensor::filled(shape, 1.0);
        let out = q_sample_with(&zeros, 0.25, &ones).unwrap();
        for &v in out.data() {
            assert!((v as f64 - 0.75f64.sqrt()).abs() < 1e-6);
        }
        assert!(q_sample(&x0, 11, &eps, &s).is_err());
        assert!(q_sample(&x0, 1, &ImageTensor::zeros(ImageShape::square(1, 3)), &s).is_err());
    }

    #[test]
    fn q_sample_variance_matches_closed_form() {
        // Var(out) = ᾱ·Var(x0) + (1−ᾱ) for unit-variance eps, 3σ bound.
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        let t = 120;
        let ab = s.alpha_bar(t);
        let shape = ImageShape::new(1, 1, 20_000);
        let mut rng = seed::rng(11, &[]);
        let x0 = ImageTensor::randn(shape, &mut rng).map(|v| 0.5 * v);
        let eps = ImageTensor::randn(shape, &mut rng);
        let out = q_sample(&x0, t, &eps, &s).unwrap();
        let n = out.len() as f64;
        let var_x0 = {
            let m = x0.mean();
            x0.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n
        };
        let m = out.mean();
        let var = out.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
        let expected = ab * var_x0 + (1.0 - ab);
        // Std. error of a Gaussian sample variance: σ²·√(2/n).
        let se = expected * (2.0 / n).sqrt();
        assert!((var - expected).abs() < 3.0 * se, "{var} vs {expected}");
    }

    proptest! {
        #[test]
        fn q_sample_is_linear(a in -3.0f32..3.0, t in 0usize..=50, seed_v in any::<u64>()) {
            let s = NoiseSchedule::linear(50, 1e-4, 0.05).unwrap();
            let shape = ImageShape::square(1, 4);
            let mut rng = seed::rng(seed_v, &[]);
            let x0 = ImageTensor::randn(shape, &mut rng);
            let eps = ImageTensor::randn(shape, &mut rng);
            let lhs = q_sample(&x0.map(|v| a * v), t, &eps.map(|v| a * v), &s).unwrap();
            let rhs = q_sample(&x0, t, &eps, &s).unwrap().map(|v| a * v);
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-5);
        }

        #[test]
        fn linear_schedule_is_monotone(steps in 1usize..300, b0 in 1e-5f64..0.01, extra in 0.0f64..0.05) {
            let s = NoiseSchedule::linear(steps, b0, b0 + extra).unwrap();
            let ab = s.alpha_bar_table();
            prop_assert_eq!(ab[0], 1.0);
            prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        }
    }
}
