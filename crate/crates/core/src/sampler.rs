//! Reverse-process primitives: clean-image prediction, the deterministic /
//! stochastic reverse step, and learning-free oracle denoisers that verify
//! the stepping machinery without any training.
//!
//! All functions here are pure tensor algebra outside the gradient tape.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::{NoiseSchedule, StepSequence};
use crate::tensor::{Scalar, Tensor};

/// Noise injected by the reverse step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaMode {
    /// `sigma_t = 0`: no randomness consumed while stepping (the default).
    Deterministic,
    /// `sigma_t = eta * sqrt((1 - ab_prev) / (1 - ab_t) * (1 - ab_t / ab_prev))`,
    /// the posterior variance of the ancestral sampler scaled by `eta`.
    Stochastic { eta: f64 },
}

/// Everything the stepping loop needs besides the models.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub steps: StepSequence,
    pub sigma: SigmaMode,
    /// Clamp the predicted clean mask to `[-1, 1]` before it is fed to the
    /// conditional model as a guide. Never applied inside the step formula.
    pub clamp_guide: bool,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn deterministic(schedule: NoiseSchedule, steps: StepSequence, seed: u64) -> Self {
        SamplerConfig {
            schedule,
            steps,
            sigma: SigmaMode::Deterministic,
            clamp_guide: true,
            seed,
        }
    }
}

/// Recover the clean-image estimate from a noised sample and a noise
/// prediction: `(x_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)`.
pub fn predict_x0<E: Scalar>(
    x_t: &Tensor<E>,
    eps_hat: &Tensor<E>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    if t < 1 {
        return Err(Error::contract("predict_x0 needs t >= 1"));
    }
    let ab = sched.alpha_bar(t)?;
    let sqrt_ab = ab.sqrt();
    Tensor::affine_pair(x_t, 1.0 / sqrt_ab, eps_hat, -(1.0 - ab).sqrt() / sqrt_ab)
}

/// `sigma_t` for the stochastic mode; checked against the radicand bound.
fn sigma_for(sched: &NoiseSchedule, t: usize, t_prev: usize, mode: SigmaMode) -> Result<f64> {
    match mode {
        SigmaMode::Deterministic => Ok(0.0),
        SigmaMode::Stochastic { eta } => {
            let ab_t = sched.alpha_bar(t)?;
            let ab_prev = sched.alpha_bar(t_prev)?;
            let var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev);
            let sigma = eta * var.max(0.0).sqrt();
            if sigma * sigma > 1.0 - ab_prev {
                return Err(Error::config(format!(
                    "sigma^2 = {} exceeds 1 - alpha_bar({t_prev}) = {}; radicand negative",
                    sigma * sigma,
                    1.0 - ab_prev
                )));
            }
            Ok(sigma)
        }
    }
}

/// One reverse step from `t` to `t_prev < t`:
/// `sqrt(ab_prev) * x0_hat + sqrt(1 - ab_prev - sigma^2) * eps_hat (+ sigma * noise)`.
/// `t_prev = 0` means `alpha_bar = 1`, so the step lands exactly on `x0_hat`.
pub fn reverse_step<E: Scalar>(
    x_t: &Tensor<E>,
    eps_hat: &Tensor<E>,
    t: usize,
    t_prev: usize,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Tensor<E>> {
    if t_prev >= t {
        return Err(Error::contract(format!(
            "reverse_step needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    let sigma = sigma_for(&cfg.schedule, t, t_prev, cfg.sigma)?;
    let ab_prev = cfg.schedule.alpha_bar(t_prev)?;
    let x0_hat = predict_x0(x_t, eps_hat, t, &cfg.schedule)?;
    let direction = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let stepped = Tensor::affine_pair(&x0_hat, ab_prev.sqrt(), eps_hat, direction)?;
    if sigma > 0.0 {
        let noise = Tensor::<E>::randn(x_t.shape(), rng);
        Tensor::affine_pair(&stepped, 1.0, &noise, sigma)
    } else {
        Ok(stepped)
    }
}

/// Posterior-mean noise prediction for data distributed as
/// `x0 ~ N(mean, std^2 I)`, derived from Gaussian conditioning:
/// `E[eps | x_t] = (1 - k) * (x_t - sqrt(ab_t) * mean) / sqrt(1 - ab_t)`
/// with `k = ab_t * std^2 / (ab_t * std^2 + 1 - ab_t)`.
pub fn analytic_gaussian_eps<E: Scalar>(
    x_t: &Tensor<E>,
    t: usize,
    mean: f64,
    std: f64,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    if std <= 0.0 {
        return Err(Error::contract("analytic_gaussian_eps needs std > 0"));
    }
    let ab = sched.alpha_bar(t)?;
    let k = ab * std * std / (ab * std * std + 1.0 - ab);
    let scale = (1.0 - k) / (1.0 - ab).sqrt();
    let offset = -scale * ab.sqrt() * mean;
    Ok(x_t.affine(scale, offset))
}

/// A model that predicts the noise component of its primary channel given a
/// guide channel and the timestep. Implemented by the trained denoiser and
/// by the oracles below.
pub trait EpsModel<E: Scalar> {
    fn predict(&self, primary: &Tensor<E>, guide: &Tensor<E>, t: usize) -> Result<Tensor<E>>;
}

/// Oracle that always returns a fixed noise tensor — the exact predictor for
/// a trajectory noised with that same tensor.
pub struct PerfectEps<E: Scalar> {
    pub eps: Tensor<E>,
}

impl<E: Scalar> EpsModel<E> for PerfectEps<E> {
    fn predict(&self, _primary: &Tensor<E>, _guide: &Tensor<E>, _t: usize) -> Result<Tensor<E>> {
        Ok(self.eps.detach())
    }
}

/// Oracle wrapping [`analytic_gaussian_eps`]; ignores the guide channel.
pub struct AnalyticGaussian {
    pub mean: f64,
    pub std: f64,
    pub schedule: NoiseSchedule,
}

impl<E: Scalar> EpsModel<E> for AnalyticGaussian {
    fn predict(&self, primary: &Tensor<E>, _guide: &Tensor<E>, t: usize) -> Result<Tensor<E>> {
        analytic_gaussian_eps(primary, t, self.mean, self.std, &self.schedule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{q_sample, uniform_substeps};

    fn cfg(seed: u64) -> SamplerConfig {
        let schedule = NoiseSchedule::default_linear();
        let steps = uniform_substeps(1024, 256).unwrap();
        SamplerConfig::deterministic(schedule, steps, seed)
    }

    #[test]
    fn predict_x0_inverts_q_sample() {
        let sched = NoiseSchedule::default_linear();
        // f32 covers the well-conditioned range; near t = T the division by
        // sqrt(alpha_bar) ~ 6e-3 amplifies single-precision roundoff past
        // 1e-5, so the deep-t cases run at f64.
        let mut rng = Rng::new(31);
        let x0 = Tensor::<f32>::randn(&[1, 1, 4, 4], &mut rng).clamp(-1.0, 1.0);
        for &t in &[1usize, 17, 512] {
            let eps = Tensor::<f32>::randn(&[1, 1, 4, 4], &mut rng);
            let xt = q_sample(&x0, t, &eps, &sched).unwrap();
            let back = predict_x0(&xt, &eps, t, &sched).unwrap();
            let rel = back.max_abs_diff(&x0).unwrap();
            assert!(rel < 1e-5, "t={t}: {rel}");
        }
        let x0 = Tensor::<f64>::randn(&[1, 1, 4, 4], &mut rng).clamp(-1.0, 1.0);
        for &t in &[1usize, 512, 1024] {
            let eps = Tensor::<f64>::randn(&[1, 1, 4, 4], &mut rng);
            let xt = q_sample(&x0, t, &eps, &sched).unwrap();
            let back = predict_x0(&xt, &eps, t, &sched).unwrap();
            let rel = back.max_abs_diff(&x0).unwrap();
            assert!(rel < 1e-5, "t={t}: {rel}");
        }
    }

    #[test]
    fn predict_x0_special_cases() {
        let sched = NoiseSchedule::default_linear();
        let xt = Tensor::<f64>::from_vec(&[2], vec![0.25, -0.5]).unwrap();
        let zero = Tensor::<f64>::zeros(&[2]);

        // eps_hat = 0 just rescales by 1/sqrt(alpha_bar).
        let out = predict_x0(&xt, &zero, 512, &sched).unwrap();
        let scale = 1.0 / sched.alpha_bar(512).unwrap().sqrt();
        for (&o, &x) in out.data().iter().zip(xt.data().iter()) {
            assert!((o - scale * x).abs() < 1e-14);
        }

        // t = 1: denominator sqrt(0.9999), well conditioned.
        let out = predict_x0(&xt, &zero, 1, &sched).unwrap();
        let scale = 1.0 / 0.9999f64.sqrt();
        for (&o, &x) in out.data().iter().zip(xt.data().iter()) {
            assert!(o.is_finite());
            assert!((o - scale * x).abs() < 1e-14);
        }
    }

    #[test]
    fn perfect_eps_stays_on_the_true_trajectory() {
        // With the true eps, each reverse step lands exactly on
        // q_sample(x0, t_prev, eps). 64-bit: the early steps divide by
        // sqrt(alpha_bar) ~ 6e-3, which amplifies f32 roundoff past 1e-5.
        let c = cfg(5);
        let mut rng = Rng::new(40);
        let x0 = Tensor::<f64>::randn(&[1, 1, 4, 4], &mut rng).clamp(-1.0, 1.0);
        let eps = Tensor::<f64>::randn(&[1, 1, 4, 4], &mut rng);
        let mut x = q_sample(&x0, 1024, &eps, &c.schedule).unwrap();
        let mut step_rng = Rng::new(0);
        for &(t, t_prev) in c.steps.steps() {
            x = reverse_step(&x, &eps, t, t_prev, &c, &mut step_rng).unwrap();
            let want = if t_prev == 0 {
                x0.detach()
            } else {
                q_sample(&x0, t_prev, &eps, &c.schedule).unwrap()
            };
            assert!(x.max_abs_diff(&want).unwrap() < 1e-5, "t={t}->{t_prev}");
        }
        assert!(x.max_abs_diff(&x0).unwrap() < 1e-5);
    }

    #[test]
    fn t_prev_zero_returns_x0_hat_exactly() {
        let c = cfg(6);
        let mut rng = Rng::new(41);
        let xt = Tensor::<f64>::randn(&[1, 1, 3, 3], &mut rng);
        let eps = Tensor::<f64>::randn(&[1, 1, 3, 3], &mut rng);
        let x0_hat = predict_x0(&xt, &eps, 4, &c.schedule).unwrap();
        let mut step_rng = Rng::new(0);
        let stepped = reverse_step(&xt, &eps, 4, 0, &c, &mut step_rng).unwrap();
        // alpha_bar(0) = 1: coefficient on eps is exactly 0.
        assert_eq!(stepped.max_abs_diff(&x0_hat).unwrap(), 0.0);
    }

    #[test]
    fn step_output_rearranges_back_to_x0_hat() {
        // x0_hat == (x_prev - sqrt(1 - ab_prev) * eps) / sqrt(ab_prev).
        let c = cfg(7);
        let mut rng = Rng::new(42);
        let xt = Tensor::<f64>::randn(&[1, 1, 4, 4], &mut rng);
        let eps = Tensor::<f64>::randn(&[1, 1, 4, 4], &mut rng);
        let mut step_rng = Rng::new(0);
        for &(t, t_prev) in c.steps.steps().iter().take(40) {
            if t_prev == 0 {
                continue;
            }
            let x0_hat = predict_x0(&xt, &eps, t, &c.schedule).unwrap();
            let x_prev = reverse_step(&xt, &eps, t, t_prev, &c, &mut step_rng).unwrap();
            let recovered = predict_x0(&x_prev, &eps, t_prev, &c.schedule).unwrap();
            assert!(
                recovered.max_abs_diff(&x0_hat).unwrap() < 1e-6,
                "t={t}->{t_prev}"
            );
        }
    }

    #[test]
    fn deterministic_mode_consumes_no_randomness() {
        let c = cfg(8);
        let mut rng = Rng::new(50);
        let eps = Tensor::<f32>::randn(&[1, 1, 4, 4], &mut rng);
        let mut x = Tensor::<f32>::randn(&[1, 1, 4, 4], &mut rng);
        let before = rng.state();
        for &(t, t_prev) in c.steps.steps() {
            x = reverse_step(&x, &eps, t, t_prev, &c, &mut rng).unwrap();
        }
        assert_eq!(rng.state(), before);
    }

    #[test]
    fn oversized_sigma_is_a_config_error() {
        let mut c = cfg(9);
        c.sigma = SigmaMode::Stochastic { eta: 50.0 };
        let mut rng = Rng::new(51);
        let xt = Tensor::<f32>::randn(&[1, 1, 2, 2], &mut rng);
        let eps = Tensor::<f32>::randn(&[1, 1, 2, 2], &mut rng);
        let err = reverse_step(&xt, &eps, 512, 508, &c, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");

        // eta = 1 stays within the radicand bound on every strided step.
        c.sigma = SigmaMode::Stochastic { eta: 1.0 };
        for &(t, t_prev) in c.steps.steps() {
            assert!(sigma_for(&c.schedule, t, t_prev, c.sigma).is_ok());
        }
    }

    #[test]
    fn analytic_gaussian_degenerate_limits() {
        let sched = NoiseSchedule::default_linear();
        let mut rng = Rng::new(60);
        let xt = Tensor::<f64>::randn(&[1, 1, 4, 4], &mut rng);
        let mean = 0.3;

        // std -> 0: the exact noise for a constant x0 = mean.
        let got = analytic_gaussian_eps(&xt, 512, mean, 1e-8, &sched).unwrap();
        let ab = sched.alpha_bar(512).unwrap();
        let want = xt.affine(
            1.0 / (1.0 - ab).sqrt(),
            -ab.sqrt() * mean / (1.0 - ab).sqrt(),
        );
        assert!(got.max_abs_diff(&want).unwrap() < 1e-9);

        // x_t at the prior mean: posterior noise estimate is zero.
        let centered = Tensor::<f64>::full(&[1, 1, 2, 2], ab.sqrt() * mean);
        let got = analytic_gaussian_eps(&centered, 512, mean, 0.1, &sched).unwrap();
        for &v in got.data().iter() {
            assert!(v.abs() < 1e-14);
        }

        assert!(analytic_gaussian_eps(&xt, 512, mean, 0.0, &sched).is_err());
    }
}
