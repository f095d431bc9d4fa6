//! Learning-free oracle suites: closed-form checks of the schedule and the
//! sampling machinery that need no trained model. The CLI `verify` command
//! runs these and reports one pass/fail line per check.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sampler::{predict_x0, AnalyticGaussian, PerfectEps, SamplerConfig};
use crate::schedule::{q_sample, uniform_substeps, NoiseSchedule};
use crate::tensor::Tensor;

fn fail(name: &str, msg: String) -> Error {
    Error::numeric(format!("{name}: {msg}"))
}

/// Alpha-bar table matches an independent 64-bit running product and is
/// strictly decreasing.
pub fn schedule_consistency() -> Result<()> {
    let name = "schedule_consistency";
    let sched = NoiseSchedule::default_linear();
    let mut prod = 1.0f64;
    let mut last = 1.0f64;
    for t in 1..=1024usize {
        let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 1023.0;
        prod *= 1.0 - beta;
        let ab = sched.alpha_bar(t)?;
        if (ab - prod).abs() > 1e-12 * prod {
            return Err(fail(name, format!("alpha_bar({t}) = {ab}, product oracle {prod}")));
        }
        if ab >= last {
            return Err(fail(name, format!("alpha_bar not decreasing at t = {t}")));
        }
        last = ab;
    }
    Ok(())
}

/// With the true noise, every strided reverse step lands back on the
/// closed-form noising of the clean input (64-bit, tolerance 1e-5),
/// including the final step onto `alpha_bar = 1`.
pub fn trajectory_identity() -> Result<()> {
    let name = "trajectory_identity";
    let schedule = NoiseSchedule::default_linear();
    let steps = uniform_substeps(1024, 256)?;
    let cfg = SamplerConfig::deterministic(schedule.clone(), steps, 0);
    let mut rng = Rng::new(0x7261_6a65);
    let x0 = Tensor::<f64>::randn(&[1, 1, 4, 4], &mut rng).clamp(-1.0, 1.0);
    let eps = Tensor::<f64>::randn(&[1, 1, 4, 4], &mut rng);
    let mut x = q_sample(&x0, 1024, &eps, &schedule)?;
    let mut step_rng = Rng::new(0);
    for &(t, t_prev) in cfg.steps.steps() {
        x = crate::sampler::reverse_step(&x, &eps, t, t_prev, &cfg, &mut step_rng)?;
        let want = if t_prev == 0 {
            x0.detach()
        } else {
            q_sample(&x0, t_prev, &eps, &schedule)?
        };
        let diff = x.max_abs_diff(&want)?;
        if diff > 1e-5 {
            return Err(fail(name, format!("step {t}->{t_prev} off trajectory by {diff}")));
        }
    }
    Ok(())
}

/// Full 256-step deterministic run with the closed-form Gaussian denoiser:
/// 4096 generated scalars match the target distribution's moments.
pub fn analytic_gaussian_sampling() -> Result<()> {
    let name = "analytic_gaussian_sampling";
    let schedule = NoiseSchedule::default_linear();
    let steps = uniform_substeps(1024, 256)?;
    let cfg = SamplerConfig::deterministic(schedule.clone(), steps, 0);
    let mut rng = Rng::new(0x616e_616c);
    let mut values = Vec::with_capacity(4096);
    // 16 trajectories of 16x16 = 4096 scalar samples.
    for _ in 0..16 {
        let mut x = Tensor::<f64>::randn(&[1, 1, 16, 16], &mut rng);
        let mut step_rng = Rng::new(0);
        for &(t, t_prev) in cfg.steps.steps() {
            let eps = crate::sampler::analytic_gaussian_eps(&x, t, 0.3, 0.1, &schedule)?;
            x = crate::sampler::reverse_step(&x, &eps, t, t_prev, &cfg, &mut step_rng)?;
        }
        values.extend(x.to_vec());
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(0.28..=0.32).contains(&mean) {
        return Err(fail(name, format!("sample mean {mean} outside [0.28, 0.32]")));
    }
    if !(0.08..=0.12).contains(&std) {
        return Err(fail(name, format!("sample std {std} outside [0.08, 0.12]")));
    }
    Ok(())
}

/// During a paired run, the clean-mask estimate handed to the image model
/// rearranges exactly from the stepped mask (64-bit, 1e-6).
pub fn paired_guide_identity() -> Result<()> {
    let name = "paired_guide_identity";
    let schedule = NoiseSchedule::default_linear();
    let steps = uniform_substeps(1024, 256)?;
    let mut cfg = SamplerConfig::deterministic(schedule.clone(), steps, 0);
    cfg.clamp_guide = false;
    let model_mask = AnalyticGaussian {
        mean: 0.1,
        std: 0.25,
        schedule: schedule.clone(),
    };
    let model_image = AnalyticGaussian {
        mean: -0.2,
        std: 0.15,
        schedule: schedule.clone(),
    };
    let mut rng = Rng::new(0x7061_6972);
    let mask_init = Tensor::<f64>::randn(&[1, 1, 4, 4], &mut rng);
    let image_init = Tensor::<f64>::randn(&[1, 1, 4, 4], &mut rng);
    let (_, _, trace) = crate::paired::sample_pair_from(
        &model_mask,
        &model_image,
        &mask_init,
        &image_init,
        &cfg,
        &mut rng,
        true,
    )?;
    let trace = trace.expect("trace requested");
    for step in &trace.steps {
        if step.t_prev == 0 {
            continue;
        }
        let recovered = predict_x0(&step.mask_stepped, &step.eps_mask, step.t_prev, &schedule)?;
        let diff = recovered.max_abs_diff(&step.guide_fed)?;
        if diff > 1e-6 {
            return Err(fail(
                name,
                format!("guide identity broken at t = {}: {diff}", step.t),
            ));
        }
    }
    Ok(())
}

/// Perfect-noise oracles walk a noised pair back to exactly that pair, and
/// deterministic stepping consumes zero randomness.
pub fn closed_loop_recovery() -> Result<()> {
    let name = "closed_loop_recovery";
    let schedule = NoiseSchedule::default_linear();
    let steps = uniform_substeps(1024, 256)?;
    let cfg = SamplerConfig::deterministic(schedule.clone(), steps, 0);
    let mut rng = Rng::new(0x6c6f_6f70);
    let x0 = Tensor::<f64>::randn(&[1, 1, 8, 8], &mut rng).clamp(-1.0, 1.0);
    let y0 = Tensor::<f64>::randn(&[1, 1, 8, 8], &mut rng).clamp(-1.0, 1.0);
    let ex = Tensor::<f64>::randn(&[1, 1, 8, 8], &mut rng);
    let ey = Tensor::<f64>::randn(&[1, 1, 8, 8], &mut rng);
    let xt = q_sample(&x0, 1024, &ex, &schedule)?;
    let yt = q_sample(&y0, 1024, &ey, &schedule)?;
    let mx = PerfectEps { eps: ex };
    let my = PerfectEps { eps: ey };
    let mut step_rng = Rng::new(0);
    let before = step_rng.state();
    let (mask, image, _) =
        crate::paired::sample_pair_from(&mx, &my, &xt, &yt, &cfg, &mut step_rng, false)?;
    if step_rng.state() != before {
        return Err(fail(name, "deterministic stepping consumed randomness".into()));
    }
    let dm = mask.max_abs_diff(&x0)?;
    let di = image.max_abs_diff(&y0)?;
    if dm > 1e-10 || di > 1e-10 {
        return Err(fail(name, format!("recovered pair off by ({dm}, {di})")));
    }
    Ok(())
}

/// Every check with its name, in a stable order.
pub fn run_all() -> Vec<(&'static str, Result<()>)> {
    vec![
        ("schedule_consistency", schedule_consistency()),
        ("trajectory_identity", trajectory_identity()),
        ("analytic_gaussian_sampling", analytic_gaussian_sampling()),
        ("paired_guide_identity", paired_guide_identity()),
        ("closed_loop_recovery", closed_loop_recovery()),
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_oracle_checks_pass() {
        for (name, result) in super::run_all() {
            assert!(result.is_ok(), "{name}: {:?}", result.err());
        }
    }
}
