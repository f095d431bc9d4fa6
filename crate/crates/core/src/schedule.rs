//! Noise schedules, the closed-form forward (noising) process, and the
//! strided timestep sequences used by the deterministic sampler.
//!
//! Timesteps are 1-based throughout the public API (`t = 1..=T`); the
//! internal arrays are 0-based with the offset applied in exactly one place
//! (the accessors below). `alpha_bar(0)` is defined as exactly 1 so the
//! final reverse step uses the same formula as every other step.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Plain-data schedule description, as carried by configs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleParams {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            t_max: 1024,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_max, self.beta_start, self.beta_end)
    }
}

/// Precomputed per-step noise fractions and their running products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear schedule: `betas` interpolated between the endpoints inclusive,
    /// running products computed in 64-bit.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::config("schedule needs at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "beta endpoints must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = if t_max == 1 {
            vec![beta_start]
        } else {
            (0..t_max)
                .map(|i| {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                })
                .collect()
        };
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut prod = 1.0f64;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule {
            t_max,
            betas,
            alpha_bars,
        })
    }

    /// The schedule used throughout the experiments: T = 1024,
    /// beta from 1e-4 to 0.02.
    pub fn default_linear() -> Self {
        NoiseSchedule::linear(1024, 1e-4, 0.02).expect("valid constants")
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max {
            return Err(Error::contract(format!(
                "timestep {t} outside 1..={}",
                self.t_max
            )));
        }
        Ok(())
    }

    /// `beta_t` for `t in 1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.betas[t - 1])
    }

    /// Running product of `(1 - beta_i)` up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }
}

/// Descending timestep indices for the sampler, each paired with the index
/// the reverse step lands on (0 for the final step, meaning `alpha_bar = 1`).
#[derive(Debug, Clone)]
pub struct StepSequence {
    steps: Vec<(usize, usize)>,
}

impl StepSequence {
    /// `(t, t_prev)` pairs in sampling order (descending `t`).
    pub fn steps(&self) -> &[(usize, usize)] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Evenly strided subsequence of `[1, T]`, descending, starting at `T`.
/// The "previous" index of each entry is the next entry in the sequence
/// (not `t - 1`), and 0 for the last entry.
pub fn uniform_substeps(t_max: usize, n_steps: usize) -> Result<StepSequence> {
    if n_steps < 1 || n_steps > t_max {
        return Err(Error::config(format!(
            "sampling steps {n_steps} outside 1..={t_max}"
        )));
    }
    // Ascending: ceil((i+1) * T / n) lands exactly on T for the last entry;
    // consecutive entries differ by at least 1 because T >= n.
    let mut ascending: Vec<usize> = (0..n_steps)
        .map(|i| ((i + 1) * t_max).div_ceil(n_steps))
        .collect();
    ascending.dedup();
    debug_assert_eq!(ascending.len(), n_steps);
    let mut steps = Vec::with_capacity(n_steps);
    for i in (0..ascending.len()).rev() {
        let t = ascending[i];
        let prev = if i == 0 { 0 } else { ascending[i - 1] };
        steps.push((t, prev));
    }
    Ok(StepSequence { steps })
}

/// Closed-form t-step noising: `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn q_sample<E: Scalar>(
    x0: &Tensor<E>,
    t: usize,
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    let ab = sched.alpha_bar(t)?;
    if t == 0 {
        return Err(Error::contract("q_sample needs t >= 1"));
    }
    Tensor::affine_pair(x0, ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Single-step noising `x_t = sqrt(1 - beta_t) * x_{t-1} + sqrt(beta_t) * eps`.
/// Composing this over fresh noise reproduces the [`q_sample`] marginals.
pub fn q_sample_step<E: Scalar>(
    x_prev: &Tensor<E>,
    t: usize,
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    let beta = sched.beta(t)?;
    Tensor::affine_pair(x_prev, (1.0 - beta).sqrt(), eps, beta.sqrt())
}
