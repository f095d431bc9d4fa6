//! Training and sampling for the mutually guided model pair.
//!
//! Two networks share one noise schedule. The guider denoises the mask
//! channel conditioned on the noisy image; the conditional model denoises
//! the image channel conditioned on a clean mask during training and on the
//! guider's running clean-mask estimate during sampling. Each reverse step
//! first advances the mask, then feeds its clean estimate to the image model.

use std::path::PathBuf;

use crate::checkpoint::save_checkpoint;
use crate::data::PairedDataset;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sampler::{predict_x0, reverse_step, EpsModel, SamplerConfig};
use crate::schedule::{q_sample, ScheduleParams};
use crate::tensor::{Scalar, Tensor};

/// Which of the two models a training run produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelRole {
    /// Denoises masks, guided by the noisy image channel.
    Guider,
    /// Denoises images, guided by the clean mask channel.
    Conditional,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub role: ModelRole,
    pub batch_size: usize,
    /// Fixed optimizer-step budget (the reproducible stand-in for training
    /// to convergence).
    pub steps: usize,
    pub learning_rate: f64,
    pub schedule: ScheduleParams,
    pub seed: u64,
    /// Write a checkpoint every N steps into `checkpoint_dir`.
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(role: ModelRole, steps: usize, seed: u64) -> Self {
        TrainConfig {
            role,
            batch_size: 8,
            steps,
            learning_rate: 1e-3,
            schedule: ScheduleParams::default(),
            seed,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if self.steps < 1 {
            return Err(Error::config("step budget must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }
}

pub struct TrainOutput {
    pub model: Denoiser<f32>,
    /// One loss value per optimizer step.
    pub losses: Vec<f32>,
}

/// Train the mask-channel guider.
pub fn train_guider(
    data: &PairedDataset,
    net: DenoiserConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    train(data, net, cfg, ModelRole::Guider)
}

/// Train the image-channel conditional model (same loop with the roles of
/// the two channels swapped; the guide input is the clean mask).
pub fn train_conditional(
    data: &PairedDataset,
    net: DenoiserConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    train(data, net, cfg, ModelRole::Conditional)
}

fn train(
    data: &PairedDataset,
    net_cfg: DenoiserConfig,
    cfg: &TrainConfig,
    role: ModelRole,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let sched = cfg.schedule.build()?;
    if net_cfg.max_timestep != sched.t_max() {
        return Err(Error::config(format!(
            "network conditions on t <= {} but the schedule has {} steps",
            net_cfg.max_timestep,
            sched.t_max()
        )));
    }
    if data.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    if data.image_size() != net_cfg.image_size {
        return Err(Error::config(format!(
            "dataset is {0}x{0} but the network expects {1}x{1}",
            data.image_size(),
            net_cfg.image_size
        )));
    }

    // Stream layout (documented draw order): stream 0 initializes weights;
    // stream 1 drives training, drawing per step: batch indices, one shared
    // t, then per pair the mask noise and the image noise.
    let base = Rng::new(cfg.seed);
    let mut init_rng = base.split(0);
    let mut rng = base.split(1);

    let model = Denoiser::init(net_cfg, &mut init_rng)?;
    let mut adam = crate::tensor::AdamState::new(cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.steps);
    let t_max = sched.t_max();

    for step in 1..=cfg.steps {
        let indices: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(data.len())).collect();
        let t = rng.range_inclusive(1, t_max);
        let batch = data.batch(&indices)?;
        let (eps_mask, eps_image) = draw_pair_noise(&mut rng, cfg.batch_size, data.image_size());

        let mask_t = q_sample(&batch.masks, t, &eps_mask, &sched)?;
        let image_t = q_sample(&batch.images, t, &eps_image, &sched)?;

        let (pred, target) = match role {
            ModelRole::Guider => (model.forward(&mask_t, &image_t, t)?, &eps_mask),
            ModelRole::Conditional => (model.forward(&image_t, &batch.masks, t)?, &eps_image),
        };
        let loss = pred.mse(target)?;
        let loss_val = loss.item()?;
        if !loss_val.is_finite() {
            if let Some(dir) = &cfg.checkpoint_dir {
                let path = dir.join(format!("diagnostic_nan_step{step}.pdck"));
                save_checkpoint(&path, &model, step as u64, cfg.seed)?;
            }
            return Err(Error::numeric(format!(
                "loss became non-finite at step {step}"
            )));
        }

        model.zero_grads();
        loss.backward()?;
        adam.step(&model.params())?;
        losses.push(loss_val);

        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &cfg.checkpoint_dir) {
            if every > 0 && step % every == 0 {
                let path = dir.join(format!("step{step:06}.pdck"));
                save_checkpoint(&path, &model, step as u64, cfg.seed)?;
            }
        }
    }

    Ok(TrainOutput { model, losses })
}

/// Independent noise for both channels: exactly two noise-tensor draws per
/// pair, mask channel first.
fn draw_pair_noise(rng: &mut Rng, batch: usize, size: usize) -> (Tensor<f32>, Tensor<f32>) {
    let plane = size * size;
    let mut mask_noise = vec![0f32; batch * plane];
    let mut image_noise = vec![0f32; batch * plane];
    let mut scratch = vec![0f64; plane];
    for i in 0..batch {
        rng.fill_gauss_f64(&mut scratch);
        for (dst, &v) in mask_noise[i * plane..(i + 1) * plane].iter_mut().zip(&scratch) {
            *dst = v as f32;
        }
        rng.fill_gauss_f64(&mut scratch);
        for (dst, &v) in image_noise[i * plane..(i + 1) * plane].iter_mut().zip(&scratch) {
            *dst = v as f32;
        }
    }
    let shape = [batch, 1, size, size];
    (
        Tensor::from_vec(&shape, mask_noise).expect("shape matches"),
        Tensor::from_vec(&shape, image_noise).expect("shape matches"),
    )
}

/// One generated pair plus the seed that reproduces it.
pub struct SampleRecord {
    /// Clean mask estimate, clamped to `[-1, 1]`. Binarize at 0.
    pub mask: Tensor<f32>,
    /// Clean image estimate, clamped to `[-1, 1]`.
    pub image: Tensor<f32>,
    pub seed: u64,
}

/// Threshold for turning a generated mask channel into a binary mask:
/// the midpoint of the `[-1, 1]` value coding.
pub const MASK_THRESHOLD: f32 = 0.0;

/// Per-step record from an instrumented sampling run.
pub struct TrajectoryStep<E: Scalar> {
    pub t: usize,
    pub t_prev: usize,
    pub mask_noisy: Tensor<E>,
    pub eps_mask: Tensor<E>,
    /// Unclamped clean-mask estimate from the guider at this step.
    pub mask_clean_estimate: Tensor<E>,
    /// The guide actually fed to the conditional model (clamped when
    /// configured).
    pub guide_fed: Tensor<E>,
    pub mask_stepped: Tensor<E>,
    pub image_noisy: Tensor<E>,
    pub eps_image: Tensor<E>,
    pub image_clean_estimate: Tensor<E>,
}

pub struct PairedTrajectory<E: Scalar> {
    pub steps: Vec<TrajectoryStep<E>>,
}

/// Run the paired reverse process from explicit endpoints. Deterministic
/// mode consumes no randomness from `rng`. Returns the final clean
/// estimates, unclamped, plus the trajectory when `trace` is set.
pub fn sample_pair_from<E: Scalar>(
    model_mask: &dyn EpsModel<E>,
    model_image: &dyn EpsModel<E>,
    mask_init: &Tensor<E>,
    image_init: &Tensor<E>,
    cfg: &SamplerConfig,
    rng: &mut Rng,
    trace: bool,
) -> Result<(Tensor<E>, Tensor<E>, Option<PairedTrajectory<E>>)> {
    if cfg.steps.is_empty() {
        return Err(Error::config("sampler has no steps"));
    }
    let mut mask = mask_init.detach();
    let mut image = image_init.detach();
    let mut steps = trace.then(Vec::new);

    for &(t, t_prev) in cfg.steps.steps() {
        let eps_mask = model_mask.predict(&mask, &image, t)?;
        let mask_clean = predict_x0(&mask, &eps_mask, t, &cfg.schedule)?;
        let mask_next = reverse_step(&mask, &eps_mask, t, t_prev, cfg, rng)?;

        let guide = if cfg.clamp_guide {
            mask_clean.clamp(-1.0, 1.0)
        } else {
            mask_clean.detach()
        };
        let eps_image = model_image.predict(&image, &guide, t)?;
        let image_clean = predict_x0(&image, &eps_image, t, &cfg.schedule)?;
        let image_next = reverse_step(&image, &eps_image, t, t_prev, cfg, rng)?;

        if let Some(steps) = steps.as_mut() {
            steps.push(TrajectoryStep {
                t,
                t_prev,
                mask_noisy: mask.detach(),
                eps_mask: eps_mask.detach(),
                mask_clean_estimate: mask_clean.detach(),
                guide_fed: guide.detach(),
                mask_stepped: mask_next.detach(),
                image_noisy: image.detach(),
                eps_image: eps_image.detach(),
                image_clean_estimate: image_clean.detach(),
            });
        }
        mask = mask_next;
        image = image_next;
    }

    Ok((mask, image, steps.map(|s| PairedTrajectory { steps: s })))
}

/// The per-pair seed used by [`sample_paired`] for pair `index`.
pub fn derive_sample_seed(base_seed: u64, index: u64) -> u64 {
    Rng::new(base_seed).split(index).state().0
}

/// Generate one pair from pure noise with an explicit seed. Draw order:
/// mask endpoint first, then image endpoint.
pub fn sample_one<E: Scalar>(
    model_mask: &dyn EpsModel<E>,
    model_image: &dyn EpsModel<E>,
    cfg: &SamplerConfig,
    image_size: usize,
    seed: u64,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let mut rng = Rng::new(seed);
    let shape = [1, 1, image_size, image_size];
    let mask_init = Tensor::<E>::randn(&shape, &mut rng);
    let image_init = Tensor::<E>::randn(&shape, &mut rng);
    let (mask, image, _) = sample_pair_from(
        model_mask,
        model_image,
        &mask_init,
        &image_init,
        cfg,
        &mut rng,
        false,
    )?;
    Ok((mask, image))
}

/// Generate `n` pairs, each from its own derived seed, clamped to `[-1, 1]`
/// on output. Generating n pairs equals n independent [`sample_one`] calls
/// with the derived seeds.
pub fn sample_paired(
    model_mask: &Denoiser<f32>,
    model_image: &Denoiser<f32>,
    cfg: &SamplerConfig,
    n: usize,
) -> Result<Vec<SampleRecord>> {
    if model_mask.config().image_size != model_image.config().image_size {
        return Err(Error::config(format!(
            "model image sizes differ: {} vs {}",
            model_mask.config().image_size,
            model_image.config().image_size
        )));
    }
    if model_mask.config().max_timestep != cfg.schedule.t_max()
        || model_image.config().max_timestep != cfg.schedule.t_max()
    {
        return Err(Error::config(
            "model was trained for a different schedule length",
        ));
    }
    let size = model_mask.config().image_size;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let seed = derive_sample_seed(cfg.seed, i as u64);
        let (mask, image) = sample_one::<f32>(model_mask, model_image, cfg, size, seed)?;
        out.push(SampleRecord {
            mask: mask.clamp(-1.0, 1.0),
            image: image.clamp(-1.0, 1.0),
            seed,
        });
    }
    Ok(out)
}

impl<E: Scalar> EpsModel<E> for Denoiser<E> {
    fn predict(&self, primary: &Tensor<E>, guide: &Tensor<E>, t: usize) -> Result<Tensor<E>> {
        self.forward(primary, guide, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;
    use crate::sampler::{AnalyticGaussian, PerfectEps};
    use crate::schedule::{uniform_substeps, NoiseSchedule};

    fn tiny_net(t_max: usize) -> DenoiserConfig {
        DenoiserConfig {
            image_size: 16,
            base_channels: 8,
            channel_mult: vec![1, 2],
            blocks_per_level: 1,
            time_embed_dim: 16,
            max_timestep: t_max,
        }
    }

    fn tiny_dataset(n: usize) -> PairedDataset {
        let spec = SyntheticSpec {
            count: n,
            seed: 99,
            ..SyntheticSpec::default_16()
        };
        PairedDataset::generate_in_memory(&spec).unwrap()
    }

    fn short_cfg(role: ModelRole, steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            learning_rate: 1e-3,
            schedule: ScheduleParams {
                t_max: 64,
                ..ScheduleParams::default()
            },
            ..TrainConfig::new(role, steps, 7)
        }
    }

    #[test]
    fn first_batch_loss_is_near_one_for_zero_init_net() {
        // Zero-initialized head predicts 0, so the loss is mean(eps^2) ~ 1.
        let data = tiny_dataset(32);
        for role in [ModelRole::Guider, ModelRole::Conditional] {
            let out = train(&data, tiny_net(64), &short_cfg(role, 1), role).unwrap();
            assert!(
                (out.losses[0] - 1.0).abs() < 0.1,
                "{role:?}: first loss {}",
                out.losses[0]
            );
        }
    }

    #[test]
    fn fixed_seed_gives_bit_identical_loss_traces() {
        let data = tiny_dataset(32);
        let cfg = short_cfg(ModelRole::Guider, 5);
        let a = train_guider(&data, tiny_net(64), &cfg).unwrap();
        let b = train_guider(&data, tiny_net(64), &cfg).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.losses), bits(&b.losses));
        for ((_, pa), (_, pb)) in a
            .model
            .named_params()
            .iter()
            .zip(b.model.named_params().iter())
        {
            assert!(pa.bits_eq(pb));
        }
    }

    #[test]
    fn exactly_two_noise_draws_per_pair_per_step() {
        // Count noise-tensor fills through the same stream layout the
        // trainer uses: stream 1, per step B index draws + 1 t draw +
        // 2B noise fills.
        let mut rng = Rng::new(123).split(1);
        let (batch, size, steps) = (3usize, 16usize, 4usize);
        for _ in 0..steps {
            for _ in 0..batch {
                rng.below(32);
            }
            rng.range_inclusive(1, 64);
            let before = rng.gauss_fills();
            let _ = draw_pair_noise(&mut rng, batch, size);
            assert_eq!(rng.gauss_fills() - before, 2 * batch as u64);
        }
        assert_eq!(rng.gauss_fills(), 2 * batch as u64 * steps as u64);
    }

    #[test]
    fn nan_data_aborts_with_numeric_error_and_diagnostic() {
        let mut data = tiny_dataset(8);
        data.poison_for_tests(f32::NAN);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = short_cfg(ModelRole::Guider, 3);
        cfg.checkpoint_dir = Some(dir.path().to_path_buf());
        let err = match train_guider(&data, tiny_net(64), &cfg) {
            Err(e) => e,
            Ok(_) => panic!("training on NaN data must abort"),
        };
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        let wrote_diagnostic = std::fs::read_dir(dir.path())
            .unwrap()
            .any(|e| e.unwrap().file_name().to_string_lossy().starts_with("diagnostic_nan"));
        assert!(wrote_diagnostic);
    }

    #[test]
    fn invalid_train_configs_are_rejected() {
        let data = tiny_dataset(8);
        let mut cfg = short_cfg(ModelRole::Guider, 1);
        cfg.batch_size = 0;
        assert!(matches!(
            train_guider(&data, tiny_net(64), &cfg),
            Err(Error::Config(_))
        ));
        let mut cfg = short_cfg(ModelRole::Guider, 1);
        cfg.schedule.t_max = 32; // mismatches the net's conditioning range
        assert!(matches!(
            train_guider(&data, tiny_net(64), &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn closed_loop_perfect_oracles_recover_the_pair() {
        // Both models replaced by perfect-noise oracles; sampling from the
        // pair's own noised endpoints walks back to exactly the pair.
        let schedule = NoiseSchedule::default_linear();
        let steps = uniform_substeps(1024, 256).unwrap();
        let cfg = SamplerConfig::deterministic(schedule.clone(), steps, 0);
        let mut rng = Rng::new(17);
        let x0 = Tensor::<f64>::randn(&[1, 1, 8, 8], &mut rng).clamp(-1.0, 1.0);
        let y0 = Tensor::<f64>::randn(&[1, 1, 8, 8], &mut rng).clamp(-1.0, 1.0);
        let ex = Tensor::<f64>::randn(&[1, 1, 8, 8], &mut rng);
        let ey = Tensor::<f64>::randn(&[1, 1, 8, 8], &mut rng);
        let xt = q_sample(&x0, 1024, &ex, &schedule).unwrap();
        let yt = q_sample(&y0, 1024, &ey, &schedule).unwrap();
        let mx = PerfectEps { eps: ex };
        let my = PerfectEps { eps: ey };
        let mut step_rng = Rng::new(0);
        let before = step_rng.state();
        let (mask, image, _) =
            sample_pair_from(&mx, &my, &xt, &yt, &cfg, &mut step_rng, false).unwrap();
        assert_eq!(step_rng.state(), before, "deterministic mode drew randomness");
        assert!(mask.max_abs_diff(&x0).unwrap() < 1e-10);
        assert!(image.max_abs_diff(&y0).unwrap() < 1e-10);
    }

    #[test]
    fn traced_run_keeps_the_guide_identity_at_every_step() {
        // The clean-mask estimate fed onward equals
        // (mask_stepped - sqrt(1 - ab_prev) * eps) / sqrt(ab_prev).
        let schedule = NoiseSchedule::default_linear();
        let steps = uniform_substeps(1024, 64).unwrap();
        let mut cfg = SamplerConfig::deterministic(schedule.clone(), steps, 0);
        cfg.clamp_guide = false;
        let mx = AnalyticGaussian {
            mean: 0.2,
            std: 0.3,
            schedule: schedule.clone(),
        };
        let my = AnalyticGaussian {
            mean: -0.1,
            std: 0.2,
            schedule: schedule.clone(),
        };
        let mut rng = Rng::new(23);
        let xt = Tensor::<f64>::randn(&[1, 1, 4, 4], &mut rng);
        let yt = Tensor::<f64>::randn(&[1, 1, 4, 4], &mut rng);
        let (_, _, trace) =
            sample_pair_from(&mx, &my, &xt, &yt, &cfg, &mut rng, true).unwrap();
        let trace = trace.unwrap();
        assert_eq!(trace.steps.len(), 64);
        for step in &trace.steps {
            if step.t_prev == 0 {
                assert_eq!(
                    step.mask_stepped
                        .max_abs_diff(&step.mask_clean_estimate)
                        .unwrap(),
                    0.0
                );
                continue;
            }
            let recovered = predict_x0(
                &step.mask_stepped,
                &step.eps_mask,
                step.t_prev,
                &schedule,
            )
            .unwrap();
            let diff = recovered.max_abs_diff(&step.guide_fed).unwrap();
            assert!(diff < 1e-6, "t={} diff={diff}", step.t);
        }
    }

    #[test]
    fn sampling_n_pairs_equals_n_single_runs() {
        let schedule = NoiseSchedule::linear(64, 1e-4, 0.02).unwrap();
        let steps = uniform_substeps(64, 16).unwrap();
        let cfg = SamplerConfig::deterministic(schedule.clone(), steps, 99);
        let net_cfg = tiny_net(64);
        let mut rng = Rng::new(1);
        let mx = Denoiser::<f32>::init(net_cfg.clone(), &mut rng).unwrap();
        let my = Denoiser::<f32>::init(net_cfg, &mut rng).unwrap();
        mx.randomize_parameters(&mut rng);
        my.randomize_parameters(&mut rng);

        let batchwise = sample_paired(&mx, &my, &cfg, 3).unwrap();
        for (i, rec) in batchwise.iter().enumerate() {
            let seed = derive_sample_seed(cfg.seed, i as u64);
            assert_eq!(rec.seed, seed);
            let (mask, image) = sample_one::<f32>(&mx, &my, &cfg, 16, seed).unwrap();
            assert!(rec.mask.bits_eq(&mask.clamp(-1.0, 1.0)));
            assert!(rec.image.bits_eq(&image.clamp(-1.0, 1.0)));
        }

        // Same seed, same bits, twice.
        let again = sample_paired(&mx, &my, &cfg, 3).unwrap();
        for (a, b) in batchwise.iter().zip(&again) {
            assert!(a.mask.bits_eq(&b.mask));
            assert!(a.image.bits_eq(&b.image));
        }
    }
}
