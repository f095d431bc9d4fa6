//! Subcommand implementations. Every command writes its artifacts plus a
//! `run.log` (config hash, seed, wall time, metric lines) and a copy of the
//! resolved configuration into the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pairgen_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use pairgen_core::data::{generate_synthetic, save_image, save_mask, PairedDataset};
use pairgen_core::eval::{diversity, fid_lite, pair_consistency, EvalReport};
use pairgen_core::paired::{sample_paired, train_conditional, train_guider, ModelRole};
use pairgen_core::tensor::Tensor;
use pairgen_core::verify;
use pairgen_core::Error;

use crate::config::RunConfig;
use crate::CliError;

struct RunLog {
    command: &'static str,
    config_hash: String,
    seed: u64,
    lines: Vec<String>,
    started: Instant,
}

impl RunLog {
    fn new(command: &'static str, config: &RunConfig, seed: u64) -> Self {
        RunLog {
            command,
            config_hash: config.hash(),
            seed,
            lines: Vec::new(),
            started: Instant::now(),
        }
    }

    fn note(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("{key} = {value}"));
    }

    fn metric(&mut self, name: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("metric {name} {value}"));
    }

    fn write(&self, out_dir: &Path, config: &RunConfig) -> Result<(), CliError> {
        std::fs::create_dir_all(out_dir)?;
        let mut text = String::new();
        let _ = writeln!(text, "command = {}", self.command);
        let _ = writeln!(text, "config_hash = {}", self.config_hash);
        let _ = writeln!(text, "seed = {}", self.seed);
        let _ = writeln!(
            text,
            "threads = {}",
            pairgen_core::tensor::parallel::threads()
        );
        let _ = writeln!(
            text,
            "wall_time_s = {:.3}",
            self.started.elapsed().as_secs_f64()
        );
        for line in &self.lines {
            let _ = writeln!(text, "{line}");
        }
        std::fs::write(out_dir.join("run.log"), text)?;
        std::fs::write(out_dir.join("config.resolved.cfg"), config.render())?;
        Ok(())
    }
}

fn manifest_path(dir_or_manifest: &Path) -> PathBuf {
    if dir_or_manifest.is_dir() {
        dir_or_manifest.join("manifest.txt")
    } else {
        dir_or_manifest.to_path_buf()
    }
}

pub fn gen_data(config: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let spec = config.synthetic_spec();
    spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let mut log = RunLog::new("gen-data", config, spec.seed);
    std::fs::create_dir_all(out_dir)?;
    let (manifest, stats) = generate_synthetic(&spec, out_dir)?;
    log.note("manifest", manifest.display());
    log.note("spec_hash", spec.hash());
    log.metric("samples", spec.count);
    log.metric("skipped_lesions", stats.skipped_lesions);
    log.metric("resampled", stats.resampled);
    log.write(out_dir, config)?;
    println!(
        "wrote {} pairs to {} (skipped lesions: {}, resampled: {})",
        spec.count,
        out_dir.display(),
        stats.skipped_lesions,
        stats.resampled
    );
    Ok(())
}

pub fn train(
    config: &RunConfig,
    role: ModelRole,
    data: &Path,
    out_dir: &Path,
) -> Result<(), CliError> {
    let mut log = RunLog::new("train", config, config.train_seed);
    let dataset = PairedDataset::load(&manifest_path(data))?;
    let net_cfg = config.denoiser_config(dataset.image_size());
    net_cfg.validate().map_err(CliError::from)?;

    std::fs::create_dir_all(out_dir)?;
    let mut train_cfg = config.train_config(role);
    train_cfg.checkpoint_dir = Some(out_dir.to_path_buf());

    let output = match role {
        ModelRole::Guider => train_guider(&dataset, net_cfg, &train_cfg)?,
        ModelRole::Conditional => train_conditional(&dataset, net_cfg, &train_cfg)?,
    };

    let name = match role {
        ModelRole::Guider => "model_guider.pdck",
        ModelRole::Conditional => "model_cond.pdck",
    };
    save_checkpoint(
        &out_dir.join(name),
        &output.model,
        output.losses.len() as u64,
        config.train_seed,
    )?;

    // Loss trace: shortest round-trip decimal per line, so two identical
    // runs produce byte-identical files.
    let mut trace = String::new();
    for l in &output.losses {
        let _ = writeln!(trace, "{l:?}");
    }
    std::fs::write(out_dir.join("losses.txt"), trace)?;

    let smoothed_tail = smoothed(&output.losses, output.losses.len().saturating_sub(1));
    log.note("model", name);
    log.note("dataset", data.display());
    log.metric("steps", output.losses.len());
    log.metric("loss_first", format!("{:?}", output.losses[0]));
    log.metric(
        "loss_last",
        format!("{:?}", output.losses[output.losses.len() - 1]),
    );
    log.metric("loss_smoothed_final", format!("{smoothed_tail:.6}"));
    log.write(out_dir, config)?;
    println!(
        "trained {name}: {} steps, loss {:?} -> {:?}",
        output.losses.len(),
        output.losses[0],
        output.losses[output.losses.len() - 1]
    );
    Ok(())
}

/// Mean of the trailing window (101 steps) around `at`.
fn smoothed(losses: &[f32], at: usize) -> f64 {
    let lo = at.saturating_sub(100);
    let window = &losses[lo..=at.min(losses.len() - 1)];
    window.iter().map(|&v| v as f64).sum::<f64>() / window.len() as f64
}

pub fn sample(
    config: &RunConfig,
    n: Option<usize>,
    seed: Option<u64>,
    guider: &Path,
    cond: &Path,
    out_dir: &Path,
) -> Result<(), CliError> {
    let n = n.unwrap_or(config.sample_count);
    if n < 1 {
        return Err(CliError::usage("sample count must be >= 1"));
    }
    let Checkpoint { model: mx, .. } = load_checkpoint(guider)?;
    let Checkpoint { model: my, .. } = load_checkpoint(cond)?;
    if mx.config() != my.config() {
        return Err(Error::config("guider and conditional checkpoints disagree on architecture").into());
    }

    let mut sampler_cfg = config.sampler_config()?;
    if let Some(seed) = seed {
        sampler_cfg.seed = seed;
    }
    let mut log = RunLog::new("sample", config, sampler_cfg.seed);

    let records = sample_paired(&mx, &my, &sampler_cfg, n)?;

    std::fs::create_dir_all(out_dir)?;
    let mut manifest_lines = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let mask_name = format!("mask_{i:05}.pgm");
        let image_name = format!("image_{i:05}.pgm");
        // Stored masks are binary; threshold at the value-coding midpoint.
        let binary: Vec<f32> = rec
            .mask
            .to_vec()
            .iter()
            .map(|&v| {
                if v > pairgen_core::paired::MASK_THRESHOLD {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        let mask = Tensor::from_vec(rec.mask.shape(), binary)?;
        save_mask(&mask, &out_dir.join(&mask_name))?;
        save_image(&rec.image, &out_dir.join(&image_name))?;
        manifest_lines.push(format!("{mask_name}\t{image_name}\t{}", rec.seed));
    }

    // Manifest carries the config hash and the per-pair seed as a third
    // column (readers of the two-column format ignore it).
    let manifest = out_dir.join("manifest.txt");
    {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(&manifest)?);
        writeln!(f, "# config_hash={}", config.hash())?;
        for line in &manifest_lines {
            writeln!(f, "{line}")?;
        }
    }

    log.note("guider", guider.display());
    log.note("cond", cond.display());
    log.metric("pairs", records.len());
    log.write(out_dir, config)?;
    println!("wrote {} pairs to {}", records.len(), out_dir.display());
    Ok(())
}

pub fn eval(
    config: &RunConfig,
    samples: &Path,
    data: &Path,
    out_dir: &Path,
) -> Result<(), CliError> {
    let mut log = RunLog::new("eval", config, 0);
    let sample_manifest = manifest_path(samples);
    let data_manifest = manifest_path(data);
    let generated = PairedDataset::load(&sample_manifest)?;
    let real = PairedDataset::load(&data_manifest)?;

    let eval_cfg = config.eval_config();
    let mut scores = Vec::with_capacity(generated.len());
    let mut empty = 0usize;
    for i in 0..generated.len() {
        let (mask, image) = generated.get(i)?;
        let score = pair_consistency(&mask, &image, &eval_cfg)?;
        if score.empty_mask {
            empty += 1;
        }
        scores.push(score.iou);
    }
    let n = scores.len() as f64;
    let iou_mean = scores.iter().sum::<f64>() / n;
    let iou_sd = (scores
        .iter()
        .map(|v| (v - iou_mean) * (v - iou_mean))
        .sum::<f64>()
        / n)
        .sqrt();

    let gen_images: Vec<Tensor<f32>> = (0..generated.len())
        .map(|i| generated.get(i).map(|(_, img)| img))
        .collect::<Result<_, _>>()?;
    let real_images: Vec<Tensor<f32>> = (0..real.len())
        .map(|i| real.get(i).map(|(_, img)| img))
        .collect::<Result<_, _>>()?;
    let fid = fid_lite(&gen_images, &real_images)?;

    let gen_masks: Vec<Tensor<f32>> = (0..generated.len())
        .map(|i| generated.get(i).map(|(m, _)| m))
        .collect::<Result<_, _>>()?;
    let div = diversity(&gen_masks)?;

    let report = EvalReport {
        pair_iou_mean: iou_mean,
        pair_iou_sd: iou_sd,
        fid_lite: fid,
        diversity: div,
        sample_count: generated.len(),
        empty_masks: empty,
        config_hash: config.hash(),
    };
    std::fs::create_dir_all(out_dir)?;
    report.write_to(&out_dir.join("report.txt"))?;

    log.note("samples", samples.display());
    log.note("data", data.display());
    log.metric("pair_iou_mean", iou_mean);
    log.metric("fid_lite", fid);
    log.metric("diversity", div);
    log.write(out_dir, config)?;
    print!("{}", report.render());
    Ok(())
}

pub fn verify(config: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let mut log = RunLog::new("verify", config, 0);
    let mut failures = 0usize;
    for (name, result) in verify::run_all() {
        match result {
            Ok(()) => {
                println!("PASS {name}");
                log.metric(name, "pass");
            }
            Err(e) => {
                println!("FAIL {name}: {e}");
                log.metric(name, "fail");
                failures += 1;
            }
        }
    }
    log.metric("failures", failures);
    log.write(out_dir, config)?;
    if failures > 0 {
        return Err(Error::numeric(format!("{failures} oracle check(s) failed")).into());
    }
    Ok(())
}
