//! Flat, line-oriented `key = value` configuration with `[section]` headers.
//! Unknown sections or keys are errors; every field has a default so an
//! omitted file means "defaults".

use std::fmt::Write as _;
use std::path::Path;

use pairgen_core::data::SyntheticSpec;
use pairgen_core::denoiser::DenoiserConfig;
use pairgen_core::eval::EvalConfig;
use pairgen_core::paired::{ModelRole, TrainConfig};
use pairgen_core::sampler::{SamplerConfig, SigmaMode};
use pairgen_core::schedule::{uniform_substeps, ScheduleParams};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [schedule]
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
    // [model]
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub blocks_per_level: usize,
    pub time_embed_dim: usize,
    // [train]
    pub batch_size: usize,
    pub train_steps: usize,
    pub learning_rate: f64,
    pub train_seed: u64,
    pub checkpoint_every: usize,
    // [sample]
    pub sample_count: usize,
    pub sample_seed: u64,
    pub clamp_guide: bool,
    // [data]
    pub image_size: usize,
    pub data_count: usize,
    pub lesions_min: usize,
    pub lesions_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub background_scale: f64,
    pub background_amplitude: f64,
    pub edge_softness: f64,
    pub data_seed: u64,
    pub allow_empty: bool,
    // [eval]
    pub eval_contrast_offset: f64,
    pub eval_blur_sigma: f64,
    // [run]
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            timesteps: 1024,
            beta_start: 1e-4,
            beta_end: 0.02,
            sample_steps: 256,
            base_channels: 32,
            channel_mult: vec![1, 2],
            blocks_per_level: 2,
            time_embed_dim: 64,
            batch_size: 8,
            train_steps: 2000,
            learning_rate: 1e-3,
            train_seed: 7,
            checkpoint_every: 500,
            sample_count: 64,
            sample_seed: 7,
            clamp_guide: true,
            image_size: 16,
            data_count: 2048,
            lesions_min: 1,
            lesions_max: 2,
            radius_min: 2.0,
            radius_max: 3.5,
            contrast_min: 0.25,
            contrast_max: 0.45,
            background_scale: 3.0,
            background_amplitude: 0.12,
            edge_softness: 0.25,
            data_seed: 0,
            allow_empty: false,
            eval_contrast_offset: 0.25,
            eval_blur_sigma: 4.0,
            threads: 0,
        }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn parse<T: std::str::FromStr>(value: &str, line: usize) -> Result<T, ConfigError> {
    value
        .trim()
        .parse()
        .map_err(|_| ConfigError(format!("line {line}: cannot parse value {value:?}")))
}

fn parse_bool(value: &str, line: usize) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(ConfigError(format!(
            "line {line}: expected true/false, got {other:?}"
        ))),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_str_checked(&text)
    }

    pub fn from_str_checked(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError(format!("line {lineno}: unterminated section")))?;
                section = name.trim().to_string();
                match section.as_str() {
                    "schedule" | "model" | "train" | "sample" | "data" | "eval" | "run" => {}
                    other => {
                        return Err(ConfigError(format!(
                            "line {lineno}: unknown section [{other}]"
                        )))
                    }
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {lineno}: expected key = value")))?;
            let key = key.trim();
            let value = value.trim();
            match (section.as_str(), key) {
                ("schedule", "timesteps") => cfg.timesteps = parse(value, lineno)?,
                ("schedule", "beta_start") => cfg.beta_start = parse(value, lineno)?,
                ("schedule", "beta_end") => cfg.beta_end = parse(value, lineno)?,
                ("schedule", "sample_steps") => cfg.sample_steps = parse(value, lineno)?,
                ("model", "base_channels") => cfg.base_channels = parse(value, lineno)?,
                ("model", "channel_mult") => {
                    cfg.channel_mult = value
                        .split(',')
                        .map(|v| parse(v, lineno))
                        .collect::<Result<_, _>>()?;
                }
                ("model", "blocks_per_level") => cfg.blocks_per_level = parse(value, lineno)?,
                ("model", "time_embed_dim") => cfg.time_embed_dim = parse(value, lineno)?,
                ("train", "batch_size") => cfg.batch_size = parse(value, lineno)?,
                ("train", "steps") => cfg.train_steps = parse(value, lineno)?,
                ("train", "learning_rate") => cfg.learning_rate = parse(value, lineno)?,
                ("train", "seed") => cfg.train_seed = parse(value, lineno)?,
                ("train", "checkpoint_every") => cfg.checkpoint_every = parse(value, lineno)?,
                ("sample", "count") => cfg.sample_count = parse(value, lineno)?,
                ("sample", "seed") => cfg.sample_seed = parse(value, lineno)?,
                ("sample", "clamp_guide") => cfg.clamp_guide = parse_bool(value, lineno)?,
                ("data", "image_size") => cfg.image_size = parse(value, lineno)?,
                ("data", "count") => cfg.data_count = parse(value, lineno)?,
                ("data", "lesions_min") => cfg.lesions_min = parse(value, lineno)?,
                ("data", "lesions_max") => cfg.lesions_max = parse(value, lineno)?,
                ("data", "radius_min") => cfg.radius_min = parse(value, lineno)?,
                ("data", "radius_max") => cfg.radius_max = parse(value, lineno)?,
                ("data", "contrast_min") => cfg.contrast_min = parse(value, lineno)?,
                ("data", "contrast_max") => cfg.contrast_max = parse(value, lineno)?,
                ("data", "background_scale") => cfg.background_scale = parse(value, lineno)?,
                ("data", "background_amplitude") => {
                    cfg.background_amplitude = parse(value, lineno)?
                }
                ("data", "edge_softness") => cfg.edge_softness = parse(value, lineno)?,
                ("data", "seed") => cfg.data_seed = parse(value, lineno)?,
                ("data", "allow_empty") => cfg.allow_empty = parse_bool(value, lineno)?,
                ("eval", "contrast_offset") => cfg.eval_contrast_offset = parse(value, lineno)?,
                ("eval", "blur_sigma") => cfg.eval_blur_sigma = parse(value, lineno)?,
                ("run", "threads") => cfg.threads = parse(value, lineno)?,
                ("", k) => {
                    return Err(ConfigError(format!(
                        "line {lineno}: key {k:?} appears before any [section]"
                    )))
                }
                (s, k) => {
                    return Err(ConfigError(format!(
                        "line {lineno}: unknown key {k:?} in section [{s}]"
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError(msg.to_string()));
        if self.timesteps < 1 {
            return bad("schedule.timesteps must be >= 1");
        }
        if self.sample_steps < 1 || self.sample_steps > self.timesteps {
            return bad("schedule.sample_steps must lie in 1..=timesteps");
        }
        if self.batch_size < 1 {
            return bad("train.batch_size must be >= 1");
        }
        if self.train_steps < 1 {
            return bad("train.steps must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("train.learning_rate must be positive");
        }
        if self.sample_count < 1 {
            return bad("sample.count must be >= 1");
        }
        Ok(())
    }

    /// Canonical listing of every result-affecting field, in fixed order.
    /// `run.threads` is excluded: results are thread-count invariant.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let mult = self
            .channel_mult
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(s, "schedule.timesteps={}", self.timesteps);
        let _ = writeln!(s, "schedule.beta_start={:?}", self.beta_start);
        let _ = writeln!(s, "schedule.beta_end={:?}", self.beta_end);
        let _ = writeln!(s, "schedule.sample_steps={}", self.sample_steps);
        let _ = writeln!(s, "model.base_channels={}", self.base_channels);
        let _ = writeln!(s, "model.channel_mult={mult}");
        let _ = writeln!(s, "model.blocks_per_level={}", self.blocks_per_level);
        let _ = writeln!(s, "model.time_embed_dim={}", self.time_embed_dim);
        let _ = writeln!(s, "train.batch_size={}", self.batch_size);
        let _ = writeln!(s, "train.steps={}", self.train_steps);
        let _ = writeln!(s, "train.learning_rate={:?}", self.learning_rate);
        let _ = writeln!(s, "train.seed={}", self.train_seed);
        let _ = writeln!(s, "train.checkpoint_every={}", self.checkpoint_every);
        let _ = writeln!(s, "sample.count={}", self.sample_count);
        let _ = writeln!(s, "sample.seed={}", self.sample_seed);
        let _ = writeln!(s, "sample.clamp_guide={}", self.clamp_guide);
        let _ = writeln!(s, "data.image_size={}", self.image_size);
        let _ = writeln!(s, "data.count={}", self.data_count);
        let _ = writeln!(s, "data.lesions_min={}", self.lesions_min);
        let _ = writeln!(s, "data.lesions_max={}", self.lesions_max);
        let _ = writeln!(s, "data.radius_min={:?}", self.radius_min);
        let _ = writeln!(s, "data.radius_max={:?}", self.radius_max);
        let _ = writeln!(s, "data.contrast_min={:?}", self.contrast_min);
        let _ = writeln!(s, "data.contrast_max={:?}", self.contrast_max);
        let _ = writeln!(s, "data.background_scale={:?}", self.background_scale);
        let _ = writeln!(s, "data.background_amplitude={:?}", self.background_amplitude);
        let _ = writeln!(s, "data.edge_softness={:?}", self.edge_softness);
        let _ = writeln!(s, "data.seed={}", self.data_seed);
        let _ = writeln!(s, "data.allow_empty={}", self.allow_empty);
        let _ = writeln!(s, "eval.contrast_offset={:?}", self.eval_contrast_offset);
        let _ = writeln!(s, "eval.blur_sigma={:?}", self.eval_blur_sigma);
        s
    }

    /// First 16 hex chars of the SHA-256 of [`canonical`](Self::canonical).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Render as a config file (for the self-describing run directory).
    pub fn render(&self) -> String {
        let mult = self
            .channel_mult
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "[schedule]\n\
             timesteps = {}\n\
             beta_start = {:?}\n\
             beta_end = {:?}\n\
             sample_steps = {}\n\
             \n[model]\n\
             base_channels = {}\n\
             channel_mult = {mult}\n\
             blocks_per_level = {}\n\
             time_embed_dim = {}\n\
             \n[train]\n\
             batch_size = {}\n\
             steps = {}\n\
             learning_rate = {:?}\n\
             seed = {}\n\
             checkpoint_every = {}\n\
             \n[sample]\n\
             count = {}\n\
             seed = {}\n\
             clamp_guide = {}\n\
             \n[data]\n\
             image_size = {}\n\
             count = {}\n\
             lesions_min = {}\n\
             lesions_max = {}\n\
             radius_min = {:?}\n\
             radius_max = {:?}\n\
             contrast_min = {:?}\n\
             contrast_max = {:?}\n\
             background_scale = {:?}\n\
             background_amplitude = {:?}\n\
             edge_softness = {:?}\n\
             seed = {}\n\
             allow_empty = {}\n\
             \n[eval]\n\
             contrast_offset = {:?}\n\
             blur_sigma = {:?}\n\
             \n[run]\n\
             threads = {}\n",
            self.timesteps,
            self.beta_start,
            self.beta_end,
            self.sample_steps,
            self.base_channels,
            self.blocks_per_level,
            self.time_embed_dim,
            self.batch_size,
            self.train_steps,
            self.learning_rate,
            self.train_seed,
            self.checkpoint_every,
            self.sample_count,
            self.sample_seed,
            self.clamp_guide,
            self.image_size,
            self.data_count,
            self.lesions_min,
            self.lesions_max,
            self.radius_min,
            self.radius_max,
            self.contrast_min,
            self.contrast_max,
            self.background_scale,
            self.background_amplitude,
            self.edge_softness,
            self.data_seed,
            self.allow_empty,
            self.eval_contrast_offset,
            self.eval_blur_sigma,
            self.threads,
        )
    }

    pub fn schedule_params(&self) -> ScheduleParams {
        ScheduleParams {
            t_max: self.timesteps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            image_size: self.image_size,
            lesion_count: (self.lesions_min, self.lesions_max),
            lesion_radius: (self.radius_min, self.radius_max),
            contrast: (self.contrast_min, self.contrast_max),
            background_scale: self.background_scale,
            background_amplitude: self.background_amplitude,
            edge_softness: self.edge_softness,
            count: self.data_count,
            seed: self.data_seed,
            allow_empty: self.allow_empty,
        }
    }

    pub fn denoiser_config(&self, image_size: usize) -> DenoiserConfig {
        DenoiserConfig {
            image_size,
            base_channels: self.base_channels,
            channel_mult: self.channel_mult.clone(),
            blocks_per_level: self.blocks_per_level,
            time_embed_dim: self.time_embed_dim,
            max_timestep: self.timesteps,
        }
    }

    pub fn train_config(&self, role: ModelRole) -> TrainConfig {
        TrainConfig {
            role,
            batch_size: self.batch_size,
            steps: self.train_steps,
            learning_rate: self.learning_rate,
            schedule: self.schedule_params(),
            seed: self.train_seed,
            checkpoint_every: (self.checkpoint_every > 0).then_some(self.checkpoint_every),
            checkpoint_dir: None,
        }
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig, pairgen_core::Error> {
        Ok(SamplerConfig {
            schedule: self.schedule_params().build()?,
            steps: uniform_substeps(self.timesteps, self.sample_steps)?,
            sigma: SigmaMode::Deterministic,
            clamp_guide: self.clamp_guide,
            seed: self.sample_seed,
        })
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            contrast_offset: self.eval_contrast_offset,
            blur_sigma: self.eval_blur_sigma,
        }
    }
}
