//! Operator surface: data generation, training, sampling, evaluation, and
//! learning-free verification, wired together by one config file.
//!
//! Exit codes: 0 success, 2 usage (bad invocation or invalid config file),
//! 3 configuration mismatch between artifacts, 4 numeric failure, 5 I/O or
//! malformed file.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::RunConfig;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_IO: u8 = 5;

/// Paired mask/image generation with two mutually guiding diffusion models.
#[derive(Parser)]
#[command(name = "pairgen", version, about)]
struct Cli {
    /// Config file (key = value with [section] headers); defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; defaults to $PAIRGEN_OUT_ROOT/<command> or runs/<command>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (0 = all cores, 1 = fully serial). Results are
    /// bit-identical for any value.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Guider,
    Cond,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired dataset.
    GenData,
    /// Train one of the two models on a generated dataset.
    Train {
        #[arg(long, value_enum)]
        model: ModelArg,
        /// Dataset directory (or manifest path).
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate paired samples from two trained checkpoints.
    Sample {
        /// Number of pairs (overrides sample.count).
        #[arg(short, long)]
        n: Option<usize>,
        /// Base seed (overrides sample.seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        guider: PathBuf,
        #[arg(long)]
        cond: PathBuf,
    },
    /// Score generated samples against a real dataset.
    Eval {
        /// Sample run directory (or manifest path).
        #[arg(long)]
        samples: PathBuf,
        /// Real dataset directory (or manifest path).
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the learning-free oracle suites and print pass/fail lines.
    Verify,
}

/// Failure that carries its process exit code.
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn new(code: u8, kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code,
            kind,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, "usage", message)
    }
}

impl From<pairgen_core::Error> for CliError {
    fn from(e: pairgen_core::Error) -> Self {
        use pairgen_core::Error as E;
        match &e {
            E::Config(_) | E::Contract(_) => Self::new(EXIT_CONFIG, "config", e.to_string()),
            E::Numeric(_) => Self::new(EXIT_NUMERIC, "numeric", e.to_string()),
            E::Format { .. } | E::Io(_) => Self::new(EXIT_IO, "io", e.to_string()),
        }
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_IO, "io", e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let config = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => return report(e),
    };

    let threads = cli.threads.unwrap_or(config.threads);
    pairgen_core::tensor::parallel::set_threads(threads);

    let out_dir = resolve_out_dir(&cli);
    let result = match &cli.command {
        Command::GenData => commands::gen_data(&config, &out_dir),
        Command::Train { model, data } => {
            let role = match model {
                ModelArg::Guider => pairgen_core::paired::ModelRole::Guider,
                ModelArg::Cond => pairgen_core::paired::ModelRole::Conditional,
            };
            commands::train(&config, role, data, &out_dir)
        }
        Command::Sample {
            n,
            seed,
            guider,
            cond,
        } => commands::sample(&config, *n, *seed, guider, cond, &out_dir),
        Command::Eval { samples, data } => commands::eval(&config, samples, data, &out_dir),
        Command::Verify => commands::verify(&config, &out_dir),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    match &cli.config {
        Some(path) => Ok(RunConfig::from_file(path)?),
        None => Ok(RunConfig::default()),
    }
}

fn resolve_out_dir(cli: &Cli) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    let root = std::env::var_os("PAIRGEN_OUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    let name = match &cli.command {
        Command::GenData => "gen-data",
        Command::Train { .. } => "train",
        Command::Sample { .. } => "sample",
        Command::Eval { .. } => "eval",
        Command::Verify => "verify",
    };
    root.join(name)
}

fn report(e: CliError) -> ExitCode {
    // One machine-parsable line on stderr.
    eprintln!("error code={} kind={} msg={:?}", e.code, e.kind, e.message);
    ExitCode::from(e.code)
}
