//! `rtsom`: generate synthetic data, precompute the SVD of the data operator,
//! reconstruct coefficients and aggregate results.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Parser, Subcommand};

use crate::commands::{CacheMissing, Context};
use crate::config::{ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "rtsom",
    version,
    about = "Subspace-minimization RTE coefficient reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.directory`).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Worker threads for the data-parallel kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Noise seed (overrides `noise.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Forward-solve every source and write noisy boundary data.
    GenData,
    /// Assemble the data operator and cache its SVD.
    PrecomputeSvd,
    /// Run the configured algorithm at every noise level.
    Reconstruct,
    /// Aggregate all summaries into one CSV table.
    Report,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_CACHE: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    use rtsom::Error as E;
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<serde_json::Error>() || cause.is::<std::io::Error>() {
            return EXIT_CONFIG;
        }
        if cause.is::<CacheMissing>() {
            return EXIT_CACHE;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::CacheVersion { .. }
                | E::CacheHashMismatch { .. }
                | E::CacheTruncated { .. }
                | E::CacheCorrupt(_) => EXIT_CACHE,
                E::InvalidArgument(_) | E::Truncation { .. } | E::Io { .. } => EXIT_CONFIG,
                _ => EXIT_NUMERICAL,
            };
        }
    }
    EXIT_NUMERICAL
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(ConfigError("--threads must be at least 1".into()).into());
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")?;
    #[cfg(not(feature = "parallel"))]
    if n > 1 {
        log::warn!("built without the `parallel` feature; --threads {n} ignored");
    }
    Ok(())
}

fn load(cli: &Cli) -> Result<Context> {
    let path = cli
        .config
        .clone()
        .ok_or_else(|| ConfigError("--config <path> is required".into()))?;
    let text = std::fs::read_to_string(&path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    let mut config = RunConfig::parse(&text, &path)?;
    if let Some(seed) = cli.seed {
        config.noise.seed = seed;
    }
    if let Some(out) = &cli.output {
        config.output.directory = out.clone();
    }
    Ok(Context {
        out: config.output.directory.clone(),
        config_sha256: manifest::sha256_hex(text.as_bytes()),
        config,
        config_path: path,
    })
}

fn run(cli: &Cli) -> Result<()> {
    configure_threads(cli.threads)?;
    let ctx = load(cli)?;
    match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::PrecomputeSvd => commands::precompute_svd(&ctx),
        Command::Reconstruct => commands::reconstruct_cmd(&ctx),
        Command::Report => commands::report(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
