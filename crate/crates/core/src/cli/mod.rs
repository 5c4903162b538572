//! The `calshift` executable: dataset generation, training runs, λ sweeps and
//! property checks.
//!
//! Exit codes: 0 success, 2 configuration or argument error, 3 I/O or data
//! format error, 4 training failure, 5 property check failure.

pub mod commands;
pub mod config;
pub mod report;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Error;
pub use commands::{CheckOptions, Runtime};
pub use config::ExperimentConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_TRAINING: i32 = 4;
pub const EXIT_PROPERTY: i32 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "calshift",
    version,
    about = "Calibrated few-shot adaptation under covariate shift"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for sweep cells.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    /// ECE bin count.
    #[arg(long, global = true)]
    pub bins: Option<usize>,
    /// Base seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write the datasets of every replicate, with manifests.
    Generate,
    /// Train baseline, FIM, CMP and combined variants for every shot count.
    Run,
    /// Sweep the λ grids at the configured shot count.
    Sweep,
    /// Run the property checks.
    Check,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Argument(_) | Error::Config(_) => EXIT_CONFIG,
        Error::Io(_) | Error::Schema(_) | Error::Csv(_) | Error::Json(_) | Error::Data(_) => EXIT_IO,
        Error::Training { .. } | Error::Degenerate(_) | Error::NonFinite { .. } => EXIT_TRAINING,
    }
}

/// Apply command-line overrides. `--seed` and `--bins` change results and are
/// echoed into every record; `--out` and `--workers` only affect where and how
/// the work runs.
fn resolve(cli: &Cli) -> Result<(ExperimentConfig, Runtime), Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(bins) = cli.bins {
        cfg.bins = bins;
    }
    cfg.validate()?;
    let runtime = Runtime {
        out: cli.out.clone().unwrap_or_else(|| cfg.out.clone()),
        workers: cli.workers.unwrap_or(cfg.workers).max(1),
    };
    Ok((cfg, runtime))
}

/// Run one command line, writing reports to `stdout` and diagnostics to
/// `stderr`; returns the process exit code.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{}", e.render());
                return EXIT_CONFIG;
            }
            let _ = write!(stdout, "{}", e.render());
            return EXIT_OK;
        }
    };
    let outcome = match cli.command {
        Command::Check => {
            let opts = CheckOptions {
                seed: cli.seed.unwrap_or(0),
                json: cli.json,
            };
            commands::check(&opts, stdout)
        }
        command => resolve(&cli).and_then(|(cfg, runtime)| match command {
            Command::Generate => commands::generate(&cfg, &runtime, stdout).map(|_| EXIT_OK),
            Command::Run => commands::run(&cfg, &runtime, stdout).map(|_| EXIT_OK),
            Command::Sweep => commands::sweep(&cfg, &runtime, stdout).map(|_| EXIT_OK),
            Command::Check => unreachable!(),
        }),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn main() -> i32 {
    let mut stdout = std::io::stdout().lock();
    let mut stderr = std::io::stderr().lock();
    let code = run_cli(std::env::args_os(), &mut stdout, &mut stderr);
    let _ = stdout.flush();
    code
}
