//! `profiler-pl`: synthetic data, extraction, training, cross-validation,
//! ensembles and diagnostics from the command line.
//!
//! Failures print one line, `error: <kind>: <message>`, to stderr and exit
//! with status 1 (2 for usage errors).

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use profiler_core::profile::ConfigKind;

#[derive(Debug, Parser)]
#[command(name = "profiler-pl", version, about = "Map-based path loss modeling toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads. 1 gives bit-reproducible artifacts.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_parser = parse_kind)]
    pub model: Option<ConfigKind>,
    #[arg(long, global = true)]
    pub runs: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
}

fn parse_kind(s: &str) -> Result<ConfigKind, String> {
    s.parse().map_err(|e: profiler_core::Error| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic terrain raster and labeled measurements.
    Synth,
    /// Extract network inputs from measurements and a raster.
    Extract,
    /// Train models on every region without a holdout.
    Train,
    /// Leave-one-region-out cross-validation.
    Cv,
    /// Evaluate checkpoint ensembles per region and per category.
    EnsembleEval,
    /// Regress per-region test error on link statistics.
    Diagnose,
    /// Average loss curves epoch by epoch.
    Losscurve,
}

fn init_logging() {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Warn)
        .parse_env("PROFILER_PL_LOG")
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    init_logging();
    match commands::run(cli.command, &cli.global) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
