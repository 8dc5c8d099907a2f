mod bench;
mod download;
mod interrupt;
mod report;
mod resolve;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use genodl::controller::{ControllerConfig, Method, PenaltyCoefficient, DEFAULT_MAX_CONCURRENCY, DEFAULT_PROBE_SECONDS};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or inputs; exit status 2.
    #[error("{0}")]
    Usage(String),
    /// The work ran but did not fully succeed; exit status 1.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

pub type CliResult = Result<(), CliError>;

fn io_failed(what: &str, path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Failed(format!("{what} {}: {e}", path.display()))
}

/// Adaptive parallel downloader for sequence archives.
#[derive(Parser)]
#[command(name = "genodl", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Resolve accessions and/or URLs and download them.
    Download(download::DownloadArgs),
    /// Run a scenario in the simulator: adaptive vs fixed 3 and fixed 5 streams.
    Simulate(simulate::SimulateArgs),
    /// Print the files behind each accession as TSV, without downloading.
    Resolve(resolve::ResolveArgs),
    /// Sweep penalty coefficients and optimizers in the simulator.
    Bench(bench::BenchArgs),
}

/// Controller flags shared by the subcommands that run it.
#[derive(Args, Debug, Clone)]
pub struct ControllerArgs {
    /// Penalty coefficient of the utility T / k^c.
    #[arg(long, default_value_t = 1.02)]
    k: f64,
    /// Seconds each concurrency level is held and measured.
    #[arg(long = "probe-secs")]
    probe_secs: Option<f64>,
    #[arg(long, value_parser = ["gd", "bayes"], default_value = "gd")]
    optimizer: String,
    #[arg(long, default_value_t = DEFAULT_MAX_CONCURRENCY)]
    max_concurrency: u32,
    #[arg(long, default_value_t = 1)]
    initial_concurrency: u32,
    /// Seed for the optimizer (and simulator noise).
    #[arg(long)]
    seed: Option<u64>,
}

impl ControllerArgs {
    pub fn config(&self) -> Result<ControllerConfig, CliError> {
        let usage = |e: genodl::controller::ControllerError| CliError::Usage(e.to_string());
        let cfg = ControllerConfig {
            k: PenaltyCoefficient::new(self.k).map_err(usage)?,
            probe_seconds: self.probe_secs.unwrap_or(DEFAULT_PROBE_SECONDS),
            method: self.optimizer.parse::<Method>().map_err(usage)?,
            max_concurrency: self.max_concurrency,
            initial_concurrency: self.initial_concurrency,
            rng_seed: self.seed.unwrap_or(0),
            ..ControllerConfig::default()
        };
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

/// Where recorded metadata responses live, when replaying instead of
/// querying the live services.
#[derive(Args, Debug, Clone)]
pub struct MetadataArgs {
    /// Accession list: one per line, `#` comments allowed.
    #[arg(long)]
    accessions: Option<PathBuf>,
    /// Replay metadata responses from this fixture directory.
    #[arg(long)]
    fixtures: Option<PathBuf>,
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, _) => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().format_target(false).init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose, cli.quiet);
    let result = match cli.command {
        Command::Download(args) => download::run(args),
        Command::Simulate(args) => simulate::run(args),
        Command::Resolve(args) => resolve::run(args),
        Command::Bench(args) => bench::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("genodl: {e}");
            ExitCode::from(e.code())
        }
    }
}
