use std::fs;
use std::path::PathBuf;

use clap::Args;
use genodl::controller::{ControllerConfig, Method, PenaltyCoefficient};
use genodl::simulator::{sweep, BenchRow, SimScenario, ThroughputModel};

use crate::report::write_json;
use crate::{CliError, CliResult};

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Scenario file; default is a noiseless diminishing-returns link
    /// (B = 10000 Mbps, alpha = 1000 Mbps, 100 GB).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Penalty coefficients to sweep.
    #[arg(long = "k", value_delimiter = ',', default_values_t = [1.01, 1.02, 1.05])]
    ks: Vec<f64>,
    #[arg(long = "optimizer", value_delimiter = ',', value_parser = ["gd", "bayes"], default_values_t = ["gd".to_string(), "bayes".to_string()])]
    optimizers: Vec<String>,
    /// Runs per cell, seeded `first-seed`, `first-seed + 1`, ...
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long = "probe-secs")]
    probe_secs: Option<f64>,
    #[arg(long)]
    max_concurrency: Option<u32>,
    /// Also write the rows as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

pub fn default_scenario() -> SimScenario {
    SimScenario { model: ThroughputModel::Saturating, ..SimScenario::capped(10_000.0, 1000.0, 100.0) }
}

pub fn run(args: BenchArgs) -> CliResult {
    let usage = |e: &dyn std::fmt::Display| CliError::Usage(e.to_string());
    let mut scenario = match &args.scenario {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read scenario {}: {e}", path.display())))?;
            SimScenario::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => default_scenario(),
    };
    if let Some(p) = args.probe_secs {
        scenario.probe_seconds = p;
    }
    scenario.validate().map_err(|e| usage(&e))?;
    let ks = args.ks.iter().map(|&k| PenaltyCoefficient::new(k)).collect::<Result<Vec<_>, _>>().map_err(|e| usage(&e))?;
    let methods = args.optimizers.iter().map(|m| m.parse::<Method>()).collect::<Result<Vec<_>, _>>().map_err(|e| usage(&e))?;
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (args.first_seed..args.first_seed + args.seeds).collect();
    let mut base = ControllerConfig::default();
    if let Some(m) = args.max_concurrency {
        base.max_concurrency = m;
    }
    base.validate().map_err(|e| usage(&e))?;

    let rows: Vec<BenchRow> = sweep(&scenario, &base, &ks, &methods, &seeds);
    println!("{:>6} {:>9} {:>5} {:>12} {:>10} {:>14}", "k", "optimizer", "runs", "mean_mbps", "mean_conc", "completion_s");
    for r in &rows {
        println!(
            "{:>6} {:>9} {:>5} {:>12.1} {:>10.2} {:>14.1}",
            r.k, r.optimizer.to_string(), r.runs, r.mean_mbps, r.mean_concurrency, r.mean_completion_seconds
        );
    }
    match &args.json {
        Some(path) => write_json(path, &rows),
        None => Ok(()),
    }
}
