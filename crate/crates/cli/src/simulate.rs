use std::fs;
use std::path::PathBuf;

use clap::Args;
use genodl::simulator::{compare, run_adaptive, run_fixed, CompareRow, SimScenario, SimTrace};
use serde::Serialize;

use crate::report::write_json;
use crate::{io_failed, CliError, CliResult, ControllerArgs};

/// Fixed-stream baselines every simulation is compared against.
pub const BASELINES: [u32; 2] = [3, 5];

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Scenario file of `key = value` lines.
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    controller: ControllerArgs,
}

#[derive(Serialize)]
struct Comparison<'a> {
    baseline: &'a str,
    scenario: &'a SimScenario,
    rows: Vec<CompareRow>,
}

pub fn run(args: SimulateArgs) -> CliResult {
    let text = fs::read_to_string(&args.scenario)
        .map_err(|e| CliError::Usage(format!("cannot read scenario {}: {e}", args.scenario.display())))?;
    let mut scenario = SimScenario::parse(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.scenario.display())))?;
    if let Some(seed) = args.controller.seed {
        scenario.rng_seed = seed;
    }
    if let Some(p) = args.controller.probe_secs {
        scenario.probe_seconds = p;
    }
    scenario.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = args.controller.config()?;

    let mut traces: Vec<(String, SimTrace)> = vec![("adaptive".into(), run_adaptive(&scenario, &cfg))];
    for c in BASELINES {
        traces.push((format!("fixed{c}"), run_fixed(&scenario, c)));
    }

    fs::create_dir_all(&args.out).map_err(|e| io_failed("cannot create", &args.out, e))?;
    for (name, trace) in &traces {
        let path = args.out.join(format!("trace_{name}.csv"));
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).expect("writing to memory");
        fs::write(&path, buf).map_err(|e| io_failed("cannot write", &path, e))?;
    }
    let baseline = "fixed3";
    let rows = compare(&traces, baseline).map_err(|e| CliError::Failed(e.to_string()))?;
    println!("{:<10} {:>14} {:>12} {:>10} {:>9}", "run", "completion_s", "mean_mbps", "mean_conc", "speedup");
    for r in &rows {
        println!(
            "{:<10} {:>14.1} {:>12.1} {:>10.2} {:>9.3}",
            r.name, r.completion_seconds, r.mean_mbps, r.mean_concurrency, r.speedup_vs_baseline
        );
    }
    write_json(&args.out.join("comparison.json"), &Comparison { baseline, scenario: &scenario, rows })
}
