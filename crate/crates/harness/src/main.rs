use std::path::PathBuf;

use clap::Parser;
use harness::{generate_fixture_set, serve, ServerOptions, ThrottleConfig};

/// Throttled static file server for local download experiments.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Directory to serve.
    root: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Per-connection cap in bytes per second.
    #[arg(long)]
    per_connection: Option<u64>,
    /// Aggregate cap in bytes per second.
    #[arg(long)]
    global: Option<u64>,
    /// Ignore Range headers.
    #[arg(long)]
    no_ranges: bool,
    /// Write COUNT seeded random files of SIZE bytes into ROOT first.
    #[arg(long, num_args = 2, value_names = ["COUNT", "SIZE"])]
    generate: Option<Vec<u64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args = Args::parse();
    if let Some(spec) = &args.generate {
        let files = generate_fixture_set(&args.root, spec[0] as usize, spec[1], args.seed)?;
        eprintln!("wrote {} files to {}", files.len(), args.root.display());
    }
    let throttle = ThrottleConfig::new(args.per_connection, args.global)?;
    let server = serve(&args.root, ServerOptions { throttle, ranges: !args.no_ranges }, args.port)?;
    eprintln!("serving {} at http://{}/", args.root.display(), server.addr());
    loop {
        std::thread::park();
    }
}
