use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Args;
use genodl::controller::{optimizer_loop, LoopReport, TransferControl};
use genodl::engine::{Engine, EngineConfig, Fetcher, HttpFetcher, JobStatus, TransferJob, DEFAULT_CHUNK_BYTES};
use genodl::resolver::build_jobs;
use genodl::telemetry::Telemetry;

use crate::report::{self, DownloadSummary, Mode, BUCKET_SECONDS};
use crate::resolve::{read_accessions, resolve_accessions};
use crate::{interrupt, CliError, CliResult, ControllerArgs, MetadataArgs};

#[derive(Args, Debug)]
pub struct DownloadArgs {
    #[command(flatten)]
    metadata: MetadataArgs,
    /// Direct file URL; repeatable. Saved as `<out>/<basename>`.
    #[arg(long = "url")]
    urls: Vec<String>,
    /// `md5sum`-format listing; its digests are checked against `--url`
    /// files with the same basename.
    #[arg(long)]
    md5sums: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    controller: ControllerArgs,
    /// Hold N streams for the whole run instead of tuning.
    #[arg(long, value_name = "N", conflicts_with_all = ["optimizer", "k", "probe_secs"])]
    fixed: Option<u32>,
    /// JSON summary path; the telemetry CSV goes next to it. Default `<out>/report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Continue from manifests left by an interrupted run.
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = DEFAULT_CHUNK_BYTES)]
    chunk_bytes: u64,
}

/// The engine, plus the signal flag as a second way to be finished.
struct Interruptible {
    engine: Engine,
}

impl TransferControl for Interruptible {
    fn set_concurrency(&mut self, n: u32) {
        self.engine.set_concurrency(n);
    }

    fn is_finished(&self) -> bool {
        interrupt::requested() || self.engine.is_finished()
    }

    fn hold(&mut self, seconds: f64) -> (f64, f64) {
        let start = self.engine.telemetry().now();
        loop {
            let left = seconds - (self.engine.telemetry().now() - start);
            if left <= 0.0 || self.is_finished() {
                break;
            }
            self.engine.hold(left.min(0.1));
        }
        (start, self.engine.telemetry().now())
    }
}

fn basename(url: &str) -> &str {
    let path = url.split(['?', '#']).next().unwrap_or(url);
    path.rsplit('/').find(|s| !s.is_empty()).unwrap_or("download")
}

fn read_md5sums(path: &Path) -> Result<HashMap<String, String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut sums = HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (md5, name) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| CliError::Usage(format!("{} line {}: expected `md5  name`", path.display(), i + 1)))?;
        let name = name.trim_start().trim_start_matches('*');
        sums.insert(basename(name).to_owned(), md5.to_ascii_lowercase());
    }
    Ok(sums)
}

fn url_jobs(
    urls: &[String],
    md5s: &HashMap<String, String>,
    out: &Path,
    taken: &mut HashSet<PathBuf>,
) -> Vec<TransferJob> {
    urls.iter()
        .map(|url| {
            let name = basename(url);
            let mut dest = out.join(name);
            let mut n = 1;
            while !taken.insert(dest.clone()) {
                dest = out.join(format!("{n}-{name}"));
                n += 1;
            }
            let expected_md5 = md5s.get(name).cloned();
            TransferJob { source_url: url.clone(), total_bytes: None, expected_md5, destination: dest }
        })
        .collect()
}

pub fn run(args: DownloadArgs) -> CliResult {
    let controller = args.controller.config()?;
    if args.fixed == Some(0) {
        return Err(CliError::Usage("--fixed must be at least 1".into()));
    }
    let engine_cfg = EngineConfig {
        chunk_bytes: args.chunk_bytes,
        max_concurrency: args.fixed.unwrap_or(0).max(controller.max_concurrency),
        resume: args.resume,
        ..EngineConfig::default()
    };
    engine_cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let report_path = args.report.clone().unwrap_or_else(|| args.out.join("report.json"));
    let mode = match args.fixed {
        Some(concurrency) => Mode::Fixed { concurrency },
        None => Mode::Adaptive {
            optimizer: controller.method,
            k: controller.k.value(),
            probe_seconds: controller.probe_seconds,
        },
    };

    let accessions = match &args.metadata.accessions {
        Some(path) => read_accessions(path)?,
        None => Vec::new(),
    };
    if args.metadata.accessions.is_none() && args.urls.is_empty() {
        return Err(CliError::Usage("give --accessions and/or --url".into()));
    }
    let (records, unresolved) = resolve_accessions(&accessions, args.metadata.fixtures.as_deref())?;
    for u in &unresolved {
        log::error!("{}: {}", u.accession, u.error);
    }
    let mut jobs = build_jobs(&records, &args.out);
    let mut taken: HashSet<PathBuf> = jobs.iter().map(|j| j.destination.clone()).collect();
    let md5s = args.md5sums.as_deref().map(read_md5sums).transpose()?.unwrap_or_default();
    jobs.extend(url_jobs(&args.urls, &md5s, &args.out, &mut taken));

    interrupt::install();
    let telemetry = Arc::new(Telemetry::new());
    let (engine_report, loop_report) = if jobs.is_empty() {
        telemetry.finish(0.0);
        (None, LoopReport::default())
    } else {
        let fetcher: Arc<dyn Fetcher> = Arc::new(HttpFetcher::default());
        let engine = Engine::start(jobs, engine_cfg, Arc::clone(&telemetry), fetcher)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let mut control = Interruptible { engine };
        let loop_report = match args.fixed {
            Some(n) => {
                control.set_concurrency(n);
                while !control.is_finished() {
                    control.hold(0.25);
                }
                control.set_concurrency(0);
                LoopReport::default()
            }
            None => optimizer_loop(&mut control, &telemetry, &controller),
        };
        let engine_report = control.engine.wait();
        if telemetry.finished_at().is_none() {
            telemetry.finish(telemetry.now());
        }
        (Some(engine_report), loop_report)
    };

    let mut summary = DownloadSummary::new(mode, &telemetry);
    summary.unresolved = unresolved;
    summary.probes = loop_report.probes;
    if let Some(r) = engine_report {
        summary.peak_in_flight = r.peak_in_flight;
        summary.interrupted = r.jobs.iter().any(|j| j.status == JobStatus::Interrupted);
        summary.jobs = r.jobs;
    }
    let rows = telemetry.series(BUCKET_SECONDS).expect("bucket width is positive");
    report::write_json(&report_path, &summary)?;
    report::write_series(&report::csv_path(&report_path), &rows)?;
    log::info!(
        "{} bytes in {:.1} s ({:.1} Mbps, mean concurrency {:.2})",
        summary.total_bytes,
        summary.seconds,
        summary.mean_mbps,
        summary.mean_concurrency
    );

    if summary.interrupted {
        return Err(CliError::Failed("interrupted; rerun with --resume to continue".into()));
    }
    let failed: Vec<String> = summary
        .jobs
        .iter()
        .filter(|j| !j.succeeded())
        .map(|j| format!("{}: {:?} {:?}", j.destination.display(), j.status, j.verify))
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Failed(format!("{} job(s) failed:\n  {}", failed.len(), failed.join("\n  "))));
    }
    if !summary.unresolved.is_empty() {
        return Err(CliError::Failed(format!("{} accession(s) could not be resolved", summary.unresolved.len())));
    }
    Ok(())
}
