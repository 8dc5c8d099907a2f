use std::fs;
use std::path::{Path, PathBuf};

use genodl::controller::{Method, ProbeRecord};
use genodl::engine::JobReport;
use genodl::telemetry::{self, mbps, Telemetry};
use serde::Serialize;

use crate::{io_failed, CliError};

/// Width of the rows in the telemetry CSV.
pub const BUCKET_SECONDS: f64 = 1.0;

#[derive(Debug, Serialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Mode {
    Adaptive { optimizer: Method, k: f64, probe_seconds: f64 },
    Fixed { concurrency: u32 },
}

#[derive(Debug, Serialize)]
pub struct Unresolved {
    pub accession: String,
    pub error: String,
}

/// The JSON summary of one `download` run.
#[derive(Debug, Serialize)]
pub struct DownloadSummary {
    #[serde(flatten)]
    pub mode: Mode,
    pub total_bytes: u64,
    pub seconds: f64,
    pub mean_mbps: f64,
    pub mean_concurrency: f64,
    pub peak_in_flight: u32,
    pub interrupted: bool,
    pub jobs: Vec<JobReport>,
    pub unresolved: Vec<Unresolved>,
    pub probes: Vec<ProbeRecord>,
}

impl DownloadSummary {
    /// Totals come from the telemetry log so the JSON and the CSV agree.
    pub fn new(mode: Mode, telemetry: &Telemetry) -> Self {
        let seconds = telemetry.finished_at().unwrap_or_else(|| telemetry.now());
        let total_bytes = telemetry.total_bytes();
        Self {
            mode,
            total_bytes,
            seconds,
            mean_mbps: if seconds > 0.0 { mbps(total_bytes, seconds) } else { 0.0 },
            mean_concurrency: telemetry.mean_concurrency(seconds),
            peak_in_flight: 0,
            interrupted: false,
            jobs: Vec::new(),
            unresolved: Vec::new(),
            probes: Vec::new(),
        }
    }
}

/// `report.json` → `report.csv`.
pub fn csv_path(json: &Path) -> PathBuf {
    json.with_extension("csv")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_failed("cannot create", dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_failed("cannot write", path, e))
}

pub fn write_series(path: &Path, rows: &[telemetry::SeriesRow]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    telemetry::write_csv(rows, &mut buf).expect("writing to memory");
    fs::write(path, buf).map_err(|e| io_failed("cannot write", path, e))
}
