//! Parallel chunked transfer engine.
//!
//! Every job is split into byte ranges that go into one queue shared by a
//! fixed pool of workers. Worker `i` pulls chunks only while its status is
//! active, so the controller steers throughput purely by moving the active
//! prefix of the pool. Each worker owns one keep-alive connection, writes
//! bytes at their file offset as they arrive and reports them to telemetry.
//! Completed ranges are recorded in a sidecar manifest so a killed transfer
//! resumes where it left off.

mod chunks;
mod http;
mod manifest;
mod status;
mod verify;

use std::fs::{self, File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use chunks::{plan_chunks, ChunkRange, ChunkState};
pub use http::{Connection, FetchError, Fetcher, HttpConnection, HttpFetcher, RemoteInfo};
pub use manifest::{manifest_path, ManifestError, TransferManifest, MANIFEST_VERSION};
pub use status::{WorkerStatus, WorkerStatuses};
pub use verify::{md5_file, md5_hex, verify, VerifyOutcome};

use crate::controller::TransferControl;
use crate::telemetry::Telemetry;
use chunks::{ChunkQueue, Task};

pub const DEFAULT_CHUNK_BYTES: u64 = 32 * 1024 * 1024;

/// One file to download.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferJob {
    pub source_url: String,
    pub total_bytes: Option<u64>,
    pub expected_md5: Option<String>,
    pub destination: PathBuf,
}

/// Exponential backoff for failed chunks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: f64,
    /// Failures of one chunk before its job is abandoned.
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { base: Duration::from_secs(1), factor: 2.0, max_attempts: 5 }
    }
}

impl RetryPolicy {
    /// Wait before the retry that follows failure number `failures` (1-based).
    pub fn delay(&self, failures: u32) -> Duration {
        let exp = i32::try_from(failures.saturating_sub(1)).unwrap_or(i32::MAX);
        self.base.mul_f64(self.factor.powi(exp).min(1e6))
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine configuration: {0}")]
    InvalidConfig(String),
    #[error("no jobs to run")]
    NoJobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub chunk_bytes: u64,
    /// Size of the worker pool; the controller never activates more.
    pub max_concurrency: u32,
    pub retry: RetryPolicy,
    /// Continue from existing manifests instead of starting over.
    pub resume: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            chunk_bytes: DEFAULT_CHUNK_BYTES,
            max_concurrency: crate::controller::DEFAULT_MAX_CONCURRENCY,
            retry: RetryPolicy::default(),
            resume: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.chunk_bytes == 0 {
            return Err(EngineError::InvalidConfig("chunk size must be positive".into()));
        }
        if self.max_concurrency == 0 {
            return Err(EngineError::InvalidConfig("max concurrency must be at least 1".into()));
        }
        if self.retry.max_attempts == 0 || !(self.retry.factor >= 1.0) {
            return Err(EngineError::InvalidConfig("retry needs >= 1 attempt and a factor >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "reason", rename_all = "snake_case")]
pub enum JobStatus {
    Completed,
    Failed(String),
    /// Stopped before finishing; the manifest allows a later resume.
    Interrupted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobReport {
    pub source_url: String,
    pub destination: PathBuf,
    pub total_bytes: Option<u64>,
    /// Bytes received during this run.
    pub bytes_fetched: u64,
    /// Bytes already on disk from an earlier run.
    pub bytes_resumed: u64,
    pub ranged: bool,
    pub status: JobStatus,
    pub verify: Option<VerifyOutcome>,
}

impl JobReport {
    pub fn succeeded(&self) -> bool {
        self.status == JobStatus::Completed && !self.verify.as_ref().is_some_and(VerifyOutcome::is_failure)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineReport {
    pub jobs: Vec<JobReport>,
    pub elapsed_seconds: f64,
    pub peak_in_flight: u32,
}

impl EngineReport {
    pub fn all_succeeded(&self) -> bool {
        self.jobs.iter().all(JobReport::succeeded)
    }
}

struct JobSlot {
    job: TransferJob,
    file: Option<File>,
    ranged: bool,
    total: Option<u64>,
    manifest: Option<Mutex<TransferManifest>>,
    outstanding: AtomicUsize,
    fetched: AtomicU64,
    resumed: u64,
    failure: Mutex<Option<String>>,
}

impl JobSlot {
    fn failed(&self) -> bool {
        self.failure.lock().unwrap().is_some()
    }

    fn fail(&self, reason: String) {
        let mut failure = self.failure.lock().unwrap();
        if failure.is_none() {
            warn!("{}: {reason}", self.job.destination.display());
            *failure = Some(reason);
        }
    }

    /// Syncs `[start, end)` to disk, then records it in the manifest.
    fn mark_done(&self, start: u64, end: u64) {
        let (Some(file), Some(manifest)) = (&self.file, &self.manifest) else { return };
        if end <= start {
            return;
        }
        if let Err(e) = file.sync_data() {
            self.fail(format!("sync failed: {e}"));
            return;
        }
        let mut m = manifest.lock().unwrap();
        m.done.push((start, end));
        if let Err(e) = m.save(&manifest_path(&self.job.destination)) {
            warn!("could not update manifest for {}: {e}", self.job.destination.display());
        }
    }
}

struct Shared {
    cfg: EngineConfig,
    jobs: Vec<JobSlot>,
    queue: ChunkQueue,
    statuses: WorkerStatuses,
    telemetry: Arc<Telemetry>,
    fetcher: Arc<dyn Fetcher>,
    unfinished: AtomicUsize,
    in_flight: AtomicU32,
    peak_in_flight: AtomicU32,
}

/// A running transfer. Workers start paused; drive it through
/// [`TransferControl`] and collect results with [`Engine::wait`].
pub struct Engine {
    shared: Arc<Shared>,
    workers: Vec<JoinHandle<()>>,
    started: Instant,
}

impl Engine {
    pub fn start(
        jobs: Vec<TransferJob>,
        cfg: EngineConfig,
        telemetry: Arc<Telemetry>,
        fetcher: Arc<dyn Fetcher>,
    ) -> Result<Self, EngineError> {
        cfg.validate()?;
        if jobs.is_empty() {
            return Err(EngineError::NoJobs);
        }
        let mut slots = Vec::with_capacity(jobs.len());
        let mut tasks = Vec::new();
        for (id, job) in jobs.into_iter().enumerate() {
            let (slot, pending) = prepare_job(id, job, &cfg, fetcher.as_ref());
            tasks.extend(pending.into_iter().map(|range| Task { range, failures: 0, ready_at: None }));
            slots.push(slot);
        }
        let unfinished = slots.iter().filter(|s| s.outstanding.load(Ordering::Relaxed) > 0).count();
        let shared = Arc::new(Shared {
            statuses: WorkerStatuses::new(cfg.max_concurrency),
            cfg,
            jobs: slots,
            queue: ChunkQueue::default(),
            telemetry,
            fetcher,
            unfinished: AtomicUsize::new(unfinished),
            in_flight: AtomicU32::new(0),
            peak_in_flight: AtomicU32::new(0),
        });
        shared.queue.extend(tasks);
        if unfinished == 0 {
            shared.telemetry.finish(shared.telemetry.now());
        }
        let workers = (0..shared.cfg.max_concurrency)
            .map(|id| {
                let shared = Arc::clone(&shared);
                thread::Builder::new()
                    .name(format!("worker-{id}"))
                    .spawn(move || shared.worker(id))
                    .expect("spawn worker thread")
            })
            .collect();
        Ok(Self { shared, workers, started: Instant::now() })
    }

    pub fn statuses(&self) -> &WorkerStatuses {
        &self.shared.statuses
    }

    pub fn telemetry(&self) -> &Arc<Telemetry> {
        &self.shared.telemetry
    }

    /// Highest number of simultaneously in-flight chunk requests so far.
    pub fn peak_in_flight(&self) -> u32 {
        self.shared.peak_in_flight.load(Ordering::Relaxed)
    }

    pub fn pending_chunks(&self) -> usize {
        self.shared.queue.len()
    }

    /// Runs at a fixed concurrency until every job finishes.
    pub fn run_fixed(&mut self, concurrency: u32) {
        self.set_concurrency(concurrency.max(1));
        while !self.is_finished() {
            self.hold(0.25);
        }
        self.set_concurrency(0);
    }

    /// Stops the pool (in-flight chunks finish first), verifies completed
    /// files and removes their manifests.
    pub fn wait(mut self) -> EngineReport {
        self.shared.statuses.set(0);
        self.shared.queue.wake_all();
        for handle in self.workers.drain(..) {
            if handle.join().is_err() {
                warn!("a worker thread panicked");
            }
        }
        let elapsed_seconds = self.started.elapsed().as_secs_f64();
        let jobs = self.shared.jobs.iter().map(finish_job).collect();
        EngineReport { jobs, elapsed_seconds, peak_in_flight: self.peak_in_flight() }
    }
}

impl TransferControl for Engine {
    fn set_concurrency(&mut self, n: u32) {
        let n = n.min(self.shared.cfg.max_concurrency);
        self.shared.statuses.set(n);
        self.shared.telemetry.log_concurrency(self.shared.telemetry.now(), n);
        debug!("concurrency -> {n}");
    }

    fn is_finished(&self) -> bool {
        self.shared.unfinished.load(Ordering::Acquire) == 0 || self.shared.statuses.is_stopped()
    }

    fn hold(&mut self, seconds: f64) -> (f64, f64) {
        let telemetry = &self.shared.telemetry;
        let start = telemetry.now();
        loop {
            let left = seconds - (telemetry.now() - start);
            if left <= 0.0 || self.is_finished() {
                break;
            }
            thread::sleep(Duration::from_secs_f64(left.min(0.02)));
        }
        (start, telemetry.now())
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.shared.statuses.set(0);
        self.shared.queue.wake_all();
        for handle in self.workers.drain(..) {
            let _ = handle.join();
        }
    }
}

fn finish_job(slot: &JobSlot) -> JobReport {
    let failure = slot.failure.lock().unwrap().clone();
    let status = match failure {
        Some(reason) => JobStatus::Failed(reason),
        None if slot.outstanding.load(Ordering::Acquire) == 0 => JobStatus::Completed,
        None => JobStatus::Interrupted,
    };
    let mut verify_outcome = None;
    if status == JobStatus::Completed {
        match verify(&slot.job.destination, slot.job.expected_md5.as_deref()) {
            Ok(outcome) => {
                if let VerifyOutcome::Mismatch { expected, actual } = &outcome {
                    warn!("{}: md5 {actual} does not match {expected}", slot.job.destination.display());
                }
                verify_outcome = Some(outcome);
            }
            Err(e) => warn!("cannot verify {}: {e}", slot.job.destination.display()),
        }
        let path = manifest_path(&slot.job.destination);
        if path.exists() {
            if let Err(e) = fs::remove_file(&path) {
                warn!("cannot remove {}: {e}", path.display());
            }
        }
    }
    JobReport {
        source_url: slot.job.source_url.clone(),
        destination: slot.job.destination.clone(),
        total_bytes: slot.total,
        bytes_fetched: slot.fetched.load(Ordering::Relaxed),
        bytes_resumed: slot.resumed,
        ranged: slot.ranged,
        status,
        verify: verify_outcome,
    }
}

fn failed_slot(job: TransferJob, reason: String) -> JobSlot {
    warn!("{}: {reason}", job.destination.display());
    JobSlot {
        total: job.total_bytes,
        job,
        file: None,
        ranged: false,
        manifest: None,
        outstanding: AtomicUsize::new(0),
        fetched: AtomicU64::new(0),
        resumed: 0,
        failure: Mutex::new(Some(reason)),
    }
}

/// Restores a job from its manifest when resuming, or probes the server and
/// plans it from scratch.
fn prepare_job(id: usize, job: TransferJob, cfg: &EngineConfig, fetcher: &dyn Fetcher) -> (JobSlot, Vec<ChunkRange>) {
    let mpath = manifest_path(&job.destination);
    if cfg.resume && mpath.exists() {
        match TransferManifest::load(&mpath) {
            Ok(m) if m.source_url == job.source_url && job.destination.exists() => {
                match OpenOptions::new().write(true).open(&job.destination).and_then(|f| {
                    f.set_len(m.total_bytes)?;
                    Ok(f)
                }) {
                    Ok(file) => {
                        let pending = m.pending_chunks(id);
                        let left: u64 = pending.iter().filter_map(|c| c.length).sum();
                        info!("resuming {}: {} of {} bytes on disk", job.destination.display(), m.total_bytes - left, m.total_bytes);
                        let slot = JobSlot {
                            total: Some(m.total_bytes),
                            resumed: m.total_bytes - left,
                            outstanding: AtomicUsize::new(pending.len()),
                            job,
                            file: Some(file),
                            ranged: true,
                            manifest: Some(Mutex::new(m)),
                            fetched: AtomicU64::new(0),
                            failure: Mutex::new(None),
                        };
                        return (slot, pending);
                    }
                    Err(e) => warn!("cannot reopen {}: {e}; restarting", job.destination.display()),
                }
            }
            Ok(_) => warn!("{} does not match this job; restarting", mpath.display()),
            Err(e) => warn!("corrupt manifest {}: {e}; restarting", mpath.display()),
        }
    }

    let remote = match probe_with_retry(fetcher, &job.source_url, &cfg.retry) {
        Ok(r) => r,
        Err(e) => return (failed_slot(job, format!("probe failed: {e}")), Vec::new()),
    };
    let total = remote.total_bytes.or(job.total_bytes);
    if let (Some(listed), Some(served)) = (job.total_bytes, remote.total_bytes) {
        if listed != served {
            warn!("{}: listed size {listed} but server reports {served}", job.source_url);
        }
    }
    let ranged = remote.ranges && total.is_some();
    if !remote.ranges {
        info!("{} does not support ranges; using a single stream", job.source_url);
    }
    // A file finished by the interrupted run has no manifest left; keep it
    // if it is whole and its checksum proves it.
    if cfg.resume && !mpath.exists() {
        if let (Some(total), Some(expected)) = (total, job.expected_md5.as_deref()) {
            let whole = fs::metadata(&job.destination).is_ok_and(|m| m.is_file() && m.len() == total);
            if whole && md5_file(&job.destination).is_ok_and(|md5| md5.eq_ignore_ascii_case(expected)) {
                info!("{} is already complete", job.destination.display());
                let slot = JobSlot {
                    total: Some(total),
                    resumed: total,
                    outstanding: AtomicUsize::new(0),
                    job,
                    file: None,
                    ranged,
                    manifest: None,
                    fetched: AtomicU64::new(0),
                    failure: Mutex::new(None),
                };
                return (slot, Vec::new());
            }
        }
    }

    if let Some(parent) = job.destination.parent().filter(|p| !p.as_os_str().is_empty()) {
        if let Err(e) = fs::create_dir_all(parent) {
            let reason = format!("cannot create {}: {e}", parent.display());
            return (failed_slot(job, reason), Vec::new());
        }
    }
    let file = OpenOptions::new().create(true).write(true).truncate(true).open(&job.destination).and_then(|f| {
        if ranged {
            f.set_len(total.unwrap_or(0))?;
        }
        Ok(f)
    });
    let file = match file {
        Ok(f) => f,
        Err(e) => return (failed_slot(job, format!("cannot open destination: {e}")), Vec::new()),
    };

    let pending = if ranged { plan_chunks(id, total, cfg.chunk_bytes) } else { plan_chunks(id, None, cfg.chunk_bytes) };
    let manifest = ranged.then(|| {
        let m = TransferManifest::new(&job.source_url, total.unwrap_or(0), cfg.chunk_bytes, job.expected_md5.as_deref());
        if let Err(e) = m.save(&mpath) {
            warn!("cannot write {}: {e}", mpath.display());
        }
        Mutex::new(m)
    });
    if !ranged && mpath.exists() {
        let _ = fs::remove_file(&mpath);
    }
    let slot = JobSlot {
        job,
        file: Some(file),
        ranged,
        total,
        manifest,
        outstanding: AtomicUsize::new(pending.len()),
        fetched: AtomicU64::new(0),
        resumed: 0,
        failure: Mutex::new(None),
    };
    (slot, pending)
}

fn probe_with_retry(fetcher: &dyn Fetcher, url: &str, retry: &RetryPolicy) -> Result<RemoteInfo, FetchError> {
    let mut failures = 0;
    loop {
        match fetcher.probe(url) {
            Ok(info) => return Ok(info),
            Err(e) => {
                failures += 1;
                if e.is_permanent() || failures >= retry.max_attempts {
                    return Err(e);
                }
                debug!("probe of {url} failed ({e}); retrying");
                thread::sleep(retry.delay(failures));
            }
        }
    }
}

impl Shared {
    fn worker(&self, id: u32) {
        let mut conn: Option<Box<dyn Connection>> = None;
        loop {
            if self.statuses.wait_runnable(id, Duration::from_millis(100)) == WorkerStatus::Stopped {
                break;
            }
            if self.unfinished.load(Ordering::Acquire) == 0 {
                break;
            }
            let Some(task) = self.queue.pop(Duration::from_millis(50)) else { continue };
            if self.statuses.status(id) != WorkerStatus::Active {
                // Paused or stopped while waiting for work.
                self.queue.push_front(task);
                continue;
            }
            self.run_task(id, &mut conn, task);
        }
    }

    fn run_task(&self, id: u32, conn: &mut Option<Box<dyn Connection>>, task: Task) {
        let slot = &self.jobs[task.range.job_id];
        let Some(file) = slot.file.as_ref().filter(|_| !slot.failed()) else {
            self.task_done(slot);
            return;
        };
        let start = task.range.offset;
        let range = task.range.end().filter(|_| slot.ranged).map(|end| (start, end));
        let expected_end = range.map(|(_, e)| e).or(slot.total);

        let now = self.in_flight.fetch_add(1, Ordering::AcqRel) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::AcqRel);
        let mut pos = start;
        let result = conn.get_or_insert_with(|| self.fetcher.connect()).fetch(
            &slot.job.source_url,
            range,
            &mut |buf: &[u8]| {
                file.write_all_at(buf, pos)?;
                pos += buf.len() as u64;
                self.telemetry.record_bytes(id, buf.len() as u64);
                Ok(())
            },
        );
        self.in_flight.fetch_sub(1, Ordering::AcqRel);
        slot.fetched.fetch_add(pos - start, Ordering::Relaxed);

        let error = match result {
            Ok(_) if expected_end.is_none_or(|e| pos >= e) => {
                if slot.ranged {
                    slot.mark_done(start, pos);
                } else if let Err(e) = file.set_len(pos).and_then(|_| file.sync_data()) {
                    slot.fail(format!("cannot finalize file: {e}"));
                }
                self.task_done(slot);
                return;
            }
            Ok(_) => FetchError::Transport(format!("connection closed after {} of {} bytes", pos - start, expected_end.unwrap_or(0) - start)),
            Err(e) => e,
        };
        // Drop a connection that failed mid-request rather than reuse it.
        *conn = None;

        let progressed = slot.ranged && pos > start;
        if progressed {
            slot.mark_done(start, pos);
        }
        let failures = if progressed { task.failures } else { task.failures + 1 };
        if error.is_permanent() || failures >= self.cfg.retry.max_attempts {
            slot.fail(format!("chunk at offset {start} failed after {failures} attempt(s): {error}"));
            self.task_done(slot);
            return;
        }
        debug!("worker {id}: chunk at {start} of {}: {error}; will retry", slot.job.source_url);
        let mut range = task.range;
        if slot.ranged {
            range.offset = pos;
            range.length = task.range.end().map(|e| e - pos);
        }
        let ready_at = (failures > task.failures).then(|| Instant::now() + self.cfg.retry.delay(failures));
        self.queue.push(Task { range, failures, ready_at });
    }

    fn task_done(&self, slot: &JobSlot) {
        if slot.outstanding.fetch_sub(1, Ordering::AcqRel) == 1 {
            if !slot.failed() {
                info!("finished {}", slot.job.destination.display());
            }
            if self.unfinished.fetch_sub(1, Ordering::AcqRel) == 1 {
                self.telemetry.finish(self.telemetry.now());
                self.queue.wake_all();
                self.statuses.poke();
            }
        }
    }
}
