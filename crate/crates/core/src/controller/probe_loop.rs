use serde::{Deserialize, Serialize};

use super::{ConcurrencyLevel, ControllerConfig, Optimizer, ProbeResult};
use crate::telemetry::Telemetry;

/// What the optimizer needs from a running transfer.
pub trait TransferControl {
    /// Sets the number of active streams; `0` stops every worker.
    fn set_concurrency(&mut self, n: u32);

    /// True once the transfer is complete or has been shut down.
    fn is_finished(&self) -> bool;

    /// Holds the current setting for up to `seconds` and returns the window
    /// `[start, end)` on the telemetry clock. Returns early when the transfer
    /// finishes.
    fn hold(&mut self, seconds: f64) -> (f64, f64);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub start: f64,
    pub end: f64,
    pub concurrency: u32,
    pub mean_mbps: f64,
    pub utility: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub probes: Vec<ProbeRecord>,
}

impl LoopReport {
    /// Concurrency held during the last complete probe, if any.
    pub fn final_concurrency(&self) -> Option<u32> {
        self.probes.last().map(|p| p.concurrency)
    }
}

/// Set statuses, hold for one probing window, measure the window from the
/// telemetry log, score it, propose the next level; repeat until the transfer
/// finishes, then set every status to zero.
pub fn optimizer_loop<C>(control: &mut C, telemetry: &Telemetry, cfg: &ControllerConfig) -> LoopReport
where
    C: TransferControl + ?Sized,
{
    let mut optimizer = Optimizer::from_config(cfg);
    let mut report = LoopReport::default();
    let mut level = optimizer.current();

    while !control.is_finished() {
        control.set_concurrency(level.get());
        let (start, end) = control.hold(cfg.probe_seconds);
        if end <= start {
            continue;
        }
        let window = telemetry.aggregate(start, end).expect("window end is after start");
        let probe = ProbeResult { mean_mbps: window.mean_mbps, window_seconds: end - start, concurrency: level };
        let utility = if window.mean_mbps > 0.0 { cfg.k.score(window.mean_mbps, level.get()) } else { 0.0 };
        report.probes.push(ProbeRecord { start, end, concurrency: level.get(), mean_mbps: window.mean_mbps, utility });
        log::debug!("probe c={} mbps={:.1} utility={:.1}", level, window.mean_mbps, utility);

        let next = optimizer.propose(&probe, cfg.k, cfg.max_concurrency);
        level = ConcurrencyLevel::clamped(i64::from(next.get()), cfg.max_concurrency);
    }
    control.set_concurrency(0);
    report
}
