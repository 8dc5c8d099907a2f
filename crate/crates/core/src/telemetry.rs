//! Throughput telemetry.
//!
//! Every stream reports byte deltas as it reads; the log is append-only and
//! aggregated on demand into probing-window means or fixed-width buckets for
//! reports. Throughput is in decimal megabits per second (1 Mbps =
//! 125,000 bytes/s) and timestamps are seconds on a monotonic clock that
//! starts with the transfer.

use std::io::{self, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TelemetryError {
    #[error("window end {end} must be after start {start}")]
    EmptyWindow { start: f64, end: f64 },
    #[error("bucket width must be > 0, got {0}")]
    InvalidBucket(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputSample {
    pub timestamp: f64,
    pub bytes: u64,
    pub stream_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowAggregate {
    pub start: f64,
    pub end: f64,
    pub bytes: u64,
    pub mean_mbps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub t_seconds: f64,
    pub mbps: f64,
    pub concurrency: u32,
}

/// Converts a byte count over `seconds` into decimal megabits per second.
pub fn mbps(bytes: u64, seconds: f64) -> f64 {
    bytes as f64 * 8.0 / 1e6 / seconds
}

#[derive(Debug)]
pub struct Telemetry {
    origin: Instant,
    samples: Mutex<Vec<ThroughputSample>>,
    statuses: Mutex<Vec<(f64, u32)>>,
    finished_at: Mutex<Option<f64>>,
    closed: AtomicBool,
}

impl Default for Telemetry {
    fn default() -> Self {
        Self::new()
    }
}

impl Telemetry {
    /// Starts the transfer clock.
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
            samples: Mutex::new(Vec::new()),
            statuses: Mutex::new(Vec::new()),
            finished_at: Mutex::new(None),
            closed: AtomicBool::new(false),
        }
    }

    /// Seconds since the transfer clock started.
    pub fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }

    /// Appends a sample. Samples arriving after [`Telemetry::close`] are dropped.
    pub fn record(&self, sample: ThroughputSample) {
        if self.closed.load(Ordering::Acquire) {
            return;
        }
        self.samples.lock().unwrap().push(sample);
    }

    /// Records `bytes` read by `stream_id` just now.
    pub fn record_bytes(&self, stream_id: u32, bytes: u64) {
        self.record(ThroughputSample { timestamp: self.now(), bytes, stream_id });
    }

    /// Notes a concurrency change at time `t`.
    pub fn log_concurrency(&self, t: f64, concurrency: u32) {
        self.statuses.lock().unwrap().push((t, concurrency));
    }

    /// Marks the transfer end; later samples are dropped.
    pub fn finish(&self, t: f64) {
        *self.finished_at.lock().unwrap() = Some(t);
        self.close();
    }

    pub fn close(&self) {
        self.closed.store(true, Ordering::Release);
    }

    pub fn finished_at(&self) -> Option<f64> {
        *self.finished_at.lock().unwrap()
    }

    pub fn len(&self) -> usize {
        self.samples.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_bytes(&self) -> u64 {
        self.samples.lock().unwrap().iter().map(|s| s.bytes).sum()
    }

    pub fn snapshot(&self) -> Vec<ThroughputSample> {
        self.samples.lock().unwrap().clone()
    }

    pub fn status_log(&self) -> Vec<(f64, u32)> {
        self.statuses.lock().unwrap().clone()
    }

    /// Mean throughput over exactly `[start, end)`.
    pub fn aggregate(&self, start: f64, end: f64) -> Result<WindowAggregate, TelemetryError> {
        if !(end > start) {
            return Err(TelemetryError::EmptyWindow { start, end });
        }
        let bytes = self
            .samples
            .lock()
            .unwrap()
            .iter()
            .filter(|s| s.timestamp >= start && s.timestamp < end)
            .map(|s| s.bytes)
            .sum();
        Ok(WindowAggregate { start, end, bytes, mean_mbps: mbps(bytes, end - start) })
    }

    /// Contiguous `bucket`-wide rows from zero through the transfer end. Each
    /// row's concurrency is the setting in force at the bucket start.
    pub fn series(&self, bucket: f64) -> Result<Vec<SeriesRow>, TelemetryError> {
        if !(bucket > 0.0 && bucket.is_finite()) {
            return Err(TelemetryError::InvalidBucket(bucket));
        }
        let samples = self.snapshot();
        let statuses = self.status_log();
        let last_sample = samples.iter().map(|s| s.timestamp).fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.max(t))));
        let Some(last_sample) = last_sample else {
            return Ok(Vec::new());
        };
        let mut count = (last_sample / bucket).floor() as usize + 1;
        if let Some(end) = self.finished_at() {
            count = count.max((end / bucket).ceil() as usize);
        }

        let mut bytes = vec![0u64; count];
        for s in &samples {
            if s.timestamp < 0.0 {
                continue;
            }
            let i = ((s.timestamp / bucket).floor() as usize).min(count - 1);
            bytes[i] += s.bytes;
        }

        Ok(bytes
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let t = i as f64 * bucket;
                SeriesRow { t_seconds: t, mbps: mbps(b, bucket), concurrency: concurrency_at(&statuses, t) }
            })
            .collect())
    }

    /// Time-weighted mean of the concurrency setting over `[0, end)`.
    pub fn mean_concurrency(&self, end: f64) -> f64 {
        let statuses = self.status_log();
        if end <= 0.0 || statuses.is_empty() {
            return 0.0;
        }
        let mut area = 0.0;
        for (i, &(t, c)) in statuses.iter().enumerate() {
            let from = t.max(0.0).min(end);
            let to = statuses.get(i + 1).map_or(end, |&(next, _)| next).min(end);
            if to > from {
                area += f64::from(c) * (to - from);
            }
        }
        area / end
    }
}

fn concurrency_at(statuses: &[(f64, u32)], t: f64) -> u32 {
    statuses.iter().take_while(|&&(at, _)| at <= t).last().map_or(0, |&(_, c)| c)
}

/// Writes rows as `t_seconds,mbps,concurrency` CSV with a header and LF endings.
pub fn write_csv<W: Write>(rows: &[SeriesRow], mut out: W) -> io::Result<()> {
    out.write_all(b"t_seconds,mbps,concurrency\n")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.t_seconds, r.mbps, r.concurrency)?;
    }
    out.flush()
}

/// Parses the CSV written by [`write_csv`].
pub fn read_csv(text: &str) -> Result<Vec<SeriesRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some("t_seconds,mbps,concurrency") => {}
        other => return Err(format!("unexpected header {other:?}")),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            let [t, m, c] = fields.as_slice() else {
                return Err(format!("line {}: expected 3 fields", i + 2));
            };
            let bad = |e: &dyn std::fmt::Display| format!("line {}: {e}", i + 2);
            Ok(SeriesRow {
                t_seconds: t.parse().map_err(|e| bad(&e))?,
                mbps: m.parse().map_err(|e| bad(&e))?,
                concurrency: c.parse().map_err(|e| bad(&e))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn at(t: f64, bytes: u64) -> ThroughputSample {
        ThroughputSample { timestamp: t, bytes, stream_id: 0 }
    }

    #[test]
    fn zero_byte_sample_extends_log_only() {
        let tm = Telemetry::new();
        tm.record(at(0.5, 1000));
        let before = tm.aggregate(0.0, 1.0).unwrap();
        tm.record(at(0.6, 0));
        assert_eq!(tm.len(), 2);
        assert_eq!(tm.aggregate(0.0, 1.0).unwrap(), before);
    }

    #[test]
    fn two_half_megabyte_samples_over_two_seconds() {
        let tm = Telemetry::new();
        tm.record(at(0.5, 500_000));
        tm.record(at(1.5, 500_000));
        assert_eq!(tm.aggregate(0.0, 2.0).unwrap().mean_mbps, 4.0);
    }

    #[test]
    fn decimal_megabits() {
        let tm = Telemetry::new();
        tm.record(at(3.0, 1_250_000_000));
        assert_eq!(tm.aggregate(0.0, 10.0).unwrap().mean_mbps, 1000.0);
    }

    #[test]
    fn empty_and_excluded_windows() {
        let tm = Telemetry::new();
        assert_eq!(tm.aggregate(0.0, 3.0).unwrap().mean_mbps, 0.0);
        tm.record(at(0.5, 10));
        assert_eq!(tm.aggregate(1.0, 3.0).unwrap().mean_mbps, 0.0);
        assert!(tm.aggregate(2.0, 2.0).is_err());
    }

    #[test]
    fn uniform_samples_give_one_mbps() {
        let tm = Telemetry::new();
        for t in 0..3 {
            tm.record(at(f64::from(t), 125_000));
        }
        assert_eq!(tm.aggregate(0.0, 3.0).unwrap().mean_mbps, 1.0);
    }

    #[test]
    fn window_is_half_open() {
        let tm = Telemetry::new();
        tm.record(at(1.0, 7));
        assert_eq!(tm.aggregate(0.0, 1.0).unwrap().bytes, 0);
        assert_eq!(tm.aggregate(1.0, 2.0).unwrap().bytes, 7);
    }

    #[test]
    fn closed_log_drops_samples() {
        let tm = Telemetry::new();
        tm.record(at(0.1, 1));
        tm.finish(0.2);
        tm.record(at(0.3, 1));
        assert_eq!(tm.len(), 1);
    }

    #[test]
    fn series_shapes() {
        let tm = Telemetry::new();
        assert!(tm.series(1.0).unwrap().is_empty());
        tm.log_concurrency(0.0, 4);
        tm.record(at(0.2, 1_000_000));
        tm.record(at(0.9, 250_000));
        let rows = tm.series(1.0).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].mbps, mbps(1_250_000, 1.0));
        assert_eq!(rows[0].concurrency, 4);
        assert!(tm.series(0.0).is_err());
    }

    #[test]
    fn series_annotates_concurrency_changes() {
        let tm = Telemetry::new();
        tm.log_concurrency(0.0, 1);
        tm.log_concurrency(2.0, 3);
        tm.record(at(3.5, 10));
        let rows = tm.series(1.0).unwrap();
        let cs: Vec<u32> = rows.iter().map(|r| r.concurrency).collect();
        assert_eq!(cs, vec![1, 1, 3, 3]);
        assert!((tm.mean_concurrency(4.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn concurrent_producers_lose_nothing() {
        let tm = std::sync::Arc::new(Telemetry::new());
        let streams = 64;
        let per_stream = 500;
        std::thread::scope(|scope| {
            for id in 0..streams {
                let tm = &tm;
                scope.spawn(move || {
                    for _ in 0..per_stream {
                        tm.record_bytes(id, 3);
                    }
                });
            }
        });
        assert_eq!(tm.len(), (streams * per_stream) as usize);
        assert_eq!(tm.total_bytes(), u64::from(streams * per_stream * 3));
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            SeriesRow { t_seconds: 0.0, mbps: 12.5, concurrency: 1 },
            SeriesRow { t_seconds: 1.0, mbps: 0.1 + 0.2, concurrency: 3 },
        ];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t_seconds,mbps,concurrency\n"));
        assert!(!text.contains('\r'));
        assert_eq!(read_csv(&text).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn partition_conserves_bytes(
            samples in prop::collection::vec((0.0f64..100.0, 0u64..1_000_000), 0..200),
            cuts in prop::collection::vec(0.0f64..100.0, 0..10),
        ) {
            let tm = Telemetry::new();
            for &(t, b) in &samples {
                tm.record(at(t, b));
            }
            let mut edges = vec![0.0, 100.0];
            edges.extend(cuts);
            edges.sort_by(f64::total_cmp);
            edges.dedup();
            let total: u64 = edges
                .windows(2)
                .map(|w| tm.aggregate(w[0], w[1]).unwrap().bytes)
                .sum();
            prop_assert_eq!(total, tm.total_bytes());
        }

        #[test]
        fn aggregate_is_additive(
            samples in prop::collection::vec((0.0f64..30.0, 0u64..1_000_000), 0..100),
            a in 0.0f64..10.0, db in 0.1f64..10.0, dc in 0.1f64..10.0,
        ) {
            let tm = Telemetry::new();
            for &(t, b) in &samples {
                tm.record(at(t, b));
            }
            let (b, c) = (a + db, a + db + dc);
            let whole = tm.aggregate(a, c).unwrap();
            let left = tm.aggregate(a, b).unwrap();
            let right = tm.aggregate(b, c).unwrap();
            let combined = (left.mean_mbps * (b - a) + right.mean_mbps * (c - b)) / (c - a);
            prop_assert!((whole.mean_mbps - combined).abs() <= 1e-9 * whole.mean_mbps.max(1.0));
        }

        #[test]
        fn series_reconstructs_total(
            samples in prop::collection::vec((0.0f64..50.0, 0u64..1_000_000), 1..100),
            bucket in 0.05f64..5.0,
        ) {
            let tm = Telemetry::new();
            for &(t, b) in &samples {
                tm.record(at(t, b));
            }
            let rows = tm.series(bucket).unwrap();
            let reconstructed: f64 = rows.iter().map(|r| r.mbps * bucket * 1e6 / 8.0).sum();
            let total = tm.total_bytes() as f64;
            prop_assert!((reconstructed - total).abs() <= 1e-6 * total.max(1.0));
        }
    }
}
