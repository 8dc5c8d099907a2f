//! Deterministic discrete-time transfer simulator.
//!
//! A scenario models aggregate throughput as a function of stream count,
//! either `min(alpha * c, B)` or the saturating `B * (1 - exp(-alpha * c / B))`,
//! optionally scaled by clamped multiplicative Gaussian noise on every tick.
//! [`run_adaptive`] drives the production [`optimizer_loop`] against that model
//! in virtual time; [`run_fixed`] holds one level for the whole payload.

use std::fmt;
use std::io;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{
    optimizer_loop, ConcurrencyLevel, ControllerConfig, Method, PenaltyCoefficient, ProbeRecord, TransferControl,
};
use crate::telemetry::{self, SeriesRow, Telemetry, ThroughputSample};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("unknown scenario key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for scenario key `{key}`")]
    InvalidValue { key: String, value: String },
    #[error("missing scenario key `{0}`")]
    MissingKey(&'static str),
    #[error("line {0}: expected `key = value`")]
    Syntax(usize),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("comparison: {0}")]
    Compare(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Noise {
    None,
    Gaussian { sigma: f64 },
}

impl fmt::Display for Noise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Noise::None => f.write_str("none"),
            Noise::Gaussian { sigma } => write!(f, "gaussian({sigma})"),
        }
    }
}

impl FromStr for Noise {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        let s = s.trim();
        if s == "none" {
            return Ok(Noise::None);
        }
        let sigma = s.strip_prefix("gaussian(").and_then(|r| r.strip_suffix(')')).ok_or(())?;
        let sigma: f64 = sigma.trim().parse().map_err(|_| ())?;
        Ok(if sigma == 0.0 { Noise::None } else { Noise::Gaussian { sigma } })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThroughputModel {
    /// `min(alpha * c, B)`.
    Capped,
    /// `B * (1 - exp(-alpha * c / B))`: each extra stream adds less.
    Saturating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub total_bandwidth_mbps: f64,
    pub per_stream_mbps: f64,
    pub file_size_gb: f64,
    pub probe_seconds: f64,
    pub noise: Noise,
    pub rng_seed: u64,
    pub tick_seconds: f64,
    pub model: ThroughputModel,
}

impl SimScenario {
    /// Capped-linear scenario with default probe window, tick and no noise.
    pub fn capped(total_bandwidth_mbps: f64, per_stream_mbps: f64, file_size_gb: f64) -> Self {
        Self {
            total_bandwidth_mbps,
            per_stream_mbps,
            file_size_gb,
            probe_seconds: crate::controller::DEFAULT_PROBE_SECONDS,
            noise: Noise::None,
            rng_seed: 0,
            tick_seconds: 0.1,
            model: ThroughputModel::Capped,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Invalid(m.to_string()));
        if !(self.total_bandwidth_mbps > 0.0) {
            return bad("total_bandwidth_mbps must be > 0");
        }
        if !(self.per_stream_mbps > 0.0 && self.per_stream_mbps.is_finite()) {
            return bad("per_stream_mbps must be > 0");
        }
        if !(self.file_size_gb > 0.0 && self.file_size_gb.is_finite()) {
            return bad("file_size_gb must be > 0");
        }
        if !(self.probe_seconds > 0.0 && self.probe_seconds.is_finite()) {
            return bad("probe_seconds must be > 0");
        }
        if !(self.tick_seconds > 0.0 && self.tick_seconds.is_finite()) {
            return bad("tick_seconds must be > 0");
        }
        if let Noise::Gaussian { sigma } = self.noise {
            if !(0.0..0.5).contains(&sigma) {
                return bad("noise sigma must be in [0, 0.5)");
            }
        }
        Ok(())
    }

    /// Payload in bytes (decimal gigabytes).
    pub fn payload_bytes(&self) -> u64 {
        (self.file_size_gb * 1e9).round() as u64
    }

    /// Noiseless aggregate throughput at `c` streams.
    pub fn expected_mbps(&self, c: u32) -> f64 {
        let offered = self.per_stream_mbps * f64::from(c);
        let cap = self.total_bandwidth_mbps;
        match self.model {
            ThroughputModel::Capped => offered.min(cap),
            ThroughputModel::Saturating if cap.is_infinite() => offered,
            ThroughputModel::Saturating => cap * -(-offered / cap).exp_m1(),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut bandwidth = None;
        let mut per_stream = None;
        let mut size = None;
        let mut s = Self::capped(1.0, 1.0, 1.0);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(SimError::Syntax(i + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let invalid = || SimError::InvalidValue { key: key.to_string(), value: value.to_string() };
            let real = || value.parse::<f64>().map_err(|_| invalid());
            match key {
                "total_bandwidth_mbps" => bandwidth = Some(real()?),
                "per_stream_mbps" => per_stream = Some(real()?),
                "file_size_gb" => size = Some(real()?),
                "probe_seconds" => s.probe_seconds = real()?,
                "tick_seconds" => s.tick_seconds = real()?,
                "rng_seed" => s.rng_seed = value.parse().map_err(|_| invalid())?,
                "noise" => s.noise = value.parse().map_err(|_| invalid())?,
                "model" => {
                    s.model = match value {
                        "capped" => ThroughputModel::Capped,
                        "saturating" => ThroughputModel::Saturating,
                        _ => return Err(invalid()),
                    }
                }
                other => return Err(SimError::UnknownKey(other.to_string())),
            }
        }
        s.total_bandwidth_mbps = bandwidth.ok_or(SimError::MissingKey("total_bandwidth_mbps"))?;
        s.per_stream_mbps = per_stream.ok_or(SimError::MissingKey("per_stream_mbps"))?;
        s.file_size_gb = size.ok_or(SimError::MissingKey("file_size_gb"))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let model = match self.model {
            ThroughputModel::Capped => "capped",
            ThroughputModel::Saturating => "saturating",
        };
        format!(
            "total_bandwidth_mbps = {}\nper_stream_mbps = {}\nfile_size_gb = {}\nprobe_seconds = {}\nnoise = {}\nrng_seed = {}\ntick_seconds = {}\nmodel = {}\n",
            self.total_bandwidth_mbps,
            self.per_stream_mbps,
            self.file_size_gb,
            self.probe_seconds,
            self.noise,
            self.rng_seed,
            self.tick_seconds,
            model
        )
    }
}

/// Throughput at `c` streams for one tick, with noise drawn from `rng`.
pub fn model_throughput<R: Rng + ?Sized>(c: u32, s: &SimScenario, rng: &mut R) -> f64 {
    if c == 0 {
        return 0.0;
    }
    let base = s.expected_mbps(c);
    match s.noise {
        Noise::None => base,
        Noise::Gaussian { sigma } => {
            let z: f64 = rng.sample(StandardNormal);
            base * (1.0 + sigma * z).clamp(1.0 - 3.0 * sigma, 1.0 + 3.0 * sigma)
        }
    }
}

/// Exhaustive argmax of the noiseless utility over `[1, c_max]`, ties to the
/// lower level.
pub fn brute_force_optimum(s: &SimScenario, k: PenaltyCoefficient, c_max: u32) -> ConcurrencyLevel {
    let mut best = 1;
    let mut best_u = k.score(s.expected_mbps(1), 1);
    for c in 2..=c_max {
        let u = k.score(s.expected_mbps(c), c);
        if u > best_u {
            best = c;
            best_u = u;
        }
    }
    ConcurrencyLevel::clamped(i64::from(best), c_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t: f64,
    pub concurrency: u32,
    pub mbps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub series: Vec<TracePoint>,
    pub completion_seconds: f64,
    pub mean_concurrency: f64,
    pub mean_mbps: f64,
    pub total_bytes: u64,
    pub tick_seconds: f64,
    pub probes: Vec<ProbeRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub completion_seconds: f64,
    pub mean_mbps: f64,
    pub mean_concurrency: f64,
}

impl SimTrace {
    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            completion_seconds: self.completion_seconds,
            mean_mbps: self.mean_mbps,
            mean_concurrency: self.mean_concurrency,
        }
    }

    /// Concurrency during the last tick.
    pub fn final_concurrency(&self) -> u32 {
        self.series.last().map_or(0, |p| p.concurrency)
    }

    /// Time-weighted mean concurrency over `[from, completion)`.
    pub fn mean_concurrency_since(&self, from: f64) -> f64 {
        let mut area = 0.0;
        for p in &self.series {
            let lo = p.t.max(from);
            let hi = (p.t + self.tick_seconds).min(self.completion_seconds);
            if hi > lo {
                area += f64::from(p.concurrency) * (hi - lo);
            }
        }
        let span = self.completion_seconds - from;
        if span > 0.0 {
            area / span
        } else {
            0.0
        }
    }

    /// Index of the first probe window held within `tolerance` of `target`.
    pub fn first_probe_near(&self, target: u32, tolerance: u32) -> Option<usize> {
        self.probes.iter().position(|p| p.concurrency.abs_diff(target) <= tolerance)
    }

    /// Integral of the per-tick throughput over the run, in megabits.
    pub fn delivered_megabits(&self) -> f64 {
        self.series.iter().map(|p| p.mbps * self.tick_seconds).sum()
    }

    pub fn rows(&self) -> Vec<SeriesRow> {
        self.series.iter().map(|p| SeriesRow { t_seconds: p.t, mbps: p.mbps, concurrency: p.concurrency }).collect()
    }

    pub fn write_csv<W: io::Write>(&self, out: W) -> io::Result<()> {
        telemetry::write_csv(&self.rows(), out)
    }
}

/// The simulated transfer the controller acts on.
struct Plant<'a> {
    scenario: &'a SimScenario,
    telemetry: Arc<Telemetry>,
    rng: ChaCha8Rng,
    payload: u64,
    delivered: u64,
    carry: f64,
    ticks: u64,
    concurrency: u32,
    series: Vec<TracePoint>,
    completion: Option<f64>,
}

impl<'a> Plant<'a> {
    fn new(scenario: &'a SimScenario, telemetry: Arc<Telemetry>) -> Self {
        Self {
            scenario,
            telemetry,
            rng: ChaCha8Rng::seed_from_u64(scenario.rng_seed),
            payload: scenario.payload_bytes(),
            delivered: 0,
            carry: 0.0,
            ticks: 0,
            concurrency: 0,
            series: Vec::new(),
            completion: None,
        }
    }

    fn time(&self) -> f64 {
        self.ticks as f64 * self.scenario.tick_seconds
    }

    fn step(&mut self) {
        let tick = self.scenario.tick_seconds;
        let t0 = self.time();
        let rate = model_throughput(self.concurrency, self.scenario, &mut self.rng);
        let exact = rate * 1e6 / 8.0 * tick + self.carry;
        let mut bytes = exact.floor() as u64;
        self.carry = exact - bytes as f64;
        let remaining = self.payload - self.delivered;
        if bytes >= remaining {
            let fraction = if exact > 0.0 { remaining as f64 / exact } else { 1.0 };
            bytes = remaining;
            self.completion = Some(t0 + tick * fraction.min(1.0));
        }
        self.delivered += bytes;
        self.telemetry.record(ThroughputSample { timestamp: t0 + tick / 2.0, bytes, stream_id: 0 });
        self.series.push(TracePoint { t: t0, concurrency: self.concurrency, mbps: telemetry::mbps(bytes, tick) });
        self.ticks += 1;
    }

    fn into_trace(self, probes: Vec<ProbeRecord>) -> SimTrace {
        let tick = self.scenario.tick_seconds;
        let completion = self.completion.unwrap_or_else(|| self.time());
        let area: f64 = self
            .series
            .iter()
            .map(|p| f64::from(p.concurrency) * ((p.t + tick).min(completion) - p.t).max(0.0))
            .sum();
        self.telemetry.finish(completion);
        SimTrace {
            completion_seconds: completion,
            mean_concurrency: if completion > 0.0 { area / completion } else { 0.0 },
            mean_mbps: if completion > 0.0 { telemetry::mbps(self.delivered, completion) } else { 0.0 },
            total_bytes: self.delivered,
            tick_seconds: tick,
            series: self.series,
            probes,
        }
    }
}

impl TransferControl for Plant<'_> {
    fn set_concurrency(&mut self, n: u32) {
        if n != self.concurrency && self.completion.is_none() {
            self.telemetry.log_concurrency(self.time(), n);
        }
        self.concurrency = n;
    }

    fn is_finished(&self) -> bool {
        self.completion.is_some()
    }

    fn hold(&mut self, seconds: f64) -> (f64, f64) {
        let start = self.time();
        let ticks = (seconds / self.scenario.tick_seconds).round().max(1.0) as u64;
        for _ in 0..ticks {
            if self.completion.is_some() {
                break;
            }
            self.step();
        }
        (start, self.time())
    }
}

/// Runs the controller against the scenario and also returns the telemetry
/// log the controller measured from.
pub fn run_adaptive_recorded(s: &SimScenario, cfg: &ControllerConfig) -> (SimTrace, Arc<Telemetry>) {
    let telemetry = Arc::new(Telemetry::new());
    let mut plant = Plant::new(s, Arc::clone(&telemetry));
    let cfg = ControllerConfig { probe_seconds: s.probe_seconds, ..cfg.clone() };
    let report = optimizer_loop(&mut plant, &telemetry, &cfg);
    (plant.into_trace(report.probes), telemetry)
}

pub fn run_adaptive(s: &SimScenario, cfg: &ControllerConfig) -> SimTrace {
    run_adaptive_recorded(s, cfg).0
}

pub fn run_fixed_recorded(s: &SimScenario, c: u32) -> (SimTrace, Arc<Telemetry>) {
    let telemetry = Arc::new(Telemetry::new());
    let mut plant = Plant::new(s, Arc::clone(&telemetry));
    plant.set_concurrency(c.max(1));
    while !plant.is_finished() {
        plant.hold(s.probe_seconds);
    }
    (plant.into_trace(Vec::new()), telemetry)
}

pub fn run_fixed(s: &SimScenario, c: u32) -> SimTrace {
    run_fixed_recorded(s, c).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub name: String,
    pub completion_seconds: f64,
    pub mean_mbps: f64,
    pub mean_concurrency: f64,
    pub speedup_vs_baseline: f64,
}

/// One row per trace; speedup is `baseline completion / trace completion`.
pub fn compare(traces: &[(String, SimTrace)], baseline: &str) -> Result<Vec<CompareRow>, SimError> {
    if traces.len() < 2 {
        return Err(SimError::Compare("need at least two traces".into()));
    }
    let base = traces
        .iter()
        .find(|(name, _)| name == baseline)
        .ok_or_else(|| SimError::Compare(format!("no trace named `{baseline}`")))?;
    let base_completion = base.1.completion_seconds;
    Ok(traces
        .iter()
        .map(|(name, t)| CompareRow {
            name: name.clone(),
            completion_seconds: t.completion_seconds,
            mean_mbps: t.mean_mbps,
            mean_concurrency: t.mean_concurrency,
            speedup_vs_baseline: base_completion / t.completion_seconds,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub k: f64,
    pub optimizer: Method,
    pub runs: usize,
    pub mean_mbps: f64,
    pub mean_concurrency: f64,
    pub mean_completion_seconds: f64,
}

/// Adaptive runs for every `(k, optimizer)` cell, averaged over `seeds`. Each
/// seed drives both the scenario noise and the optimizer's generator.
pub fn sweep(
    s: &SimScenario,
    base: &ControllerConfig,
    ks: &[PenaltyCoefficient],
    methods: &[Method],
    seeds: &[u64],
) -> Vec<BenchRow> {
    let mut rows = Vec::new();
    for &k in ks {
        for &method in methods {
            let traces: Vec<SimTrace> = seeds
                .iter()
                .map(|&seed| {
                    let scenario = SimScenario { rng_seed: seed, ..s.clone() };
                    let cfg = ControllerConfig { k, method, rng_seed: seed, ..base.clone() };
                    run_adaptive(&scenario, &cfg)
                })
                .collect();
            let n = traces.len().max(1) as f64;
            rows.push(BenchRow {
                k: k.value(),
                optimizer: method,
                runs: traces.len(),
                mean_mbps: traces.iter().map(|t| t.mean_mbps).sum::<f64>() / n,
                mean_concurrency: traces.iter().map(|t| t.mean_concurrency).sum::<f64>() / n,
                mean_completion_seconds: traces.iter().map(|t| t.completion_seconds).sum::<f64>() / n,
            });
        }
    }
    rows
}
