//! Concurrency controller.
//!
//! The controller scores each probing window with the utility
//! `throughput / k^concurrency` and proposes the next number of active
//! streams. Two proposers are provided: a sign-based gradient hill climber
//! (the production default) and a Gaussian-process Bayesian optimizer kept as
//! a comparison baseline. [`optimizer_loop`] drives either one against any
//! [`TransferControl`] implementation, which is how the same code runs both
//! the real transfer engine and the simulator.

mod bayes;
mod gradient;
mod probe_loop;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bayes::{BayesState, SEED_TRIALS};
pub use gradient::{Direction, OptimizerState};
pub use probe_loop::{optimizer_loop, LoopReport, ProbeRecord, TransferControl};

/// Default penalty coefficient.
pub const DEFAULT_K: f64 = 1.02;
/// Default upper bound on concurrent streams.
pub const DEFAULT_MAX_CONCURRENCY: u32 = 64;
/// Default cap on the gradient step size.
pub const DEFAULT_STEP_CAP: u32 = 8;
/// Default probing window in seconds.
pub const DEFAULT_PROBE_SECONDS: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("penalty coefficient must be > 1, got {0}")]
    PenaltyOutOfDomain(f64),
    #[error("concurrency must be >= 1, got {0}")]
    ConcurrencyOutOfDomain(u32),
    #[error("throughput must be finite and >= 0, got {0}")]
    NegativeThroughput(f64),
    #[error("invalid controller config: {0}")]
    InvalidConfig(String),
}

/// Base of the exponential concurrency penalty. Always strictly greater than 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PenaltyCoefficient(f64);

impl PenaltyCoefficient {
    pub fn new(k: f64) -> Result<Self, ControllerError> {
        if k.is_finite() && k > 1.0 {
            Ok(Self(k))
        } else {
            Err(ControllerError::PenaltyOutOfDomain(k))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Utility of `throughput_mbps` at `concurrency` streams. Callers guarantee
    /// the domain; see [`utility`] for the checked entry point.
    pub(crate) fn score(self, throughput_mbps: f64, concurrency: u32) -> f64 {
        throughput_mbps / self.0.powi(concurrency as i32)
    }
}

impl Default for PenaltyCoefficient {
    fn default() -> Self {
        Self(DEFAULT_K)
    }
}

impl TryFrom<f64> for PenaltyCoefficient {
    type Error = ControllerError;

    fn try_from(k: f64) -> Result<Self, Self::Error> {
        Self::new(k)
    }
}

impl From<PenaltyCoefficient> for f64 {
    fn from(k: PenaltyCoefficient) -> f64 {
        k.0
    }
}

/// Number of active streams, at least one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConcurrencyLevel(u32);

impl ConcurrencyLevel {
    pub fn new(c: u32) -> Result<Self, ControllerError> {
        if c >= 1 {
            Ok(Self(c))
        } else {
            Err(ControllerError::ConcurrencyOutOfDomain(c))
        }
    }

    /// Clamps an arbitrary signed proposal into `[1, max]`.
    pub fn clamped(value: i64, max: u32) -> Self {
        Self(value.clamp(1, i64::from(max.max(1))) as u32)
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl std::fmt::Display for ConcurrencyLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// Aggregated throughput for one probing window held at a fixed concurrency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub mean_mbps: f64,
    pub window_seconds: f64,
    pub concurrency: ConcurrencyLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct UtilityScore(pub f64);

impl UtilityScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// `throughput / k^c`, with every argument checked.
pub fn utility(throughput_mbps: f64, concurrency: u32, k: f64) -> Result<UtilityScore, ControllerError> {
    let k = PenaltyCoefficient::new(k)?;
    let c = ConcurrencyLevel::new(concurrency)?;
    if !(throughput_mbps.is_finite() && throughput_mbps >= 0.0) {
        return Err(ControllerError::NegativeThroughput(throughput_mbps));
    }
    Ok(UtilityScore(k.score(throughput_mbps, c.get())))
}

/// Concurrency `1 / ln k` at which `alpha * c / k^c` peaks when every stream
/// contributes the same fixed rate.
pub fn theoretical_optimum(k: f64) -> Result<f64, ControllerError> {
    let k = PenaltyCoefficient::new(k)?;
    Ok(1.0 / k.value().ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gd,
    Bayes,
}

impl std::str::FromStr for Method {
    type Err = ControllerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gd" => Ok(Method::Gd),
            "bayes" => Ok(Method::Bayes),
            other => Err(ControllerError::InvalidConfig(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Gd => "gd",
            Method::Bayes => "bayes",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub k: PenaltyCoefficient,
    pub probe_seconds: f64,
    pub method: Method,
    pub max_concurrency: u32,
    pub initial_concurrency: u32,
    pub step_cap: u32,
    pub rng_seed: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            k: PenaltyCoefficient::default(),
            probe_seconds: DEFAULT_PROBE_SECONDS,
            method: Method::Gd,
            max_concurrency: DEFAULT_MAX_CONCURRENCY,
            initial_concurrency: 1,
            step_cap: DEFAULT_STEP_CAP,
            rng_seed: 0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if !(self.probe_seconds.is_finite() && self.probe_seconds > 0.0) {
            return Err(ControllerError::InvalidConfig(format!(
                "probe_seconds must be > 0, got {}",
                self.probe_seconds
            )));
        }
        if self.max_concurrency == 0 {
            return Err(ControllerError::InvalidConfig("max_concurrency must be >= 1".into()));
        }
        if self.initial_concurrency == 0 || self.initial_concurrency > self.max_concurrency {
            return Err(ControllerError::InvalidConfig(format!(
                "initial_concurrency must be in [1, {}], got {}",
                self.max_concurrency, self.initial_concurrency
            )));
        }
        if self.step_cap == 0 {
            return Err(ControllerError::InvalidConfig("step_cap must be >= 1".into()));
        }
        Ok(())
    }
}

/// Either proposer behind one interface.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Gd(OptimizerState),
    Bayes(BayesState),
}

impl Optimizer {
    pub fn from_config(cfg: &ControllerConfig) -> Self {
        let initial = ConcurrencyLevel::clamped(i64::from(cfg.initial_concurrency), cfg.max_concurrency);
        match cfg.method {
            Method::Gd => Optimizer::Gd(OptimizerState::new(initial, cfg.step_cap)),
            Method::Bayes => Optimizer::Bayes(BayesState::new(initial, cfg.rng_seed)),
        }
    }

    pub fn current(&self) -> ConcurrencyLevel {
        match self {
            Optimizer::Gd(s) => s.current(),
            Optimizer::Bayes(s) => s.last_proposed(),
        }
    }

    /// Scores `probe` and returns the level to hold for the next window.
    pub fn propose(&mut self, probe: &ProbeResult, k: PenaltyCoefficient, max: u32) -> ConcurrencyLevel {
        match self {
            Optimizer::Gd(s) => s.propose(probe, k, max),
            Optimizer::Bayes(s) => s.propose(probe, k, max),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn utility_examples() {
        assert_eq!(utility(0.0, 10, 1.02).unwrap().value(), 0.0);
        let u = utility(500.0, 1, 1.02).unwrap().value();
        assert!((u - 500.0 / 1.02).abs() < 1e-12);
        assert!((u - 490.196_078_431_372_54).abs() < 1e-9);
    }

    #[test]
    fn utility_at_twenty_streams_matches_pinned_power() {
        // 1.02^20 and the quotient evaluated with 40-digit arithmetic.
        const POW_1_02_20: f64 = 1.485_947_395_978_354_2;
        let u = utility(10_000.0, 20, 1.02).unwrap().value();
        assert!(((u - 10_000.0 / POW_1_02_20) / u).abs() < 1e-12);
        assert!((u - 6_729.713_331_080_577).abs() < 1e-8, "{u}");
    }

    #[test]
    fn utility_domain_errors() {
        assert_eq!(utility(1.0, 1, 1.0), Err(ControllerError::PenaltyOutOfDomain(1.0)));
        assert_eq!(utility(1.0, 1, 0.5), Err(ControllerError::PenaltyOutOfDomain(0.5)));
        assert_eq!(utility(1.0, 0, 1.02), Err(ControllerError::ConcurrencyOutOfDomain(0)));
        assert_eq!(utility(-1.0, 1, 1.02), Err(ControllerError::NegativeThroughput(-1.0)));
        assert!(utility(f64::NAN, 1, 1.02).is_err());
    }

    #[test]
    fn theoretical_optimum_examples() {
        assert!((theoretical_optimum(std::f64::consts::E).unwrap() - 1.0).abs() < 1e-15);
        // 1/ln(1.02) and 1/ln(1.05), evaluated with 40-digit arithmetic.
        assert!((theoretical_optimum(1.02).unwrap() - 50.498_349_791_843_94).abs() < 1e-9);
        assert!((theoretical_optimum(1.05).unwrap() - 20.495_934_314_287_87).abs() < 1e-9);
        assert!(theoretical_optimum(1.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ControllerConfig::default().validate().is_ok());
        let bad = ControllerConfig { initial_concurrency: 65, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ControllerConfig { probe_seconds: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn method_parses() {
        assert_eq!("gd".parse::<Method>().unwrap(), Method::Gd);
        assert_eq!("bayes".parse::<Method>().unwrap(), Method::Bayes);
        assert!("rl".parse::<Method>().is_err());
    }
}
