use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erf;

use super::{ConcurrencyLevel, PenaltyCoefficient, ProbeResult, UtilityScore};

/// Random proposals made before the surrogate takes over.
pub const SEED_TRIALS: u32 = 3;
/// Squared-exponential length scale, in concurrency levels.
const LENGTH_SCALE: f64 = 4.0;
/// Noise variance floor on the normalized scale.
const JITTER: f64 = 1e-6;
const EI_TIE: f64 = 1e-12;

/// Bayesian-optimization baseline: a few seeded random trials, then a
/// Gaussian-process surrogate over observed utilities with expected
/// improvement as the acquisition function.
#[derive(Debug, Clone)]
pub struct BayesState {
    observations: Vec<(ConcurrencyLevel, UtilityScore)>,
    seed_trials_remaining: u32,
    rng_seed: u64,
    rng: ChaCha8Rng,
    last_proposed: ConcurrencyLevel,
}

/// Posterior of the surrogate at one level, on the normalized scale.
#[derive(Debug, Clone, Copy)]
struct Posterior {
    mean: f64,
    sd: f64,
}

impl BayesState {
    pub fn new(initial: ConcurrencyLevel, rng_seed: u64) -> Self {
        Self {
            observations: Vec::new(),
            seed_trials_remaining: SEED_TRIALS,
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            last_proposed: initial,
        }
    }

    pub fn observations(&self) -> &[(ConcurrencyLevel, UtilityScore)] {
        &self.observations
    }

    pub fn seed_trials_remaining(&self) -> u32 {
        self.seed_trials_remaining
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn last_proposed(&self) -> ConcurrencyLevel {
        self.last_proposed
    }

    /// Level with the highest mean observed utility, ties to the lower level.
    pub fn best_observed(&self) -> Option<ConcurrencyLevel> {
        let groups = group_by_level(&self.observations);
        let mut best: Option<(u32, f64)> = None;
        for (&c, g) in &groups {
            if best.is_none_or(|(_, u)| g.mean > u) {
                best = Some((c, g.mean));
            }
        }
        best.and_then(|(c, _)| ConcurrencyLevel::new(c).ok())
    }

    pub fn propose(&mut self, probe: &ProbeResult, k: PenaltyCoefficient, max: u32) -> ConcurrencyLevel {
        debug_assert_eq!(probe.concurrency, self.last_proposed, "probe must be taken at the last proposal");
        let u = if probe.mean_mbps > 0.0 { k.score(probe.mean_mbps, probe.concurrency.get()) } else { 0.0 };
        self.observations.push((probe.concurrency, UtilityScore(u)));

        let next = if self.seed_trials_remaining > 0 {
            self.seed_trials_remaining -= 1;
            ConcurrencyLevel::clamped(i64::from(self.rng.random_range(1..=max.max(1))), max)
        } else {
            self.acquire(max)
        };
        self.last_proposed = next;
        next
    }

    fn acquire(&self, max: u32) -> ConcurrencyLevel {
        let max = max.max(1);
        let groups = group_by_level(&self.observations);
        let lowest_untried = (1..=max).find(|c| !groups.contains_key(c));

        let (lo, hi) = self
            .observations
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, u)| (lo.min(u.0), hi.max(u.0)));
        if hi - lo <= 0.0 {
            // A flat surrogate makes expected improvement identical everywhere.
            return ConcurrencyLevel::clamped(i64::from(lowest_untried.unwrap_or(1)), max);
        }

        let Some(model) = Surrogate::fit(&self.observations, &groups) else {
            return ConcurrencyLevel::clamped(i64::from(lowest_untried.unwrap_or(1)), max);
        };

        let mut best_c = 1;
        let mut best_ei = f64::NEG_INFINITY;
        let mut best_mean = f64::NEG_INFINITY;
        for c in 1..=max {
            let post = model.predict(c);
            let ei = expected_improvement(post, model.incumbent);
            let tied = (ei - best_ei).abs() <= EI_TIE * best_ei.abs().max(1.0);
            let better = if tied {
                // Untried levels first, then the better posterior mean.
                let c_untried = !groups.contains_key(&c);
                let best_untried = !groups.contains_key(&best_c);
                (c_untried && !best_untried) || (c_untried == best_untried && !best_untried && post.mean > best_mean)
            } else {
                ei > best_ei
            };
            if better {
                best_c = c;
                best_ei = ei;
                best_mean = post.mean;
            }
        }
        ConcurrencyLevel::clamped(i64::from(best_c), max)
    }
}

#[derive(Debug, Default)]
struct Group {
    n: usize,
    mean: f64,
    m2: f64,
}

fn group_by_level(observations: &[(ConcurrencyLevel, UtilityScore)]) -> BTreeMap<u32, Group> {
    let mut groups: BTreeMap<u32, Group> = BTreeMap::new();
    for (c, u) in observations {
        let g = groups.entry(c.get()).or_default();
        g.n += 1;
        let delta = u.0 - g.mean;
        g.mean += delta / g.n as f64;
        g.m2 += delta * (u.0 - g.mean);
    }
    groups
}

/// GP over per-level means. Replicates at one level are folded into their
/// mean with noise variance divided by the replicate count, which yields the
/// same posterior as conditioning on every replicate.
struct Surrogate {
    levels: Vec<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
    incumbent: f64,
}

impl Surrogate {
    fn fit(observations: &[(ConcurrencyLevel, UtilityScore)], groups: &BTreeMap<u32, Group>) -> Option<Self> {
        let n = observations.len() as f64;
        let mu = observations.iter().map(|(_, u)| u.0).sum::<f64>() / n;
        let var = observations.iter().map(|(_, u)| (u.0 - mu).powi(2)).sum::<f64>() / n;
        let scale = var.sqrt();
        if !(scale > 0.0) {
            return None;
        }

        // Pooled within-level variance from replicated levels.
        let (ss, dof) = groups
            .values()
            .filter(|g| g.n >= 2)
            .fold((0.0, 0usize), |(ss, dof), g| (ss + g.m2, dof + g.n - 1));
        let noise = if dof > 0 { (ss / dof as f64) / (scale * scale) } else { 0.0 }.max(JITTER);

        let levels: Vec<f64> = groups.keys().map(|&c| f64::from(c)).collect();
        let y = DVector::from_iterator(groups.len(), groups.values().map(|g| (g.mean - mu) / scale));
        let m = levels.len();
        let mut cov = DMatrix::from_fn(m, m, |i, j| kernel(levels[i], levels[j]));
        for (i, g) in groups.values().enumerate() {
            cov[(i, i)] += noise / g.n as f64;
        }
        let chol = cov.cholesky()?;
        let alpha = chol.solve(&y);
        let incumbent = y.max();
        Some(Self { levels, chol, alpha, incumbent })
    }

    fn predict(&self, c: u32) -> Posterior {
        let x = f64::from(c);
        let k_star = DVector::from_iterator(self.levels.len(), self.levels.iter().map(|&l| kernel(x, l)));
        let mean = k_star.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&k_star).unwrap_or_else(|| k_star.clone());
        let var = (kernel(x, x) - v.dot(&v)).max(0.0);
        Posterior { mean, sd: var.sqrt() }
    }
}

fn kernel(a: f64, b: f64) -> f64 {
    let d = a - b;
    (-d * d / (2.0 * LENGTH_SCALE * LENGTH_SCALE)).exp()
}

fn expected_improvement(post: Posterior, incumbent: f64) -> f64 {
    let gain = post.mean - incumbent;
    if post.sd < 1e-12 {
        return gain.max(0.0);
    }
    let z = gain / post.sd;
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let cdf = 0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2));
    gain * cdf + post.sd * pdf
}
