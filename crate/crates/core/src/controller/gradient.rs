use serde::{Deserialize, Serialize};

use super::{ConcurrencyLevel, PenaltyCoefficient, ProbeResult, UtilityScore};

/// Consecutive improving moves taken at the full step limit before it doubles.
const REGROW_AFTER: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    fn sign(self) -> i64 {
        match self {
            Direction::Up => 1,
            Direction::Down => -1,
        }
    }

    fn reversed(self) -> Self {
        match self {
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
        }
    }
}

/// Memory of the gradient hill climber.
///
/// The discrete gradient between the last two probed levels picks the
/// direction. Moving in the same direction doubles the step; a reversal resets
/// it to one and halves the step limit, so once the optimum has been bracketed
/// the iterates settle within one level of it. The limit grows back toward
/// `step_cap` after a run of improving moves made at the full limit, which lets the climber
/// follow an environment that shifts after convergence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    current: ConcurrencyLevel,
    previous: ConcurrencyLevel,
    previous_utility: Option<UtilityScore>,
    direction: Direction,
    step: u32,
    step_limit: u32,
    step_cap: u32,
    streak: u32,
    history: Vec<(ConcurrencyLevel, UtilityScore)>,
}

impl OptimizerState {
    pub fn new(initial: ConcurrencyLevel, step_cap: u32) -> Self {
        let step_cap = step_cap.max(1);
        Self {
            current: initial,
            previous: initial,
            previous_utility: None,
            direction: Direction::Up,
            step: 1,
            step_limit: step_cap,
            step_cap,
            streak: 0,
            history: Vec::new(),
        }
    }

    /// State positioned at `current` after a move from `previous`, as if
    /// `previous` had scored `previous_utility`.
    pub fn resume_from(
        current: ConcurrencyLevel,
        previous: ConcurrencyLevel,
        previous_utility: f64,
        direction: Direction,
        step: u32,
        step_cap: u32,
    ) -> Self {
        let mut state = Self::new(current, step_cap);
        state.previous = previous;
        state.previous_utility = Some(UtilityScore(previous_utility));
        state.direction = direction;
        state.step = step.clamp(1, state.step_cap);
        state
    }

    pub fn current(&self) -> ConcurrencyLevel {
        self.current
    }

    pub fn previous(&self) -> ConcurrencyLevel {
        self.previous
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn step(&self) -> u32 {
        self.step
    }

    pub fn step_cap(&self) -> u32 {
        self.step_cap
    }

    pub fn history(&self) -> &[(ConcurrencyLevel, UtilityScore)] {
        &self.history
    }

    /// Finite-difference slope of utility between the previous and current
    /// level, when both have been scored and differ.
    pub fn gradient(&self, current_utility: f64) -> Option<f64> {
        let previous_utility = self.previous_utility?;
        if self.previous == self.current {
            return None;
        }
        let dc = f64::from(self.current.get()) - f64::from(self.previous.get());
        Some((current_utility - previous_utility.value()) / dc)
    }

    /// Scores `probe` (taken at the current level) and moves to the next level.
    pub fn propose(&mut self, probe: &ProbeResult, k: PenaltyCoefficient, max: u32) -> ConcurrencyLevel {
        debug_assert_eq!(probe.concurrency, self.current, "probe must be taken at the current level");
        let congested = probe.mean_mbps <= 0.0;
        let u = if congested { 0.0 } else { k.score(probe.mean_mbps, probe.concurrency.get()) };
        self.history.push((self.current, UtilityScore(u)));

        let mut next = None;
        if congested {
            // No bytes moved while streams were active.
            self.reverse();
        } else {
            match self.gradient(u) {
                None => self.advance(),
                Some(g) if g == 0.0 => {
                    // Tie: hold the lower of the two levels and re-probe.
                    next = Some(self.current.min(self.previous));
                    self.step = 1;
                    self.streak = 0;
                }
                Some(g) => {
                    let uphill = if g > 0.0 { Direction::Up } else { Direction::Down };
                    if uphill == self.direction {
                        self.advance();
                    } else {
                        self.reverse();
                    }
                }
            }
        }

        let next = next.unwrap_or_else(|| {
            let target = i64::from(self.current.get()) + self.direction.sign() * i64::from(self.step);
            ConcurrencyLevel::clamped(target, max)
        });
        self.previous = self.current;
        self.previous_utility = Some(UtilityScore(u));
        self.current = next;
        next
    }

    fn advance(&mut self) {
        if self.step >= self.step_limit {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        if self.streak >= REGROW_AFTER {
            self.step_limit = (self.step_limit * 2).min(self.step_cap);
            self.streak = 0;
        }
        self.step = (self.step * 2).min(self.step_limit);
    }

    fn reverse(&mut self) {
        self.direction = self.direction.reversed();
        self.step = 1;
        self.step_limit = (self.step_limit / 2).max(1);
        self.streak = 0;
    }
}
