//! Adaptive noise-rate schedule: boost η when the sliding-window robust
//! validation accuracy degrades.
//!
//! After each epoch the caller reports the robust validation accuracy A_e.
//! Once both length-(τ+1) windows are populated, the trailing-window sum is
//! compared against the window one step earlier; the two sums share τ terms,
//! so the comparison reduces exactly to `A_e < A_{e-τ-1}`. The boost is
//! `η ← min(η·(1+γ), η_max)`, making the trajectory non-decreasing and
//! bounded. The scheduler is metric-agnostic; training feeds it PGD-10
//! robust validation accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoilinState {
    eta: f64,
    eta_min: f64,
    eta_max: f64,
    tau: usize,
    gamma: f64,
    history: Vec<f64>,
}

impl NoilinState {
    pub fn init(eta_min: f64, eta_max: f64, tau: usize, gamma: f64) -> Result<Self> {
        let ordered = (0.0..=1.0).contains(&eta_min)
            && (0.0..=1.0).contains(&eta_max)
            && eta_min <= eta_max;
        if !ordered {
            return Err(Error::invalid(format!(
                "need 0 <= eta_min <= eta_max <= 1, got [{eta_min}, {eta_max}]"
            )));
        }
        if tau == 0 {
            return Err(Error::invalid("window size tau must be >= 1".to_string()));
        }
        if gamma.is_nan() || gamma <= 0.0 {
            return Err(Error::invalid(format!("boost rate gamma {gamma} must be positive")));
        }
        Ok(NoilinState {
            eta: eta_min,
            eta_min,
            eta_max,
            tau,
            gamma,
            history: Vec::new(),
        })
    }

    /// SAT-NoiLIn defaults: η_min 0.05, η_max 0.6, τ 10, γ 0.1.
    pub fn sat_defaults() -> Self {
        NoilinState::init(0.05, 0.6, 10, 0.1).unwrap()
    }

    /// TRADES-NoiLIn defaults: η_min 0.05, η_max 0.4, τ 10, γ 0.05.
    pub fn trades_defaults() -> Self {
        NoilinState::init(0.05, 0.4, 10, 0.05).unwrap()
    }

    pub fn current_eta(&self) -> f64 {
        self.eta
    }

    pub fn eta_min(&self) -> f64 {
        self.eta_min
    }

    pub fn eta_max(&self) -> f64 {
        self.eta_max
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// Record the robust validation accuracy for the epoch just finished and
    /// boost η if the windowed accuracy degraded. Returns whether a boost
    /// fired.
    ///
    /// The trigger is false until both windows are fully populated, i.e.
    /// before τ+2 observations; the windowed sums share τ terms and cancel
    /// to the strict comparison `A_e < A_{e-τ-1}`, which is evaluated
    /// exactly.
    pub fn observe(&mut self, accuracy: f64) -> Result<bool> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::invalid(format!(
                "validation accuracy {accuracy} outside [0,1]"
            )));
        }
        self.history.push(accuracy);
        let e = self.history.len();
        if e < self.tau + 2 {
            return Ok(false);
        }
        let newest = self.history[e - 1];
        let oldest = self.history[e - self.tau - 2];
        let degraded = newest < oldest;
        if degraded {
            self.eta = (self.eta * (1.0 + self.gamma)).min(self.eta_max);
        }
        Ok(degraded)
    }
}
