//! Probit link between latent derivative values and the virtual
//! monotonicity indicators, plus the constraint-strictness schedule.

use serde::{Deserialize, Serialize};
use libm::erfc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("schedule needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("final strictness must be finite and positive, got {0}")]
    InvalidTarget(f64),
    #[error("schedule must start at 0 and increase strictly; offending index {0}")]
    NotIncreasing(usize),
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const ASYMPTOTIC_BELOW: f64 = -8.0;

/// `log Φ(x)`, finite for every finite `x`.
///
/// Uses `erfc` down to `x = -8` and the asymptotic series of Mills' ratio
/// below that, where `Φ(x)` itself underflows long before `log Φ(x)` does.
pub fn log_phi(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x >= 0.0 {
        (-0.5 * erfc(x / std::f64::consts::SQRT_2)).ln_1p()
    } else if x >= ASYMPTOTIC_BELOW {
        (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln()
    } else if x == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        // Φ(x) = φ(x)/|x| · Σ_k (-1)^k (2k-1)!! / x^{2k}
        let inv2 = 1.0 / (x * x);
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..64 {
            let next = -term * (2 * k - 1) as f64 * inv2;
            if next.abs() >= term.abs() || next.abs() < 1e-17 {
                break;
            }
            term = next;
            sum += term;
        }
        -0.5 * x * x - LN_SQRT_2PI - (-x).ln() + sum.ln()
    }
}

/// `Σ_i log Φ(τ y'_i)`.
pub fn log_probit(yprime: &[f64], tau: f64) -> f64 {
    yprime.iter().map(|&v| log_phi(tau * v)).sum()
}

/// Increasing sequence of strictness values `0 = τ_0 < τ_1 < … < τ_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TauSchedule {
    values: Vec<f64>,
}

impl TryFrom<Vec<f64>> for TauSchedule {
    type Error = ConstraintError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<TauSchedule> for Vec<f64> {
    fn from(s: TauSchedule) -> Self {
        s.values
    }
}

impl TauSchedule {
    pub fn new(values: Vec<f64>) -> Result<Self, ConstraintError> {
        if values.first() != Some(&0.0) {
            return Err(ConstraintError::NotIncreasing(0));
        }
        for (i, w) in values.windows(2).enumerate() {
            if !(w[1].is_finite() && w[1] > w[0]) {
                return Err(ConstraintError::NotIncreasing(i + 1));
            }
        }
        if values.len() < 2 {
            return Err(ConstraintError::TooFewSteps(values.len()));
        }
        Ok(Self { values })
    }

    /// All values including the leading zero.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of positive steps `T`.
    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn final_tau(&self) -> f64 {
        *self.values.last().expect("non-empty schedule")
    }

    /// Inserts extra strictness values, keeping the sequence sorted.
    pub fn refine(&self, extra: &[f64]) -> Result<Self, ConstraintError> {
        let mut values = self.values.clone();
        for &v in extra {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConstraintError::InvalidTarget(v));
            }
            if let Err(pos) = values.binary_search_by(|probe| probe.total_cmp(&v)) {
                values.insert(pos, v);
            }
        }
        Self::new(values)
    }
}

/// `τ_0 = 0` followed by `steps` geometric values from `10⁻³·τ_T` to `τ_T`.
pub fn default_schedule(tau_final: f64, steps: usize) -> Result<TauSchedule, ConstraintError> {
    if steps < 2 {
        return Err(ConstraintError::TooFewSteps(steps));
    }
    if !(tau_final.is_finite() && tau_final > 0.0) {
        return Err(ConstraintError::InvalidTarget(tau_final));
    }
    let ratio = 1e3f64.powf(1.0 / (steps - 1) as f64);
    let mut values = Vec::with_capacity(steps + 1);
    values.push(0.0);
    for i in 0..steps {
        let remaining = (steps - 1 - i) as i32;
        values.push(tau_final / ratio.powi(remaining));
    }
    *values.last_mut().unwrap() = tau_final;
    TauSchedule::new(values)
}
