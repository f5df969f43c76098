//! Cholesky factorisation with diagonal jitter escalation.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

/// Diagonal inflation schedule, relative to the process variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterPolicy {
    pub initial: f64,
    pub max: f64,
    pub factor: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            initial: 1e-10,
            max: 1e-4,
            factor: 10.0,
        }
    }
}

impl JitterPolicy {
    pub fn is_valid(&self) -> bool {
        self.initial > 0.0 && self.max >= self.initial && self.factor > 1.0
    }

    fn levels(&self) -> impl Iterator<Item = f64> + '_ {
        let mut next = Some(self.initial);
        std::iter::from_fn(move || {
            let cur = next?;
            let up = cur * self.factor;
            // tolerate rounding in the last multiplication
            next = (up <= self.max * (1.0 + 1e-9)).then_some(up);
            Some(cur)
        })
    }
}

/// A Cholesky factor together with the jitter it needed.
#[derive(Debug, Clone)]
pub struct Factor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

/// Factorisation failed at every jitter level.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorFailure {
    pub size: usize,
    pub max_jitter: f64,
    pub min_diagonal: f64,
}

impl Factor {
    /// Factorises `mat + j·scale·I` for the smallest `j` of the policy that
    /// succeeds. `scale` is the process variance.
    pub fn new(mat: &DMatrix<f64>, scale: f64, policy: &JitterPolicy) -> Result<Self, FactorFailure> {
        let n = mat.nrows();
        for level in policy.levels() {
            let mut m = mat.clone();
            let add = level * scale;
            for i in 0..n {
                m[(i, i)] += add;
            }
            if let Some(chol) = Cholesky::new(m) {
                // A non-finite input can slip through as NaN pivots.
                if chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                    return Ok(Self { chol, jitter: add });
                }
            }
        }
        Err(FactorFailure {
            size: n,
            max_jitter: policy.max * scale,
            min_diagonal: mat.diagonal().iter().cloned().fold(f64::INFINITY, f64::min),
        })
    }

    /// Like [`Factor::new`], but tries the matrix as given first.
    pub fn exact_or_jittered(mat: &DMatrix<f64>, scale: f64, policy: &JitterPolicy) -> Result<Self, FactorFailure> {
        if let Some(chol) = Cholesky::new(mat.clone()) {
            if chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok(Self { chol, jitter: 0.0 });
            }
        }
        Self::new(mat, scale, policy)
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Absolute jitter that was added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `L⁻¹ b`.
    pub fn whiten(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut out);
        out
    }

    /// `L⁻¹ B`.
    pub fn whiten_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut out);
        out
    }

    /// `A⁻¹ b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `L ξ`.
    pub fn color(&self, xi: &DVector<f64>) -> DVector<f64> {
        let l = self.chol.l_dirty();
        let n = l.nrows();
        let mut out = DVector::zeros(n);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += l[(i, j)] * xi[j];
            }
            out[i] = acc;
        }
        out
    }
}
