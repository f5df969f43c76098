//! Matérn-5/2 correlation, its derivatives, and the anisotropic product
//! covariance between function values and partial derivatives.
//!
//! With `θ = √5 / l` and `h = |δ|`:
//!
//! ```text
//! g(h)         = (1 + θh + θ²h²/3) e^{-θh}
//! ∂g/∂x_i      = -(θ²/3) h (1 + θh) e^{-θh} sign(δ)
//! ∂²g/∂x_i∂x_j =  (θ²/3) (1 + θh - θ²h²) e^{-θh}
//! ```
//!
//! The mixed derivative is even in `δ`. Inputs calibrated for the default
//! priors live on the unit hypercube, but any box works.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smoothness of the Matérn family used throughout. The derivative
/// formulas below are specialised to this value.
pub const SMOOTHNESS: f64 = 2.5;

const SQRT_5: f64 = 2.236_067_977_499_79;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("distance must be finite and non-negative, got {0}")]
    InvalidDistance(f64),
    #[error("lengthscale must be finite and positive, got {0}")]
    InvalidLengthscale(f64),
    #[error("variance must be finite and positive, got {0}")]
    InvalidVariance(f64),
    #[error("point has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("derivative dimension {dim} out of range for {dims}-d inputs")]
    InvalidDimension { dim: usize, dims: usize },
}

/// Hyperparameters of the product Matérn-5/2 covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct KernelParams {
    lengthscales: Vec<f64>,
    variance: f64,
}

#[derive(Deserialize)]
struct RawParams {
    lengthscales: Vec<f64>,
    variance: f64,
}

impl TryFrom<RawParams> for KernelParams {
    type Error = KernelError;

    fn try_from(raw: RawParams) -> Result<Self, Self::Error> {
        Self::new(raw.lengthscales, raw.variance)
    }
}

impl KernelParams {
    pub fn new(lengthscales: Vec<f64>, variance: f64) -> Result<Self, KernelError> {
        for &l in &lengthscales {
            check_lengthscale(l)?;
        }
        if !(variance.is_finite() && variance > 0.0) {
            return Err(KernelError::InvalidVariance(variance));
        }
        Ok(Self {
            lengthscales,
            variance,
        })
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn dims(&self) -> usize {
        self.lengthscales.len()
    }

    /// `θ_k = √(2λ) / l_k`.
    pub fn theta(&self, k: usize) -> f64 {
        SQRT_5 / self.lengthscales[k]
    }

    /// Same lengthscales, unit variance.
    pub fn correlation(&self) -> Self {
        Self {
            lengthscales: self.lengthscales.clone(),
            variance: 1.0,
        }
    }

    pub fn with_variance(&self, variance: f64) -> Result<Self, KernelError> {
        Self::new(self.lengthscales.clone(), variance)
    }
}

fn check_lengthscale(l: f64) -> Result<(), KernelError> {
    if l.is_finite() && l > 0.0 {
        Ok(())
    } else {
        Err(KernelError::InvalidLengthscale(l))
    }
}

fn check_delta(delta: f64) -> Result<(), KernelError> {
    if delta.is_finite() {
        Ok(())
    } else {
        Err(KernelError::InvalidDistance(delta))
    }
}

#[inline]
pub(crate) fn g(h: f64, theta: f64) -> f64 {
    let th = theta * h;
    (1.0 + th + th * th / 3.0) * (-th).exp()
}

#[inline]
pub(crate) fn g_d1(delta: f64, theta: f64) -> f64 {
    let h = delta.abs();
    let th = theta * h;
    // sign(δ)·h == δ
    -(theta * theta / 3.0) * delta * (1.0 + th) * (-th).exp()
}

#[inline]
pub(crate) fn g_d2(delta: f64, theta: f64) -> f64 {
    let th = theta * delta.abs();
    (theta * theta / 3.0) * (1.0 + th - th * th) * (-th).exp()
}

/// Matérn-5/2 correlation at distance `h` with lengthscale `l`.
pub fn matern52(h: f64, l: f64) -> Result<f64, KernelError> {
    if !(h.is_finite() && h >= 0.0) {
        return Err(KernelError::InvalidDistance(h));
    }
    check_lengthscale(l)?;
    Ok(g(h, SQRT_5 / l))
}

/// `∂/∂x_i g(|x_i - x_j|)` evaluated at `delta = x_i - x_j`.
pub fn matern52_d1(delta: f64, l: f64) -> Result<f64, KernelError> {
    check_delta(delta)?;
    check_lengthscale(l)?;
    Ok(g_d1(delta, SQRT_5 / l))
}

/// `∂²/∂x_i∂x_j g(|x_i - x_j|)` evaluated at `delta = x_i - x_j`.
pub fn matern52_d2(delta: f64, l: f64) -> Result<f64, KernelError> {
    check_delta(delta)?;
    check_lengthscale(l)?;
    Ok(g_d2(delta, SQRT_5 / l))
}

/// Covariance between `y(xi)` (or a partial derivative of it) and `y(xj)`
/// (or a partial derivative of it). `di`/`dj` name the differentiated
/// dimension on each side.
///
/// Differentiating the second argument flips the sign of the odd factor.
#[inline]
pub(crate) fn site_cov(
    xi: &[f64],
    di: Option<usize>,
    xj: &[f64],
    dj: Option<usize>,
    p: &KernelParams,
) -> f64 {
    let mut acc = p.variance;
    for (k, (&a, &b)) in xi.iter().zip(xj).enumerate() {
        let theta = p.theta(k);
        let delta = a - b;
        let factor = match (di == Some(k), dj == Some(k)) {
            (false, false) => g(delta.abs(), theta),
            (true, false) => g_d1(delta, theta),
            (false, true) => -g_d1(delta, theta),
            (true, true) => g_d2(delta, theta),
        };
        acc *= factor;
    }
    acc
}

fn check_points(xi: &[f64], xj: &[f64], p: &KernelParams) -> Result<(), KernelError> {
    for x in [xi, xj] {
        if x.len() != p.dims() {
            return Err(KernelError::DimensionMismatch {
                expected: p.dims(),
                got: x.len(),
            });
        }
        if let Some(&bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(KernelError::InvalidDistance(bad));
        }
    }
    Ok(())
}

fn check_dim(k: usize, p: &KernelParams) -> Result<(), KernelError> {
    if k < p.dims() {
        Ok(())
    } else {
        Err(KernelError::InvalidDimension {
            dim: k,
            dims: p.dims(),
        })
    }
}

/// `Cov[y(xi), y(xj)] = σ² ∏_k g(|xi_k - xj_k|, l_k)`.
pub fn cov_ff(xi: &[f64], xj: &[f64], p: &KernelParams) -> Result<f64, KernelError> {
    check_points(xi, xj, p)?;
    Ok(site_cov(xi, None, xj, None, p))
}

/// `Cov[y'_k(xi), y(xj)]`: the first argument is differentiated.
pub fn cov_fd(xi: &[f64], xj: &[f64], k: usize, p: &KernelParams) -> Result<f64, KernelError> {
    check_points(xi, xj, p)?;
    check_dim(k, p)?;
    Ok(site_cov(xi, Some(k), xj, None, p))
}

/// `Cov[y'_k(xi), y'_k2(xj)]`, same- or cross-dimension.
pub fn cov_dd(
    xi: &[f64],
    xj: &[f64],
    k: usize,
    k2: usize,
    p: &KernelParams,
) -> Result<f64, KernelError> {
    check_points(xi, xj, p)?;
    check_dim(k, p)?;
    check_dim(k2, p)?;
    Ok(site_cov(xi, Some(k), xj, Some(k2), p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn fd1(delta: f64, l: f64, step: f64) -> f64 {
        let f = |d: f64| matern52(d.abs(), l).unwrap();
        (f(delta + step) - f(delta - step)) / (2.0 * step)
    }

    // ∂²/∂x_i∂x_j g(|x_i - x_j|) = -g''(δ)
    fn fd2(delta: f64, l: f64, step: f64) -> f64 {
        let f = |d: f64| matern52(d.abs(), l).unwrap();
        -(f(delta + step) - 2.0 * f(delta) + f(delta - step)) / (step * step)
    }

    #[test]
    fn correlation_at_zero_is_one() {
        for l in [0.1, 1.0, 7.5] {
            assert_eq!(matern52(0.0, l).unwrap(), 1.0);
        }
    }

    #[test]
    fn unit_theta_value() {
        let v = matern52(1.0, 5f64.sqrt()).unwrap();
        assert_relative_eq!(v, 0.858_385_362_733_365_4, max_relative = 1e-14);
    }

    #[test]
    fn decays_to_zero() {
        assert!(matern52(1e3, 1.0).unwrap() < 1e-300);
        let mut prev = 1.0;
        for i in 1..200 {
            let v = matern52(i as f64 * 0.05, 0.7).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(matern52(-0.1, 1.0).is_err());
        assert!(matern52(f64::NAN, 1.0).is_err());
        assert!(matern52(0.5, 0.0).is_err());
        assert!(matern52_d1(f64::INFINITY, 1.0).is_err());
        assert!(matern52_d2(0.1, -1.0).is_err());
        assert!(KernelParams::new(vec![1.0], 0.0).is_err());
        assert!(KernelParams::new(vec![1.0, -2.0], 1.0).is_err());
    }

    #[test]
    fn first_derivative_examples() {
        assert_eq!(matern52_d1(0.0, 1.0).unwrap(), 0.0);
        assert_relative_eq!(
            matern52_d1(0.3, 1.0).unwrap(),
            fd1(0.3, 1.0, 1e-6),
            max_relative = 1e-6
        );
        assert_eq!(
            matern52_d1(-0.7, 0.5).unwrap(),
            -matern52_d1(0.7, 0.5).unwrap()
        );
    }

    #[test]
    fn second_derivative_examples() {
        assert_relative_eq!(matern52_d2(0.0, 1.0).unwrap(), 5.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(fd2(0.0, 1.0, 1e-4), 5.0 / 3.0, max_relative = 1e-5);
        assert_relative_eq!(
            matern52_d2(0.4, 1.0).unwrap(),
            fd2(0.4, 1.0, 1e-4),
            max_relative = 1e-5
        );
        assert_eq!(
            matern52_d2(0.25, 2.0).unwrap(),
            matern52_d2(-0.25, 2.0).unwrap()
        );
    }

    #[test]
    fn derivatives_continuous_through_zero() {
        let l = 0.8;
        let eps = 1e-9;
        assert!(matern52_d1(eps, l).unwrap().abs() < 1e-8);
        assert!(matern52_d1(-eps, l).unwrap().abs() < 1e-8);
        let at0 = matern52_d2(0.0, l).unwrap();
        assert_relative_eq!(matern52_d2(eps, l).unwrap(), at0, max_relative = 1e-7);
        assert_relative_eq!(matern52_d2(-eps, l).unwrap(), at0, max_relative = 1e-7);
    }

    #[test]
    fn product_covariance_two_dims() {
        let p = KernelParams::new(vec![0.5, 2.0], 1.7).unwrap();
        let a = [0.1, 0.9];
        let b = [0.4, 0.2];
        let expected =
            1.7 * matern52(0.3, 0.5).unwrap() * matern52(0.7, 2.0).unwrap();
        assert_relative_eq!(cov_ff(&a, &b, &p).unwrap(), expected, max_relative = 1e-14);
        assert_eq!(cov_ff(&a, &a, &p).unwrap(), 1.7);
        assert_eq!(cov_ff(&a, &b, &p).unwrap(), cov_ff(&b, &a, &p).unwrap());
    }

    #[test]
    fn value_derivative_covariance() {
        let p = KernelParams::new(vec![0.5, 2.0], 1.7).unwrap();
        let a = [0.1, 0.9];
        let b = [0.4, 0.2];
        assert_eq!(cov_fd(&a, &a, 0, &p).unwrap(), 0.0);
        let h = 1e-6;
        let fd = (cov_ff(&[a[0] + h, a[1]], &b, &p).unwrap()
            - cov_ff(&[a[0] - h, a[1]], &b, &p).unwrap())
            / (2.0 * h);
        assert_relative_eq!(cov_fd(&a, &b, 0, &p).unwrap(), fd, max_relative = 1e-6);
        assert_eq!(cov_fd(&a, &b, 1, &p).unwrap(), -cov_fd(&b, &a, 1, &p).unwrap());
        assert!(cov_fd(&a, &b, 2, &p).is_err());
        assert!(cov_fd(&a, &[0.1], 0, &p).is_err());
    }

    #[test]
    fn derivative_derivative_covariance() {
        let p = KernelParams::new(vec![0.5, 2.0], 1.7).unwrap();
        let a = [0.1, 0.9];
        let b = [0.35, 0.6];
        let theta0 = p.theta(0);
        assert_relative_eq!(
            cov_dd(&a, &a, 0, 0, &p).unwrap(),
            1.7 * theta0 * theta0 / 3.0,
            max_relative = 1e-14
        );
        assert_eq!(cov_dd(&a, &a, 0, 1, &p).unwrap(), 0.0);

        let h = 1e-4;
        let ff = |xi: [f64; 2], xj: [f64; 2]| cov_ff(&xi, &xj, &p).unwrap();
        for (k, k2) in [(0, 0), (1, 1), (0, 1), (1, 0)] {
            let mut acc = 0.0;
            for (si, sj, w) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                let mut xi = a;
                let mut xj = b;
                xi[k] += si * h;
                xj[k2] += sj * h;
                acc += w * ff(xi, xj);
            }
            let fd = acc / (4.0 * h * h);
            assert_relative_eq!(cov_dd(&a, &b, k, k2, &p).unwrap(), fd, max_relative = 1e-5);
        }
    }

    proptest! {
        #[test]
        fn derivatives_match_finite_differences(delta in -2.0f64..2.0, l in 0.1f64..3.0) {
            let step = 1e-5;
            let d1 = matern52_d1(delta, l).unwrap();
            let d2 = matern52_d2(delta, l).unwrap();
            let f1 = fd1(delta, l, step);
            let f2 = fd2(delta, l, step);
            // absolute floor for values that are zero up to rounding
            prop_assert!((d1 - f1).abs() <= 1e-4 * d1.abs().max(1e-3));
            prop_assert!((d2 - f2).abs() <= 1e-4 * d2.abs().max(1e-1));
        }
    }
}
