//! Joint Gaussian structure over observed values, predictions and latent
//! partial derivatives, and every log-density factor of the sampling
//! target.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use libm::lgamma as ln_gamma;
use thiserror::Error;

use crate::constraint::log_probit;
use crate::kernel::{site_cov, KernelError, KernelParams};
use crate::linalg::{Factor, FactorFailure, JitterPolicy};
use crate::scmc::Particle;

pub type Point = Vec<f64>;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const SQRT_5: f64 = 2.236_067_977_499_79;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("empty dataset")]
    Empty,
    #[error("input rows have inconsistent dimension: row {row} has {got}, expected {expected}")]
    Ragged { row: usize, expected: usize, got: usize },
    #[error("{inputs} input rows but {outputs} outputs")]
    LengthMismatch { inputs: usize, outputs: usize },
    #[error("non-finite value at row {0}")]
    NonFinite(usize),
    #[error("duplicated input rows {0:?}")]
    Duplicate(Vec<(usize, usize)>),
    #[error("derivative block for dimension {dim} but inputs are {dims}-d")]
    BadDerivativeDim { dim: usize, dims: usize },
    #[error("more than one derivative block for dimension {0}")]
    RepeatedDerivativeDim(usize),
    #[error("covariance of size {size} is not positive definite even with jitter {max_jitter:e} (smallest diagonal {min_diagonal:e})")]
    NotPositiveDefinite {
        size: usize,
        max_jitter: f64,
        min_diagonal: f64,
    },
    #[error("conditional variance {0:e} is not positive")]
    DegenerateVariance(f64),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

impl From<FactorFailure> for GpError {
    fn from(f: FactorFailure) -> Self {
        GpError::NotPositiveDefinite {
            size: f.size,
            max_jitter: f.max_jitter,
            min_diagonal: f.min_diagonal,
        }
    }
}

/// Simulator runs: an `n × d` design and its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Vec<Point>,
    outputs: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Vec<Point>, outputs: Vec<f64>) -> Result<Self, GpError> {
        if inputs.is_empty() {
            return Err(GpError::Empty);
        }
        if inputs.len() != outputs.len() {
            return Err(GpError::LengthMismatch {
                inputs: inputs.len(),
                outputs: outputs.len(),
            });
        }
        let d = inputs[0].len();
        for (row, (x, y)) in inputs.iter().zip(&outputs).enumerate() {
            if x.len() != d {
                return Err(GpError::Ragged {
                    row,
                    expected: d,
                    got: x.len(),
                });
            }
            if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
                return Err(GpError::NonFinite(row));
            }
        }
        let dups = duplicate_rows(&inputs);
        if !dups.is_empty() {
            return Err(GpError::Duplicate(dups));
        }
        Ok(Self { inputs, outputs })
    }

    pub fn inputs(&self) -> &[Point] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.inputs[0].len()
    }

    /// Same design, outputs passed through `f`.
    pub fn map_outputs(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            inputs: self.inputs.clone(),
            outputs: self.outputs.iter().map(|&y| f(y)).collect(),
        }
    }
}

/// Pairs `(i, j)`, `i < j`, of identical rows.
pub fn duplicate_rows(rows: &[Point]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        rows[a]
            .iter()
            .zip(&rows[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut out = Vec::new();
    for w in order.windows(2) {
        if rows[w[0]] == rows[w[1]] {
            out.push((w[0].min(w[1]), w[0].max(w[1])));
        }
    }
    out.sort_unstable();
    out
}

/// Sign of the monotone relationship in one input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increasing,
    Decreasing,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Increasing => 1.0,
            Direction::Decreasing => -1.0,
        }
    }
}

/// Locations carrying a derivative-sign constraint in one input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeBlock {
    pub dim: usize,
    pub direction: Direction,
    pub locations: Vec<Point>,
}

/// Per-dimension derivative input sets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DerivativeSpec {
    blocks: Vec<DerivativeBlock>,
}

impl DerivativeSpec {
    pub fn new(blocks: Vec<DerivativeBlock>) -> Self {
        Self { blocks }
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn blocks(&self) -> &[DerivativeBlock] {
        &self.blocks
    }

    /// `Σ p_k`.
    pub fn total(&self) -> usize {
        self.blocks.iter().map(|b| b.locations.len()).sum()
    }

    pub fn validate(&self, dims: usize) -> Result<(), GpError> {
        let mut seen = Vec::new();
        for b in &self.blocks {
            if b.dim >= dims {
                return Err(GpError::BadDerivativeDim { dim: b.dim, dims });
            }
            if seen.contains(&b.dim) {
                return Err(GpError::RepeatedDerivativeDim(b.dim));
            }
            seen.push(b.dim);
            for x in &b.locations {
                if x.len() != dims {
                    return Err(KernelError::DimensionMismatch {
                        expected: dims,
                        got: x.len(),
                    }
                    .into());
                }
            }
        }
        Ok(())
    }

    /// Keeps only the first `count` locations of every block.
    pub fn truncated(&self, count: usize) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|b| DerivativeBlock {
                    dim: b.dim,
                    direction: b.direction,
                    locations: b.locations.iter().take(count).cloned().collect(),
                })
                .collect(),
        }
    }
}

/// One coordinate of a joint Gaussian vector: either `y(x)` or the oriented
/// partial derivative `sign · ∂y/∂x_k` at `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub x: Point,
    pub deriv: Option<usize>,
    pub sign: f64,
}

impl Site {
    pub fn value(x: Point) -> Self {
        Self {
            x,
            deriv: None,
            sign: 1.0,
        }
    }

    pub fn derivative(x: Point, dim: usize, direction: Direction) -> Self {
        Self {
            x,
            deriv: Some(dim),
            sign: direction.sign(),
        }
    }
}

#[inline]
fn pair_cov(a: &Site, b: &Site, p: &KernelParams) -> f64 {
    a.sign * b.sign * site_cov(&a.x, a.deriv, &b.x, b.deriv, p)
}

fn check_sites(sites: &[Site], p: &KernelParams) -> Result<(), GpError> {
    for s in sites {
        if s.x.len() != p.dims() {
            return Err(KernelError::DimensionMismatch {
                expected: p.dims(),
                got: s.x.len(),
            }
            .into());
        }
        if let Some(k) = s.deriv {
            if k >= p.dims() {
                return Err(KernelError::InvalidDimension { dim: k, dims: p.dims() }.into());
            }
        }
    }
    Ok(())
}

pub(crate) fn cov_matrix(a: &[Site], p: &KernelParams) -> DMatrix<f64> {
    let n = a.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = pair_cov(&a[i], &a[j], p);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

pub(crate) fn cross_matrix(a: &[Site], b: &[Site], p: &KernelParams) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| pair_cov(&a[i], &b[j], p))
}

/// Index ranges of the blocks of the joint vector
/// `(y(X), y(X*), y'_1(X'_1), …, y'_dm(X'_dm))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointLayout {
    observed: usize,
    predictions: usize,
    derivatives: Vec<(usize, usize)>,
}

impl JointLayout {
    pub fn new(observed: usize, predictions: usize, spec: &DerivativeSpec) -> Self {
        Self {
            observed,
            predictions,
            derivatives: spec
                .blocks()
                .iter()
                .map(|b| (b.dim, b.locations.len()))
                .collect(),
        }
    }

    pub fn observed(&self) -> Range<usize> {
        0..self.observed
    }

    pub fn predictions(&self) -> Range<usize> {
        self.observed..self.observed + self.predictions
    }

    /// Range of the `block`-th derivative block.
    pub fn derivative(&self, block: usize) -> Range<usize> {
        let start = self.observed
            + self.predictions
            + self.derivatives[..block].iter().map(|d| d.1).sum::<usize>();
        start..start + self.derivatives[block].1
    }

    pub fn derivative_blocks(&self) -> usize {
        self.derivatives.len()
    }

    /// Range covering all derivative blocks.
    pub fn all_derivatives(&self) -> Range<usize> {
        let start = self.observed + self.predictions;
        start..self.total()
    }

    pub fn total(&self) -> usize {
        self.observed + self.predictions + self.derivatives.iter().map(|d| d.1).sum::<usize>()
    }
}

fn joint_sites(x: &[Point], xstar: &[Point], spec: &DerivativeSpec) -> Vec<Site> {
    let mut sites: Vec<Site> = x.iter().chain(xstar).cloned().map(Site::value).collect();
    for b in spec.blocks() {
        sites.extend(
            b.locations
                .iter()
                .cloned()
                .map(|loc| Site::derivative(loc, b.dim, b.direction)),
        );
    }
    sites
}

/// Joint covariance of `(y(X), y(X*), y'(X'))`. Decreasing directions enter
/// as the negated derivative. Fails when not even the largest jitter makes
/// the matrix factorisable.
pub fn assemble_joint_cov(
    x: &[Point],
    xstar: &[Point],
    spec: &DerivativeSpec,
    p: &KernelParams,
) -> Result<(DMatrix<f64>, JointLayout), GpError> {
    spec.validate(p.dims())?;
    let sites = joint_sites(x, xstar, spec);
    check_sites(&sites, p)?;
    let m = cov_matrix(&sites, p);
    Factor::new(&m, p.variance(), &JitterPolicy::default())?;
    Ok((m, JointLayout::new(x.len(), xstar.len(), spec)))
}

/// Mean and covariance of a Gaussian conditional.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditional {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Conditions a zero-mean GP on `values` observed at `observed` and returns
/// the joint law of `targets`.
pub fn condition(
    observed: &[Site],
    values: &[f64],
    targets: &[Site],
    p: &KernelParams,
    jitter: &JitterPolicy,
) -> Result<Conditional, GpError> {
    check_sites(observed, p)?;
    check_sites(targets, p)?;
    if observed.len() != values.len() {
        return Err(GpError::LengthMismatch {
            inputs: observed.len(),
            outputs: values.len(),
        });
    }
    let prior = cov_matrix(targets, p);
    if observed.is_empty() {
        return Ok(Conditional {
            mean: DVector::zeros(targets.len()),
            cov: prior,
        });
    }
    let k_oo = cov_matrix(observed, p);
    let factor = Factor::exact_or_jittered(&k_oo, p.variance(), jitter)?;
    let k_ot = cross_matrix(observed, targets, p);
    let alpha = factor.whiten(&DVector::from_column_slice(values));
    let v = factor.whiten_matrix(&k_ot);
    let mean = v.tr_mul(&alpha);
    let cov = prior - v.tr_mul(&v);
    Ok(Conditional { mean, cov })
}

/// Conditional law of `targets` given the training outputs:
/// mean `r(·,X) R⁻¹ y`, covariance `r(·,·) − r(·,X) R⁻¹ r(X,·)`.
pub fn gp_conditional(
    train: &Dataset,
    targets: &[Site],
    p: &KernelParams,
) -> Result<Conditional, GpError> {
    let observed: Vec<Site> = train.inputs().iter().cloned().map(Site::value).collect();
    condition(&observed, train.outputs(), targets, p, &JitterPolicy::default())
}

/// Multivariate normal log-density; jitter is added only when the plain
/// Cholesky factorisation fails.
pub fn log_mvn(x: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> Result<f64, GpError> {
    if x.len() != mean.len() || cov.nrows() != x.len() || cov.ncols() != x.len() {
        return Err(GpError::LengthMismatch {
            inputs: x.len(),
            outputs: cov.nrows(),
        });
    }
    let scale = cov.diagonal().iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let factor = Factor::exact_or_jittered(cov, scale, &JitterPolicy::default())?;
    let r = DVector::from_iterator(x.len(), x.iter().zip(mean).map(|(a, b)| a - b));
    let w = factor.whiten(&r);
    Ok(-0.5 * (x.len() as f64 * LN_2PI + factor.log_det() + w.norm_squared()))
}

/// Chi-squared degrees of freedom for the hyperparameter priors: on
/// `√5 / l_k` for each lengthscale and on `σ²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub lengthscale_df: f64,
    pub variance_df: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            lengthscale_df: 1.0,
            variance_df: 5.0,
        }
    }
}

pub fn chi_squared_ln_pdf(x: f64, df: f64) -> f64 {
    if !(x > 0.0 && x.is_finite()) || !(df > 0.0) {
        return f64::NEG_INFINITY;
    }
    let half = 0.5 * df;
    (half - 1.0) * x.ln() - 0.5 * x - half * std::f64::consts::LN_2 - ln_gamma(half)
}

/// Log prior density of `(l, σ²)`, including the Jacobian `√5 / l²` of the
/// map from `θ_k` to `l_k`.
pub fn log_prior(p: &KernelParams, priors: &Priors) -> f64 {
    log_prior_raw(p.lengthscales(), p.variance(), priors)
}

pub(crate) fn log_prior_raw(lengthscales: &[f64], variance: f64, priors: &Priors) -> f64 {
    let mut acc = chi_squared_ln_pdf(variance, priors.variance_df);
    for &l in lengthscales {
        if !(l > 0.0 && l.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let theta = SQRT_5 / l;
        acc += chi_squared_ln_pdf(theta, priors.lengthscale_df) + (SQRT_5 / (l * l)).ln();
    }
    acc
}

/// How `(l, σ²)` are treated by the sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hyperparameters {
    Sampled(Priors),
    Fixed(KernelParams),
}

/// Problem definition shared read-only by all particles.
#[derive(Debug)]
pub struct Model {
    data: Dataset,
    predictions: Vec<Point>,
    spec: DerivativeSpec,
    hyper: Hyperparameters,
    jitter: JitterPolicy,
    layout: JointLayout,
    observed_sites: Vec<Site>,
    latent_sites: Vec<Site>,
    // prediction index -> training index when the prediction repeats a design point
    pinned: Vec<Option<usize>>,
    free_predictions: Vec<usize>,
    observed: DVector<f64>,
    failures: AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            data: self.data.clone(),
            predictions: self.predictions.clone(),
            spec: self.spec.clone(),
            hyper: self.hyper.clone(),
            jitter: self.jitter,
            layout: self.layout.clone(),
            observed_sites: self.observed_sites.clone(),
            latent_sites: self.latent_sites.clone(),
            pinned: self.pinned.clone(),
            free_predictions: self.free_predictions.clone(),
            observed: self.observed.clone(),
            failures: AtomicU64::new(self.failures.load(Ordering::Relaxed)),
        }
    }
}

impl Model {
    pub fn new(
        data: Dataset,
        predictions: Vec<Point>,
        spec: DerivativeSpec,
        hyper: Hyperparameters,
    ) -> Result<Self, GpError> {
        Self::with_jitter(data, predictions, spec, hyper, JitterPolicy::default())
    }

    pub fn with_jitter(
        data: Dataset,
        predictions: Vec<Point>,
        spec: DerivativeSpec,
        hyper: Hyperparameters,
        jitter: JitterPolicy,
    ) -> Result<Self, GpError> {
        let d = data.dims();
        spec.validate(d)?;
        for (row, x) in predictions.iter().enumerate() {
            if x.len() != d {
                return Err(GpError::Ragged {
                    row,
                    expected: d,
                    got: x.len(),
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(GpError::NonFinite(row));
            }
        }
        if let Hyperparameters::Fixed(p) = &hyper {
            if p.dims() != d {
                return Err(KernelError::DimensionMismatch {
                    expected: d,
                    got: p.dims(),
                }
                .into());
            }
        }
        let pinned: Vec<Option<usize>> = predictions
            .iter()
            .map(|x| data.inputs().iter().position(|xi| xi == x))
            .collect();
        let free_predictions: Vec<usize> = (0..predictions.len()).filter(|&j| pinned[j].is_none()).collect();
        let observed_sites = data.inputs().iter().cloned().map(Site::value).collect();
        let mut latent_sites: Vec<Site> = free_predictions
            .iter()
            .map(|&j| Site::value(predictions[j].clone()))
            .collect();
        for b in spec.blocks() {
            latent_sites.extend(
                b.locations
                    .iter()
                    .cloned()
                    .map(|x| Site::derivative(x, b.dim, b.direction)),
            );
        }
        let layout = JointLayout::new(data.len(), predictions.len(), &spec);
        let observed = DVector::from_column_slice(data.outputs());
        Ok(Self {
            data,
            predictions,
            spec,
            hyper,
            jitter,
            layout,
            observed_sites,
            latent_sites,
            pinned,
            free_predictions,
            observed,
            failures: AtomicU64::new(0),
        })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn predictions(&self) -> &[Point] {
        &self.predictions
    }

    pub fn spec(&self) -> &DerivativeSpec {
        &self.spec
    }

    pub fn hyper(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn jitter(&self) -> &JitterPolicy {
        &self.jitter
    }

    pub fn layout(&self) -> &JointLayout {
        &self.layout
    }

    pub fn dims(&self) -> usize {
        self.data.dims()
    }

    /// Length of the sampled `(y*, y')` vector: free predictions plus
    /// derivatives.
    pub fn latent_len(&self) -> usize {
        self.latent_sites.len()
    }

    pub(crate) fn observed_sites(&self) -> &[Site] {
        &self.observed_sites
    }

    pub(crate) fn latent_sites(&self) -> &[Site] {
        &self.latent_sites
    }

    pub fn free_predictions(&self) -> usize {
        self.free_predictions.len()
    }

    /// Number of factorisation failures seen by [`log_target`].
    pub fn failures(&self) -> u64 {
        self.failures.load(Ordering::Relaxed)
    }

    pub(crate) fn record_failure(&self) {
        self.failures.fetch_add(1, Ordering::Relaxed);
    }

    /// Same problem without derivative constraints.
    pub fn unconstrained(&self) -> Self {
        Self::with_jitter(
            self.data.clone(),
            self.predictions.clone(),
            DerivativeSpec::none(),
            self.hyper.clone(),
            self.jitter,
        )
        .expect("already validated")
    }

    /// Concatenation of the free prediction values and derivatives.
    pub fn latent_of(&self, particle: &Particle) -> Vec<f64> {
        let mut z: Vec<f64> = self.free_predictions.iter().map(|&j| particle.ystar[j]).collect();
        z.extend_from_slice(&particle.yprime);
        z
    }

    /// Writes a latent vector back into a particle; pinned predictions copy
    /// the training output.
    pub fn set_latent(&self, particle: &mut Particle, z: &[f64]) {
        let s = self.free_predictions.len();
        particle.ystar.resize(self.predictions.len(), 0.0);
        for (j, pin) in self.pinned.iter().enumerate() {
            if let Some(i) = pin {
                particle.ystar[j] = self.data.outputs()[*i];
            }
        }
        for (slot, &j) in self.free_predictions.iter().enumerate() {
            particle.ystar[j] = z[slot];
        }
        particle.yprime.clear();
        particle.yprime.extend_from_slice(&z[s..]);
    }

    /// Factorisations for a given lengthscale vector.
    pub fn state(&self, lengthscales: &[f64]) -> Result<GpState, GpError> {
        GpState::new(self, lengthscales)
    }

    pub fn log_prior(&self, lengthscales: &[f64], variance: f64) -> f64 {
        match &self.hyper {
            Hyperparameters::Sampled(priors) => log_prior_raw(lengthscales, variance, priors),
            Hyperparameters::Fixed(_) => 0.0,
        }
    }
}

/// Cached factorisations of the joint correlation for fixed lengthscales.
/// All quantities are at unit variance; `σ²` enters in closed form.
#[derive(Debug, Clone)]
pub struct GpState {
    lengthscales: Vec<f64>,
    n: usize,
    logdet_yy: f64,
    quad_y: f64,
    mean: DVector<f64>,
    cond: Option<Factor>,
    jitter_yy: f64,
}

impl GpState {
    fn new(model: &Model, lengthscales: &[f64]) -> Result<Self, GpError> {
        let p = KernelParams::new(lengthscales.to_vec(), 1.0)?;
        if p.dims() != model.dims() {
            return Err(KernelError::DimensionMismatch {
                expected: model.dims(),
                got: p.dims(),
            }
            .into());
        }
        let k_yy = cov_matrix(&model.observed_sites, &p);
        let fy = Factor::new(&k_yy, 1.0, &model.jitter)?;
        let alpha = fy.whiten(&model.observed);
        let quad_y = alpha.norm_squared();
        let (mean, cond) = if model.latent_sites.is_empty() {
            (DVector::zeros(0), None)
        } else {
            let k_yz = cross_matrix(&model.observed_sites, &model.latent_sites, &p);
            let v = fy.whiten_matrix(&k_yz);
            let mean = v.tr_mul(&alpha);
            let s = cov_matrix(&model.latent_sites, &p) - v.tr_mul(&v);
            (mean, Some(Factor::new(&s, 1.0, &model.jitter)?))
        };
        Ok(Self {
            lengthscales: lengthscales.to_vec(),
            n: model.data.len(),
            logdet_yy: fy.log_det(),
            quad_y,
            mean,
            cond,
            jitter_yy: fy.jitter(),
        })
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn latent_len(&self) -> usize {
        self.mean.len()
    }

    /// Conditional mean of the latent vector given `y`.
    pub fn latent_mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Jitter (relative to σ²) used on the training block.
    pub fn jitter(&self) -> f64 {
        self.jitter_yy
    }

    /// `log N(y | 0, σ² R)`.
    pub fn log_marginal(&self, variance: f64) -> f64 {
        let n = self.n as f64;
        -0.5 * (n * LN_2PI + n * variance.ln() + self.logdet_yy + self.quad_y / variance)
    }

    /// `L_S⁻¹ (z − μ)` at unit variance.
    pub fn whiten(&self, z: &[f64]) -> DVector<f64> {
        match &self.cond {
            None => DVector::zeros(0),
            Some(f) => {
                let r = DVector::from_iterator(z.len(), z.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
                f.whiten(&r)
            }
        }
    }

    /// `log N(z | μ, σ² S)` from the squared norm of the whitened residual.
    pub fn log_conditional_whitened(&self, variance: f64, whitened_sq: f64) -> f64 {
        match &self.cond {
            None => 0.0,
            Some(f) => {
                let m = f.dim() as f64;
                -0.5 * (m * LN_2PI + m * variance.ln() + f.log_det() + whitened_sq / variance)
            }
        }
    }

    pub fn log_conditional(&self, variance: f64, z: &[f64]) -> f64 {
        let w = self.whiten(z);
        self.log_conditional_whitened(variance, w.norm_squared())
    }

    /// `L_S ξ`, the unit-variance conditional deviation for standard normal
    /// `ξ`.
    pub fn color(&self, xi: &DVector<f64>) -> DVector<f64> {
        match &self.cond {
            None => DVector::zeros(0),
            Some(f) => f.color(xi),
        }
    }

    /// Exact draw from `N(μ, σ² S)` given standard normals.
    pub fn draw_latent(&self, variance: f64, xi: &DVector<f64>) -> Vec<f64> {
        let dev = self.color(xi);
        let sd = variance.sqrt();
        self.mean.iter().zip(dev.iter()).map(|(m, e)| m + sd * e).collect()
    }
}

/// Components of `log π_τ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetParts {
    pub prior: f64,
    pub marginal: f64,
    pub conditional: f64,
    pub constraint: f64,
}

impl TargetParts {
    pub fn total(&self) -> f64 {
        self.prior + self.marginal + self.conditional + self.constraint
    }
}

pub fn log_target_parts(model: &Model, particle: &Particle, tau: f64) -> Option<TargetParts> {
    let state = match model.state(&particle.lengthscales) {
        Ok(s) => s,
        Err(_) => {
            model.record_failure();
            return None;
        }
    };
    Some(log_target_parts_with(model, &state, particle, tau))
}

pub(crate) fn log_target_parts_with(
    model: &Model,
    state: &GpState,
    particle: &Particle,
    tau: f64,
) -> TargetParts {
    let z = model.latent_of(particle);
    TargetParts {
        prior: model.log_prior(&particle.lengthscales, particle.variance),
        marginal: state.log_marginal(particle.variance),
        conditional: state.log_conditional(particle.variance, &z),
        constraint: log_probit(&particle.yprime, tau),
    }
}

/// Unnormalised `log π_τ(l, σ², y*, y')`; `−∞` when a factorisation fails
/// or a parameter leaves its support.
pub fn log_target(model: &Model, particle: &Particle, tau: f64) -> f64 {
    if !(particle.variance > 0.0) || particle.lengthscales.iter().any(|&l| !(l > 0.0)) {
        return f64::NEG_INFINITY;
    }
    match log_target_parts(model, particle, tau) {
        Some(parts) => {
            let t = parts.total();
            if t.is_nan() {
                f64::NEG_INFINITY
            } else {
                t
            }
        }
        None => f64::NEG_INFINITY,
    }
}

/// Affine map applied to the outputs before fitting: `z = (y − offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseTransform {
    pub offset: f64,
    pub scale: f64,
}

impl Default for ResponseTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl ResponseTransform {
    pub fn identity() -> Self {
        Self {
            offset: 0.0,
            scale: 1.0,
        }
    }

    /// Sample mean and (optionally) sample standard deviation of `y`.
    /// A constant response keeps unit scale.
    pub fn fit(y: &[f64], center: bool, standardize: bool) -> Self {
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let offset = if center { mean } else { 0.0 };
        let scale = if standardize && y.len() > 1 {
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            if var > 0.0 && var.is_finite() {
                var.sqrt()
            } else {
                1.0
            }
        } else {
            1.0
        };
        Self { offset, scale }
    }

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.offset) / self.scale
    }

    pub fn inverse(&self, z: f64) -> f64 {
        self.offset + self.scale * z
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{cov_dd, cov_fd, cov_ff};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(v: &[f64]) -> Vec<Point> {
        v.iter().map(|&x| vec![x]).collect()
    }

    fn toy() -> Dataset {
        Dataset::new(pts(&[0.1, 0.6]), vec![0.5, -0.3]).unwrap()
    }

    #[test]
    fn dataset_validation() {
        assert_eq!(Dataset::new(vec![], vec![]).unwrap_err(), GpError::Empty);
        assert!(matches!(
            Dataset::new(pts(&[0.1, 0.2, 0.1]), vec![1.0, 2.0, 3.0]),
            Err(GpError::Duplicate(d)) if d == vec![(0, 2)]
        ));
        assert!(Dataset::new(pts(&[0.1]), vec![f64::NAN]).is_err());
        assert!(Dataset::new(vec![vec![0.1], vec![0.2, 0.3]], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn joint_without_extras_is_gram_matrix() {
        let p = KernelParams::new(vec![0.4], 2.0).unwrap();
        let x = pts(&[0.0, 0.3, 0.8]);
        let (m, layout) = assemble_joint_cov(&x, &[], &DerivativeSpec::none(), &p).unwrap();
        assert_eq!(layout.total(), 3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m[(i, j)], cov_ff(&x[i], &x[j], &p).unwrap());
            }
        }
    }

    #[test]
    fn joint_small_entries_match_kernel_ops() {
        let p = KernelParams::new(vec![0.7], 1.3).unwrap();
        let x = pts(&[0.2, 0.5]);
        let d = vec![0.35];
        let spec = DerivativeSpec::new(vec![DerivativeBlock {
            dim: 0,
            direction: Direction::Increasing,
            locations: vec![d.clone()],
        }]);
        let (m, layout) = assemble_joint_cov(&x, &[], &spec, &p).unwrap();
        assert_eq!(layout.derivative(0), 2..3);
        assert_eq!(m[(0, 0)], cov_ff(&x[0], &x[0], &p).unwrap());
        assert_eq!(m[(0, 1)], cov_ff(&x[0], &x[1], &p).unwrap());
        assert_eq!(m[(1, 1)], cov_ff(&x[1], &x[1], &p).unwrap());
        assert_eq!(m[(2, 0)], cov_fd(&d, &x[0], 0, &p).unwrap());
        assert_eq!(m[(2, 1)], cov_fd(&d, &x[1], 0, &p).unwrap());
        assert_eq!(m[(0, 2)], m[(2, 0)]);
        assert_eq!(m[(2, 2)], cov_dd(&d, &d, 0, 0, &p).unwrap());
    }

    #[test]
    fn decreasing_direction_negates_cross_blocks() {
        let p = KernelParams::new(vec![0.7], 1.3).unwrap();
        let x = pts(&[0.2, 0.5]);
        let block = |direction| {
            DerivativeSpec::new(vec![DerivativeBlock {
                dim: 0,
                direction,
                locations: pts(&[0.35, 0.9]),
            }])
        };
        let (up, _) = assemble_joint_cov(&x, &[], &block(Direction::Increasing), &p).unwrap();
        let (down, _) = assemble_joint_cov(&x, &[], &block(Direction::Decreasing), &p).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let flip = (i >= 2) != (j >= 2);
                let expected = if flip { -up[(i, j)] } else { up[(i, j)] };
                assert_eq!(down[(i, j)], expected);
            }
        }
    }

    #[test]
    fn conditional_interpolates() {
        let data = toy();
        let p = KernelParams::new(vec![0.3], 1.5).unwrap();
        let targets = vec![Site::value(vec![0.1]), Site::value(vec![0.6])];
        let c = gp_conditional(&data, &targets, &p).unwrap();
        let jitter = 1e-10 * 1.5;
        for i in 0..2 {
            assert!((c.mean[i] - data.outputs()[i]).abs() < 10.0 * jitter);
            assert!(c.cov[(i, i)] <= 10.0 * jitter);
        }
    }

    #[test]
    fn conditional_two_point_hand_algebra() {
        let data = toy();
        let p = KernelParams::new(vec![0.3], 1.5).unwrap();
        let t = vec![0.45];
        let c = gp_conditional(&data, &[Site::value(t.clone())], &p).unwrap();
        let k = |a: &[f64], b: &[f64]| cov_ff(a, b, &p).unwrap();
        let (x0, x1) = (&data.inputs()[0], &data.inputs()[1]);
        let (a, b, d) = (k(x0, x0), k(x0, x1), k(x1, x1));
        let det = a * d - b * b;
        let inv = [[d / det, -b / det], [-b / det, a / det]];
        let r = [k(&t, x0), k(&t, x1)];
        let y = data.outputs();
        let w = [
            r[0] * inv[0][0] + r[1] * inv[1][0],
            r[0] * inv[0][1] + r[1] * inv[1][1],
        ];
        let mean = w[0] * y[0] + w[1] * y[1];
        let var = k(&t, &t) - (w[0] * r[0] + w[1] * r[1]);
        assert_relative_eq!(c.mean[0], mean, max_relative = 1e-8);
        assert_relative_eq!(c.cov[(0, 0)], var, max_relative = 1e-8);
    }

    #[test]
    fn conditional_far_field_reverts_to_prior() {
        let data = toy();
        let p = KernelParams::new(vec![0.1], 2.5).unwrap();
        let c = gp_conditional(&data, &[Site::value(vec![50.0])], &p).unwrap();
        assert!(c.mean[0].abs() < 1e-12);
        assert_relative_eq!(c.cov[(0, 0)], 2.5, max_relative = 1e-12);
    }

    #[test]
    fn log_mvn_scalar_and_at_mean() {
        let cov = DMatrix::from_element(1, 1, 2.0);
        let v = log_mvn(&[1.3], &[0.2], &cov).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI * 2.0).ln() - 0.5 * 1.1f64.powi(2) / 2.0;
        assert_relative_eq!(v, expected, max_relative = 1e-12);

        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 1.5]);
        let at_mean = log_mvn(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &cov).unwrap();
        let det = (cov.clone() * 2.0 * std::f64::consts::PI).determinant();
        assert_relative_eq!(at_mean, -0.5 * det.ln(), max_relative = 1e-10);
    }

    #[test]
    fn log_mvn_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0f64..1.0));
        let cov = &a * a.transpose() + DMatrix::identity(3, 3) * 0.5;
        let x = [0.3, -1.2, 0.8];
        let mu = [0.1, 0.0, -0.4];
        let r = DVector::from_iterator(3, x.iter().zip(&mu).map(|(a, b)| a - b));
        let inv = cov.clone().try_inverse().unwrap();
        let quad = (r.transpose() * inv * &r)[(0, 0)];
        let expected = -0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + quad);
        let v = log_mvn(&x, &mu, &cov).unwrap();
        assert!((v - expected).abs() < 1e-10);
    }

    #[test]
    fn prior_textbook_values() {
        // θ = 1, χ²₁ pdf at 1 is e^{-1/2}/√(2π); Jacobian √5/l² with l = √5.
        let l = SQRT_5;
        let priors = Priors::default();
        let lp = log_prior_raw(&[l], 1.0, &priors) - chi_squared_ln_pdf(1.0, 5.0);
        let pdf = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert_relative_eq!(lp, (pdf * SQRT_5 / (l * l)).ln(), max_relative = 1e-12);
        // χ²₅ pdf at 2: 2^{3/2} e^{-1} / (2^{5/2} Γ(5/2))
        let gamma_5_2 = 0.75 * std::f64::consts::PI.sqrt();
        let expected = (2f64.powf(1.5) * (-1.0f64).exp() / (2f64.powf(2.5) * gamma_5_2)).ln();
        assert_relative_eq!(chi_squared_ln_pdf(2.0, 5.0), expected, max_relative = 1e-12);
    }

    #[test]
    fn prior_edges_and_factorisation() {
        let priors = Priors::default();
        assert!(log_prior_raw(&[1.0], 1e-300, &priors) < log_prior_raw(&[1.0], 1e-3, &priors));
        assert_eq!(log_prior_raw(&[1.0], 0.0, &priors), f64::NEG_INFINITY);
        assert_eq!(log_prior_raw(&[-1.0], 1.0, &priors), f64::NEG_INFINITY);
        let joint = log_prior_raw(&[0.3, 1.7], 2.0, &priors);
        let split = log_prior_raw(&[0.3], 2.0, &priors) + log_prior_raw(&[1.7], 2.0, &priors)
            - chi_squared_ln_pdf(2.0, 5.0);
        assert_relative_eq!(joint, split, max_relative = 1e-12);
    }

    fn toy_model(direction: Direction, y: Vec<f64>) -> Model {
        let data = Dataset::new(pts(&[0.0, 0.3, 0.9]), y).unwrap();
        let spec = DerivativeSpec::new(vec![DerivativeBlock {
            dim: 0,
            direction,
            locations: pts(&[0.5, 0.7]),
        }]);
        Model::new(data, pts(&[0.6, 0.3]), spec, Hyperparameters::Sampled(Priors::default())).unwrap()
    }

    fn particle(ystar: Vec<f64>, yprime: Vec<f64>) -> Particle {
        Particle {
            lengthscales: vec![0.4],
            variance: 1.2,
            ystar,
            yprime,
        }
    }

    #[test]
    fn pinned_predictions_copy_training_values() {
        let model = toy_model(Direction::Increasing, vec![0.0, 1.0, 2.0]);
        assert_eq!(model.latent_len(), 3);
        let mut p = particle(vec![0.0; 2], vec![]);
        model.set_latent(&mut p, &[1.4, 0.3, 0.2]);
        assert_eq!(p.ystar, vec![1.4, 1.0]);
        assert_eq!(p.yprime, vec![0.3, 0.2]);
        assert_eq!(model.latent_of(&p), vec![1.4, 0.3, 0.2]);
    }

    #[test]
    fn target_sums_independent_factors() {
        let model = toy_model(Direction::Increasing, vec![0.0, 1.0, 2.0]);
        let p = particle(vec![1.6, 1.0], vec![0.4, 1.1]);
        let tau = 3.0;
        let total = log_target(&model, &p, tau);

        let kp = KernelParams::new(p.lengthscales.clone(), p.variance).unwrap();
        let x = model.data().inputs().to_vec();
        let (joint, _) = assemble_joint_cov(&x, &[vec![0.6]], model.spec(), &kp).unwrap();
        let mut v = model.data().outputs().to_vec();
        v.push(1.6);
        v.extend_from_slice(&p.yprime);
        let log_joint = log_mvn(&v, &[0.0; 6], &joint).unwrap();
        let expected = log_joint + log_prior(&kp, &Priors::default()) + log_probit(&p.yprime, tau);
        assert_relative_eq!(total, expected, max_relative = 1e-8);
    }

    #[test]
    fn zero_strictness_is_constant_offset() {
        let model = toy_model(Direction::Increasing, vec![0.0, 1.0, 2.0]);
        let a = particle(vec![1.6, 1.0], vec![0.4, -1.1]);
        let mut b = particle(vec![1.2, 1.0], vec![2.0, 0.3]);
        b.lengthscales = vec![0.25];
        b.variance = 0.7;
        for p in [&a, &b] {
            let parts = log_target_parts(&model, p, 0.0).unwrap();
            assert_relative_eq!(parts.constraint, 2.0 * 0.5f64.ln(), max_relative = 1e-15);
            let unconstrained = parts.prior + parts.marginal + parts.conditional;
            assert_relative_eq!(log_target(&model, p, 0.0) - unconstrained, 2.0 * 0.5f64.ln(), max_relative = 1e-12);
        }
    }

    #[test]
    fn strictness_penalises_negative_derivatives() {
        let model = toy_model(Direction::Increasing, vec![0.0, 1.0, 2.0]);
        let p = particle(vec![1.6, 1.0], vec![-0.4, -1.1]);
        let mut prev = log_target(&model, &p, 0.0);
        for tau in [0.5, 1.0, 10.0, 1e3] {
            let cur = log_target(&model, &p, tau);
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn direction_flip_symmetry() {
        let up = toy_model(Direction::Increasing, vec![0.0, 1.0, 2.0]);
        let down = toy_model(Direction::Decreasing, vec![0.0, -1.0, -2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let ystar = vec![rng.gen_range(-2.0..2.0), 1.0];
            let yprime: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = particle(ystar.clone(), yprime.clone());
            // oriented derivatives are the true slopes times the direction sign
            let b = particle(vec![-ystar[0], -1.0], yprime.clone());
            for tau in [0.0, 2.0, 50.0] {
                assert_relative_eq!(
                    log_target(&up, &a, tau),
                    log_target(&down, &b, tau),
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn failed_factorisation_is_negative_infinity() {
        let base = toy_model(Direction::Increasing, vec![0.0, 1.0, 2.0]);
        let tight = JitterPolicy {
            initial: 1e-17,
            max: 1e-17,
            factor: 10.0,
        };
        let model = Model::with_jitter(
            base.data().clone(),
            base.predictions().to_vec(),
            base.spec().clone(),
            base.hyper().clone(),
            tight,
        )
        .unwrap();
        let mut p = particle(vec![1.6, 1.0], vec![0.4, 1.1]);
        p.lengthscales = vec![1e9];
        let before = model.failures();
        assert_eq!(log_target(&model, &p, 1.0), f64::NEG_INFINITY);
        assert_eq!(model.failures(), before + 1);
        p.lengthscales = vec![-0.1];
        assert_eq!(log_target(&model, &p, 1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn transform_round_trip() {
        let t = ResponseTransform::fit(&[1.0, 2.0, 6.0], true, true);
        assert_relative_eq!(t.offset, 3.0);
        assert_relative_eq!(t.inverse(t.forward(4.2)), 4.2, max_relative = 1e-15);
        let c = ResponseTransform::fit(&[2.0, 2.0], true, true);
        assert_eq!(c.scale, 1.0);
    }
}
