//! Sequentially constrained Monte Carlo over the strictness ladder
//! `0 = τ_0 < … < τ_T`: an unconstrained posterior sample is reweighted by
//! the probit ratio, resampled, and rejuvenated with Metropolis–Hastings
//! moves targeting `π_t` at every step.
//!
//! Every particle draws from its own counter-based random stream keyed by
//! `(seed, step, particle index)`, so results do not depend on how the work
//! is scheduled across threads.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraint::{log_probit, TauSchedule};
use crate::gp::{chi_squared_ln_pdf, condition, GpError, GpState, Hyperparameters, Model, Point, Site};
use crate::kernel::KernelParams;
use crate::linalg::Factor;
use crate::par::{self, Execution};

#[derive(Debug, Error)]
pub enum ScmcError {
    #[error("need at least 2 particles, got {0}")]
    TooFewParticles(usize),
    #[error("initial chain failed {failures} of {attempts} factorisations")]
    InitFailures { failures: u64, attempts: u64 },
    #[error("every particle has zero weight at step {step} (τ = {tau:e})")]
    Degenerate { step: usize, tau: f64, trace: Box<Trace> },
    #[error("strictness must increase: {prev:e} -> {next:e}")]
    NotIncreasing { prev: f64, next: f64 },
    #[error("invalid move configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Gp(#[from] GpError),
}

/// One joint state `(l, σ², y*, y')`. `yprime` holds oriented derivatives
/// (multiplied by the monotone direction sign).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub lengthscales: Vec<f64>,
    pub variance: f64,
    pub ystar: Vec<f64>,
    pub yprime: Vec<f64>,
}

impl Particle {
    pub fn satisfies_constraints(&self) -> bool {
        self.yprime.iter().all(|&v| v > 0.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MoveCounts {
    pub proposed: u64,
    pub accepted: u64,
}

impl MoveCounts {
    pub fn rate(&self) -> Option<f64> {
        (self.proposed > 0).then(|| self.accepted as f64 / self.proposed as f64)
    }

    fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += accepted as u64;
    }

    fn merge(&mut self, other: &MoveCounts) {
        self.proposed += other.proposed;
        self.accepted += other.accepted;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub lengthscale: MoveCounts,
    pub variance: MoveCounts,
    pub latent: MoveCounts,
    pub failures: u64,
}

impl AcceptanceStats {
    fn merge(&mut self, other: &AcceptanceStats) {
        self.lengthscale.merge(&other.lengthscale);
        self.variance.merge(&other.variance);
        self.latent.merge(&other.latent);
        self.failures += other.failures;
    }
}

/// Weighted particle population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub particles: Vec<Particle>,
    /// Normalised log weights (`logsumexp = 0`).
    pub logweights: Vec<f64>,
    /// Index into the strictness schedule.
    pub t: usize,
    pub tau: f64,
    pub rng_seed: u64,
    pub acceptance: AcceptanceStats,
}

impl Ensemble {
    pub fn uniform(particles: Vec<Particle>, rng_seed: u64) -> Self {
        let n = particles.len();
        Self {
            particles,
            logweights: vec![-(n as f64).ln(); n],
            t: 0,
            tau: 0.0,
            rng_seed,
            acceptance: AcceptanceStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.logweights.iter().map(|w| w.exp()).collect()
    }

    /// Fraction of weight on particles whose derivatives are all positive.
    pub fn fraction_satisfied(&self) -> f64 {
        self.particles
            .iter()
            .zip(self.weights())
            .filter(|(p, _)| p.satisfies_constraints())
            .map(|(_, w)| w)
            .sum()
    }

    fn normalize(&mut self) -> bool {
        let max = self.logweights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return false;
        }
        let lse = max + self.logweights.iter().map(|w| (w - max).exp()).sum::<f64>().ln();
        for w in &mut self.logweights {
            *w -= lse;
        }
        true
    }
}

/// Proposal covariance for the `(y*, y')` random walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentProposal {
    /// `q · σ² · S_l`, the conditional covariance given `y`.
    Conditional,
    /// `q · Λ_l`, the prior correlation of the latent block.
    PriorCorrelation,
}

/// Step sizes and acceptance-band adaptation for the move kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoveConfig {
    /// Random-walk standard deviation per lengthscale.
    pub rw_scale: Vec<f64>,
    /// `q_t`, variance multiplier of the latent proposal.
    pub latent_scale: f64,
    pub target_band: (f64, f64),
    pub multiplier: f64,
    /// Include `q(σ²_old | σ²_new) / q(σ²_new | σ²_old)` for the
    /// chi-squared variance proposal.
    pub variance_hastings: bool,
    pub latent_proposal: LatentProposal,
}

impl MoveConfig {
    pub fn new(rw_scale: Vec<f64>, latent_scale: f64) -> Self {
        Self {
            rw_scale,
            latent_scale,
            target_band: (0.15, 0.5),
            multiplier: 1.5,
            variance_hastings: true,
            latent_proposal: LatentProposal::Conditional,
        }
    }

    /// Lengthscale steps at half the ensemble spread; latent step
    /// `2.4² / m`.
    pub fn from_ensemble(ens: &Ensemble, latent_len: usize) -> Self {
        let n = ens.len() as f64;
        let d = ens.particles.first().map_or(0, |p| p.lengthscales.len());
        let rw_scale = (0..d)
            .map(|k| {
                let mean = ens.particles.iter().map(|p| p.lengthscales[k]).sum::<f64>() / n;
                let var = ens
                    .particles
                    .iter()
                    .map(|p| (p.lengthscales[k] - mean).powi(2))
                    .sum::<f64>()
                    / n;
                (0.5 * var.sqrt()).max(1e-3 * mean.abs()).max(1e-6)
            })
            .collect();
        let latent_scale = if latent_len == 0 {
            1.0
        } else {
            (2.4f64.powi(2) / latent_len as f64).min(1.0)
        };
        Self::new(rw_scale, latent_scale)
    }

    fn validate(&self, dims: usize) -> Result<(), ScmcError> {
        if self.rw_scale.len() != dims {
            return Err(ScmcError::BadConfig(format!(
                "{} lengthscale step sizes for {dims}-d inputs",
                self.rw_scale.len()
            )));
        }
        if self.rw_scale.iter().chain([&self.latent_scale]).any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(ScmcError::BadConfig("step sizes must be positive".into()));
        }
        if !(self.multiplier > 1.0) || !(self.target_band.0 < self.target_band.1) {
            return Err(ScmcError::BadConfig("bad acceptance band or multiplier".into()));
        }
        Ok(())
    }
}

/// Burn-in and thinning for the unconstrained hyperparameter chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub burnin: usize,
    pub thin: usize,
    pub max_failure_rate: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            burnin: 2000,
            thin: 5,
            max_failure_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Fixed(TauSchedule),
    /// Picks each next τ so that the reweighted ESS stays at or above
    /// `ess_fraction · N`.
    Adaptive {
        tau_final: f64,
        ess_fraction: f64,
        max_steps: usize,
    },
    /// The base ladder, with extra values inserted wherever the next base
    /// step would drop the ESS below `ess_fraction · N`.
    Refined {
        base: TauSchedule,
        ess_fraction: f64,
        max_steps: usize,
    },
}

impl ScheduleMode {
    /// Next strictness after `tau_prev`, and whether it violates the ESS
    /// floor; `None` once the final value has been reached.
    fn next(&self, ens: &Ensemble, tau_prev: f64, step: usize) -> Option<(f64, bool)> {
        let n = ens.len() as f64;
        match self {
            ScheduleMode::Fixed(s) => s.values().get(step + 1).map(|&v| (v, false)),
            ScheduleMode::Adaptive {
                tau_final,
                ess_fraction,
                max_steps,
            } => {
                if tau_prev >= *tau_final {
                    None
                } else if step + 1 >= *max_steps {
                    Some((*tau_final, true))
                } else {
                    Some(adapt_schedule(ens, tau_prev, *tau_final, ess_fraction * n))
                }
            }
            ScheduleMode::Refined {
                base,
                ess_fraction,
                max_steps,
            } => {
                let target = *base.values().iter().find(|&&v| v > tau_prev)?;
                if step + 1 >= *max_steps {
                    Some((target, true))
                } else {
                    Some(adapt_schedule(ens, tau_prev, target, ess_fraction * n))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplePolicy {
    Always,
    /// Resample only when ESS drops below this fraction of N.
    EssBelow(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmcConfig {
    pub n_particles: usize,
    pub init: InitConfig,
    pub schedule: ScheduleMode,
    /// `None` derives step sizes from the initial ensemble.
    pub moves: Option<MoveConfig>,
    pub n_mh: usize,
    pub resample: ResamplePolicy,
    pub adapt: bool,
    pub variance_hastings: bool,
    pub latent_proposal: LatentProposal,
    #[serde(skip)]
    pub execution: Execution,
}

impl ScmcConfig {
    pub fn new(n_particles: usize, schedule: ScheduleMode) -> Self {
        Self {
            n_particles,
            init: InitConfig::default(),
            schedule,
            moves: None,
            n_mh: 5,
            resample: ResamplePolicy::Always,
            adapt: true,
            variance_hastings: true,
            latent_proposal: LatentProposal::Conditional,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub tau: f64,
    /// ESS after reweighting, before resampling.
    pub ess: f64,
    pub resampled: bool,
    pub lengthscale_acceptance: Option<f64>,
    pub variance_acceptance: Option<f64>,
    pub latent_acceptance: Option<f64>,
    pub latent_scale: f64,
    pub rw_scale: Vec<f64>,
    pub fraction_satisfied: f64,
    pub failures: u64,
    /// Set when the adaptive schedule could not keep ESS above its floor.
    pub flagged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub init_acceptance: Option<f64>,
    pub init_failures: u64,
    pub steps: Vec<StepRecord>,
}

const TAG_INIT: u64 = 0x1;
const TAG_MOVE: u64 = 0x2;
const TAG_RESAMPLE: u64 = 0x3;
const TAG_PREDICT: u64 = 0x4;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, step, index, purpose)`.
pub fn stream(seed: u64, step: usize, index: usize, tag: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    h = splitmix(h ^ step as u64);
    h = splitmix(h ^ index as u64);
    h = splitmix(h ^ tag);
    ChaCha8Rng::seed_from_u64(h)
}

fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn chain_target(model: &Model, log_l: &[f64], log_v: f64) -> Option<f64> {
    let l: Vec<f64> = log_l.iter().map(|v| v.exp()).collect();
    let v = log_v.exp();
    let state = model.state(&l).ok()?;
    // random walk on the log scale: add the log-Jacobian
    let lp = model.log_prior(&l, v) + state.log_marginal(v) + log_l.iter().sum::<f64>() + log_v;
    lp.is_finite().then_some(lp)
}

/// Draws `n` particles from the unconstrained (`τ = 0`) posterior:
/// a Metropolis-within-Gibbs chain over `(l, σ²)` on the log scale,
/// followed by an exact Gaussian draw of `(y*, y')` given each retained
/// hyperparameter state.
pub fn mcmc_init(
    model: &Model,
    n: usize,
    init: &InitConfig,
    seed: u64,
    exec: Execution,
) -> Result<(Ensemble, Trace), ScmcError> {
    if n < 2 {
        return Err(ScmcError::TooFewParticles(n));
    }
    let d = model.dims();
    let mut trace = Trace::default();
    let hyper: Vec<(Vec<f64>, f64)> = match model.hyper() {
        Hyperparameters::Fixed(p) => vec![(p.lengthscales().to_vec(), p.variance()); n],
        Hyperparameters::Sampled(_) => {
            let mut rng = stream(seed, 0, usize::MAX, TAG_INIT);
            let y = model.data().outputs();
            let ybar = y.iter().sum::<f64>() / y.len() as f64;
            let var0 = (y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64).max(ybar * ybar).max(1e-12);
            let mut log_l = vec![0.5f64.ln(); d];
            let mut log_v = var0.ln();
            let mut cur = chain_target(model, &log_l, log_v);
            let mut attempts = 0u64;
            let mut failures = 0u64;
            if cur.is_none() {
                // fall back to a prior-typical start
                log_l = vec![5f64.sqrt().ln(); d];
                log_v = 1f64.ln();
                cur = chain_target(model, &log_l, log_v);
            }
            let mut cur = cur.ok_or(ScmcError::InitFailures { failures: 1, attempts: 1 })?;
            let mut step_l = 0.3;
            let mut step_v = 0.3;
            let mut window = (MoveCounts::default(), MoveCounts::default());
            let mut kept = Vec::with_capacity(n);
            let mut accepted_total = 0u64;
            let total_iters = init.burnin + n * init.thin.max(1);
            for it in 0..total_iters {
                let prop: Vec<f64> = log_l
                    .iter()
                    .map(|v| v + step_l * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                attempts += 1;
                let ok = match chain_target(model, &prop, log_v) {
                    Some(t) if (t - cur) >= rng.gen::<f64>().ln() => {
                        log_l = prop;
                        cur = t;
                        true
                    }
                    Some(_) => false,
                    None => {
                        failures += 1;
                        false
                    }
                };
                window.0.record(ok);
                accepted_total += ok as u64;

                let prop_v = log_v + step_v * rng.sample::<f64, _>(StandardNormal);
                attempts += 1;
                let ok = match chain_target(model, &log_l, prop_v) {
                    Some(t) if (t - cur) >= rng.gen::<f64>().ln() => {
                        log_v = prop_v;
                        cur = t;
                        true
                    }
                    Some(_) => false,
                    None => {
                        failures += 1;
                        false
                    }
                };
                window.1.record(ok);
                accepted_total += ok as u64;

                if it < init.burnin && (it + 1) % 100 == 0 {
                    step_l = tune(step_l, window.0.rate().unwrap_or(0.3));
                    step_v = tune(step_v, window.1.rate().unwrap_or(0.3));
                    window = Default::default();
                }
                if it >= init.burnin && (it - init.burnin + 1) % init.thin.max(1) == 0 {
                    kept.push((log_l.iter().map(|v| v.exp()).collect(), log_v.exp()));
                }
            }
            if failures as f64 > init.max_failure_rate * attempts as f64 {
                return Err(ScmcError::InitFailures { failures, attempts });
            }
            trace.init_acceptance = Some(accepted_total as f64 / attempts as f64);
            trace.init_failures = failures;
            kept
        }
    };

    let mut particles: Vec<Particle> = hyper
        .into_iter()
        .map(|(lengthscales, variance)| Particle {
            lengthscales,
            variance,
            ystar: vec![0.0; model.predictions().len()],
            yprime: Vec::new(),
        })
        .collect();
    let m = model.latent_len();
    let results: Vec<Result<(), GpError>> = par::map_indexed(exec, &mut particles, |i, p| {
        let state = model.state(&p.lengthscales)?;
        let mut rng = stream(seed, 0, i, TAG_INIT);
        let xi = standard_normals(&mut rng, m);
        let z = state.draw_latent(p.variance, &xi);
        model.set_latent(p, &z);
        Ok(())
    });
    for r in results {
        r?;
    }
    let mut ens = Ensemble::uniform(particles, seed);
    ens.acceptance.failures = trace.init_failures;
    Ok((ens, trace))
}

/// Robbins–Monro style multiplicative tuning toward 30% acceptance.
fn tune(step: f64, rate: f64) -> f64 {
    let s = step * ((rate - 0.3) * 2.0).exp();
    s.clamp(1e-4, 5.0)
}

/// Multiplies weights by `∏ Φ(τ_next y') / ∏ Φ(τ_prev y')` and
/// renormalises in log space.
pub fn reweight(ens: &mut Ensemble, tau_prev: f64, tau_next: f64) -> Result<(), ScmcError> {
    if tau_next < tau_prev {
        return Err(ScmcError::NotIncreasing {
            prev: tau_prev,
            next: tau_next,
        });
    }
    for (w, p) in ens.logweights.iter_mut().zip(&ens.particles) {
        *w += log_probit(&p.yprime, tau_next) - log_probit(&p.yprime, tau_prev);
    }
    if !ens.normalize() {
        return Err(ScmcError::Degenerate {
            step: ens.t,
            tau: tau_next,
            trace: Box::default(),
        });
    }
    ens.tau = tau_next;
    Ok(())
}

/// `1 / Σ W_i²` of normalised weights.
pub fn ess(ens: &Ensemble) -> f64 {
    ess_of(&ens.logweights)
}

fn ess_of(logweights: &[f64]) -> f64 {
    let max = logweights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (s1, s2) = logweights.iter().fold((0.0, 0.0), |(a, b), w| {
        let e = (w - max).exp();
        (a + e, b + e * e)
    });
    s1 * s1 / s2
}

/// Systematic resampling; weights reset to `1/N`.
pub fn resample(ens: &mut Ensemble, seed: u64) {
    let n = ens.len();
    let picks = systematic_indices(&ens.weights(), &mut stream(seed, ens.t, usize::MAX, TAG_RESAMPLE));
    ens.particles = picks.iter().map(|&i| ens.particles[i].clone()).collect();
    ens.logweights = vec![-(n as f64).ln(); n];
}

/// Indices selected by one systematic sweep over normalised `weights`.
pub fn systematic_indices<R: Rng>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let u0: f64 = rng.gen::<f64>();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0] / total * n as f64;
    let mut i = 0;
    for j in 0..n {
        let u = u0 + j as f64;
        while u >= cum && i < n - 1 {
            i += 1;
            cum += weights[i] / total * n as f64;
        }
        out.push(i);
    }
    out
}

struct Cursor {
    state: GpState,
    whitened: DVector<f64>,
    prior_factor: Option<Factor>,
}

fn latent_prior_factor(model: &Model, lengthscales: &[f64]) -> Option<Factor> {
    let p = KernelParams::new(lengthscales.to_vec(), 1.0).ok()?;
    let c = crate::gp::cov_matrix(model.latent_sites(), &p);
    Factor::new(&c, 1.0, model.jitter()).ok()
}

fn cursor(model: &Model, p: &Particle, cfg: &MoveConfig) -> Option<Cursor> {
    let state = model.state(&p.lengthscales).ok()?;
    let whitened = state.whiten(&model.latent_of(p));
    let prior_factor = match cfg.latent_proposal {
        LatentProposal::Conditional => None,
        LatentProposal::PriorCorrelation => Some(latent_prior_factor(model, &p.lengthscales)?),
    };
    Some(Cursor {
        state,
        whitened,
        prior_factor,
    })
}

/// Draw from `χ²(df)`; `None` when `df` is too small to sample.
fn chi_squared_draw<R: Rng>(df: f64, rng: &mut R) -> Option<f64> {
    let dist = ChiSquared::new(df).ok()?;
    let v: f64 = dist.sample(rng);
    (v.is_finite() && v > 0.0).then_some(v)
}

fn accept<R: Rng>(log_ratio: f64, rng: &mut R) -> bool {
    log_ratio >= 0.0 || (log_ratio.is_finite() && rng.gen::<f64>().ln() < log_ratio)
}

/// `n_mh` Metropolis–Hastings sweeps of one particle targeting `π_τ`.
fn move_one(
    model: &Model,
    p: &mut Particle,
    tau: f64,
    cfg: &MoveConfig,
    n_mh: usize,
    rng: &mut ChaCha8Rng,
) -> AcceptanceStats {
    let mut stats = AcceptanceStats::default();
    let Some(mut cur) = cursor(model, p, cfg) else {
        stats.failures += 1;
        model.record_failure();
        return stats;
    };
    let sample_hyper = matches!(model.hyper(), Hyperparameters::Sampled(_));
    let m = model.latent_len();
    let mut constraint = log_probit(&p.yprime, tau);
    for _ in 0..n_mh {
        if sample_hyper {
            // lengthscales
            let proposal: Vec<f64> = p
                .lengthscales
                .iter()
                .zip(&cfg.rw_scale)
                .map(|(l, s)| l + s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut accepted = false;
            if proposal.iter().all(|&l| l > 0.0) {
                let mut trial = p.clone();
                trial.lengthscales = proposal;
                match cursor(model, &trial, cfg) {
                    Some(next) => {
                        let wsq = cur.whitened.norm_squared();
                        let old = model.log_prior(&p.lengthscales, p.variance)
                            + cur.state.log_marginal(p.variance)
                            + cur.state.log_conditional_whitened(p.variance, wsq);
                        let nsq = next.whitened.norm_squared();
                        let new = model.log_prior(&trial.lengthscales, p.variance)
                            + next.state.log_marginal(p.variance)
                            + next.state.log_conditional_whitened(p.variance, nsq);
                        if accept(new - old, rng) {
                            p.lengthscales = trial.lengthscales;
                            cur = next;
                            accepted = true;
                        }
                    }
                    None => {
                        stats.failures += 1;
                        model.record_failure();
                    }
                }
            }
            stats.lengthscale.record(accepted);

            // variance: χ² proposal with df equal to the current value
            let mut accepted = false;
            if let Some(v_new) = chi_squared_draw(p.variance, rng) {
                let wsq = cur.whitened.norm_squared();
                let at = |v: f64| {
                    model.log_prior(&p.lengthscales, v)
                        + cur.state.log_marginal(v)
                        + cur.state.log_conditional_whitened(v, wsq)
                };
                let mut ratio = at(v_new) - at(p.variance);
                if cfg.variance_hastings {
                    ratio += chi_squared_ln_pdf(p.variance, v_new) - chi_squared_ln_pdf(v_new, p.variance);
                }
                if accept(ratio, rng) {
                    p.variance = v_new;
                    accepted = true;
                }
            }
            stats.variance.record(accepted);
        }

        if m > 0 {
            let xi = standard_normals(rng, m);
            let z = model.latent_of(p);
            let (z_new, w_new) = match &cur.prior_factor {
                None => {
                    let step = (cfg.latent_scale * p.variance).sqrt();
                    let dev = cur.state.color(&xi);
                    let z_new: Vec<f64> = z.iter().zip(dev.iter()).map(|(a, e)| a + step * e).collect();
                    let w_new = &cur.whitened + &xi * step;
                    (z_new, w_new)
                }
                Some(f) => {
                    let dev = f.color(&xi);
                    let step = cfg.latent_scale.sqrt();
                    let z_new: Vec<f64> = z.iter().zip(dev.iter()).map(|(a, e)| a + step * e).collect();
                    let w_new = cur.state.whiten(&z_new);
                    (z_new, w_new)
                }
            };
            let mut trial = p.clone();
            model.set_latent(&mut trial, &z_new);
            let c_new = log_probit(&trial.yprime, tau);
            let old = cur.state.log_conditional_whitened(p.variance, cur.whitened.norm_squared()) + constraint;
            let new = cur.state.log_conditional_whitened(p.variance, w_new.norm_squared()) + c_new;
            let ok = accept(new - old, rng);
            if ok {
                *p = trial;
                cur.whitened = w_new;
                constraint = c_new;
            }
            stats.latent.record(ok);
        }
    }
    stats
}

/// Advances every particle by `n_mh` sweeps of the `π_τ`-invariant kernel.
pub fn move_particles(
    ens: &mut Ensemble,
    model: &Model,
    tau: f64,
    cfg: &MoveConfig,
    n_mh: usize,
    exec: Execution,
) -> Result<AcceptanceStats, ScmcError> {
    cfg.validate(model.dims())?;
    let seed = ens.rng_seed;
    let t = ens.t;
    let per: Vec<AcceptanceStats> = par::map_indexed(exec, &mut ens.particles, |i, p| {
        let mut rng = stream(seed, t, i, TAG_MOVE);
        move_one(model, p, tau, cfg, n_mh, &mut rng)
    });
    let mut stats = AcceptanceStats::default();
    for s in &per {
        stats.merge(s);
    }
    ens.acceptance = stats;
    Ok(stats)
}

/// Widens a step size when acceptance is above the band, shrinks it when
/// below, per move type.
pub fn adapt_steps(cfg: &MoveConfig, stats: &AcceptanceStats) -> MoveConfig {
    let mut out = cfg.clone();
    let (lo, hi) = cfg.target_band;
    let factor = |rate: Option<f64>| match rate {
        Some(r) if r < lo => 1.0 / cfg.multiplier,
        Some(r) if r > hi => cfg.multiplier,
        _ => 1.0,
    };
    let fl = factor(stats.lengthscale.rate());
    for s in &mut out.rw_scale {
        *s = (*s * fl).clamp(1e-12, 1e12);
    }
    out.latent_scale = (out.latent_scale * factor(stats.latent.rate())).clamp(1e-12, 1e3);
    out
}

/// Largest `τ ∈ (tau_current, tau_target]` whose reweighting keeps the ESS
/// at or above `ess_floor`. The second value is `true` when no admissible
/// increment exists and a minimal one was returned.
pub fn adapt_schedule(ens: &Ensemble, tau_current: f64, tau_target: f64, ess_floor: f64) -> (f64, bool) {
    let base: Vec<f64> = ens.particles.iter().map(|p| log_probit(&p.yprime, tau_current)).collect();
    let ess_at = |tau: f64| {
        let lw: Vec<f64> = ens
            .logweights
            .iter()
            .zip(&ens.particles)
            .zip(&base)
            .map(|((w, p), b)| w + log_probit(&p.yprime, tau) - b)
            .collect();
        ess_of(&lw)
    };
    let ok = |tau: f64| {
        let e = ess_at(tau);
        e.is_finite() && e >= ess_floor
    };
    if ok(tau_target) {
        return (tau_target, false);
    }
    // coarse scan for the first failing value, then bisection
    const GRID: usize = 64;
    let start = if tau_current > 0.0 { tau_current } else { tau_target * 1e-12 };
    let ratio = (tau_target / start).powf(1.0 / GRID as f64);
    let mut lo = tau_current;
    let mut hi = tau_target;
    let mut cand = start;
    for _ in 0..GRID {
        cand *= ratio;
        if cand <= tau_current {
            continue;
        }
        if ok(cand) {
            lo = cand;
        } else {
            hi = cand;
            break;
        }
    }
    for _ in 0..80 {
        let mid = if lo > 0.0 { (lo * hi).sqrt() } else { 0.5 * (lo + hi) };
        if !(mid > lo && mid < hi) {
            break;
        }
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo > tau_current {
        (lo, false)
    } else {
        let bump = if tau_current > 0.0 { tau_current * (1.0 + 1e-6) } else { tau_target * 1e-12 };
        (bump, true)
    }
}

/// Runs the full sampler. `observe` is called after the initial draw
/// (step 0) and after every move step.
pub fn scmc_run_with<F>(
    model: &Model,
    cfg: &ScmcConfig,
    seed: u64,
    mut observe: F,
) -> Result<(Ensemble, Trace), ScmcError>
where
    F: FnMut(usize, &Ensemble),
{
    let (mut ens, mut trace) = mcmc_init(model, cfg.n_particles, &cfg.init, seed, cfg.execution)?;
    let n = ens.len() as f64;
    let mut moves = match &cfg.moves {
        Some(m) => m.clone(),
        None => {
            let mut m = MoveConfig::from_ensemble(&ens, model.latent_len());
            m.variance_hastings = cfg.variance_hastings;
            m.latent_proposal = cfg.latent_proposal;
            m
        }
    };
    moves.validate(model.dims())?;
    trace.steps.push(StepRecord {
        step: 0,
        tau: 0.0,
        ess: n,
        resampled: false,
        lengthscale_acceptance: None,
        variance_acceptance: None,
        latent_acceptance: None,
        latent_scale: moves.latent_scale,
        rw_scale: moves.rw_scale.clone(),
        fraction_satisfied: ens.fraction_satisfied(),
        failures: trace.init_failures,
        flagged: false,
    });
    observe(0, &ens);

    let mut tau_prev = 0.0;
    let mut step = 0usize;
    while let Some((tau, flagged)) = cfg.schedule.next(&ens, tau_prev, step) {
        step += 1;
        ens.t = step;
        if let Err(ScmcError::Degenerate { step, tau, .. }) = reweight(&mut ens, tau_prev, tau) {
            return Err(ScmcError::Degenerate {
                step,
                tau,
                trace: Box::new(trace),
            });
        }
        let ess_before = ess(&ens);
        let resampled = match cfg.resample {
            ResamplePolicy::Always => true,
            ResamplePolicy::EssBelow(f) => ess_before < f * n,
        };
        if resampled {
            resample(&mut ens, seed);
        }
        let stats = move_particles(&mut ens, model, tau, &moves, cfg.n_mh, cfg.execution)?;
        trace.steps.push(StepRecord {
            step,
            tau,
            ess: ess_before,
            resampled,
            lengthscale_acceptance: stats.lengthscale.rate(),
            variance_acceptance: stats.variance.rate(),
            latent_acceptance: stats.latent.rate(),
            latent_scale: moves.latent_scale,
            rw_scale: moves.rw_scale.clone(),
            fraction_satisfied: ens.fraction_satisfied(),
            failures: stats.failures,
            flagged,
        });
        if cfg.adapt {
            moves = adapt_steps(&moves, &stats);
        }
        observe(step, &ens);
        tau_prev = tau;
    }
    Ok((ens, trace))
}

pub fn scmc_run(model: &Model, cfg: &ScmcConfig, seed: u64) -> Result<(Ensemble, Trace), ScmcError> {
    scmc_run_with(model, cfg, seed, |_, _| {})
}

/// Posterior summary of one scalar quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q500: f64,
    pub q975: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub points: Vec<PointSummary>,
}

/// Sample quantile with linear interpolation between order statistics
/// (R's default, type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn weighted_quantile(pairs: &[(f64, f64)], q: f64) -> f64 {
    let mut cum = 0.0;
    for &(v, w) in pairs {
        cum += w;
        if cum >= q {
            return v;
        }
    }
    pairs.last().map_or(f64::NAN, |p| p.0)
}

/// Summary of weighted scalar samples; equal weights use type-7 quantiles.
pub fn summarize_values(values: &[f64], weights: &[f64]) -> PointSummary {
    let total: f64 = weights.iter().sum();
    let uniform = weights.windows(2).all(|w| (w[0] - w[1]).abs() <= 1e-12 * total);
    let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
    let var = values.iter().zip(weights).map(|(v, w)| w * (v - mean).powi(2)).sum::<f64>() / total;
    let (q025, q500, q975) = if uniform {
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        (quantile_sorted(&s, 0.025), quantile_sorted(&s, 0.5), quantile_sorted(&s, 0.975))
    } else {
        let mut pairs: Vec<(f64, f64)> = values.iter().zip(weights).map(|(v, w)| (*v, w / total)).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        (
            weighted_quantile(&pairs, 0.025),
            weighted_quantile(&pairs, 0.5),
            weighted_quantile(&pairs, 0.975),
        )
    };
    PointSummary {
        mean,
        sd: var.sqrt(),
        q025,
        q500,
        q975,
        width: (q975 - q025).max(0.0),
    }
}

/// Per-prediction-point posterior summary of `y*`, optionally mapped
/// through `map` (e.g. undoing a response transform).
pub fn summarize_mapped(ens: &Ensemble, map: impl Fn(f64) -> f64) -> PosteriorSummary {
    let s = ens.particles.first().map_or(0, |p| p.ystar.len());
    let w = ens.weights();
    let points = (0..s)
        .map(|j| {
            let vals: Vec<f64> = ens.particles.iter().map(|p| map(p.ystar[j])).collect();
            summarize_values(&vals, &w)
        })
        .collect();
    PosteriorSummary { points }
}

pub fn summarize(ens: &Ensemble) -> PosteriorSummary {
    summarize_mapped(ens, |v| v)
}

/// One exact draw of `y` at `points` per particle, conditioning on the
/// training outputs and the particle's own `(y*, y')`. Points that coincide
/// with a conditioning site return that site's value.
pub fn predict_draws(
    model: &Model,
    ens: &Ensemble,
    points: &[Point],
    seed: u64,
    exec: Execution,
) -> Result<Vec<Vec<f64>>, ScmcError> {
    let mut sites = model.observed_sites().to_vec();
    sites.extend_from_slice(model.latent_sites());
    let known: Vec<Option<usize>> = points
        .iter()
        .map(|x| {
            let s = Site::value(x.clone());
            sites.iter().position(|t| *t == s)
        })
        .collect();
    let free: Vec<usize> = (0..points.len()).filter(|&j| known[j].is_none()).collect();
    let targets: Vec<Site> = free.iter().map(|&j| Site::value(points[j].clone())).collect();
    let mut particles = ens.particles.clone();
    let results: Vec<Result<Vec<f64>, GpError>> = par::map_indexed(exec, &mut particles, |i, p| {
        let kp = KernelParams::new(p.lengthscales.clone(), p.variance)?;
        let mut values = model.data().outputs().to_vec();
        values.extend(model.latent_of(p));
        let mut out: Vec<f64> = known.iter().map(|k| k.map_or(f64::NAN, |k| values[k])).collect();
        if !targets.is_empty() {
            let c = condition(&sites, &values, &targets, &kp, model.jitter())?;
            let f = Factor::new(&c.cov, p.variance, model.jitter())?;
            let xi = standard_normals(&mut stream(seed, usize::MAX, i, TAG_PREDICT), targets.len());
            let dev = f.color(&xi);
            for (k, &j) in free.iter().enumerate() {
                out[j] = c.mean[k] + dev[k];
            }
        }
        Ok(out)
    });
    Ok(results.into_iter().collect::<Result<Vec<_>, _>>()?)
}

/// Per-point summary of `draws[particle][point]`, mapped through `map`.
pub fn summarize_draws(draws: &[Vec<f64>], weights: &[f64], map: impl Fn(f64) -> f64) -> PosteriorSummary {
    let s = draws.first().map_or(0, |d| d.len());
    let points = (0..s)
        .map(|j| {
            let vals: Vec<f64> = draws.iter().map(|d| map(d[j])).collect();
            summarize_values(&vals, weights)
        })
        .collect();
    PosteriorSummary { points }
}
