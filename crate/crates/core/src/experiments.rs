//! Test functions, evaluation metrics and end-to-end experiment drivers.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraint::{default_schedule, ConstraintError, TauSchedule};
use crate::design::{lhd, place_gap_grid, place_plus_shape, DesignError, InputBox};
use crate::gp::{
    Dataset, DerivativeBlock, DerivativeSpec, Direction, GpError, Hyperparameters, Model, Point, Priors,
    ResponseTransform,
};
use crate::kernel::KernelParams;
use crate::linalg::JitterPolicy;
use crate::par::Execution;
use crate::scmc::{
    mcmc_init, scmc_run_with, stream, summarize_mapped, summarize_values, Ensemble, InitConfig, LatentProposal,
    MoveConfig, PointSummary, PosteriorSummary, ResamplePolicy, ScheduleMode, ScmcConfig, ScmcError, Trace,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{what}: expected {expected} values, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("point ({x1}, {x2}) is outside the domain x1 + x2 < {rho}")]
    Domain { x1: f64, x2: f64, rho: f64 },
    #[error("replicate count must be at least 1")]
    NoReplicates,
    #[error("invalid setting `{field}`: {message}")]
    Setting { field: &'static str, message: String },
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Scmc(#[from] ScmcError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Schedule(#[from] ConstraintError),
}

pub fn testfn_example1(x: f64) -> f64 {
    (20.0 * x + 1.0).ln()
}

pub fn testfn_example2(x1: f64, x2: f64) -> f64 {
    11.0 * x1.powi(10) + 10.0 * x2.powi(9) + 9.0 * x1.powi(8) + 8.0 * x2.powi(7) + 7.0 * x1.powi(6)
}

/// `c·s / (ρ − s)` with `s = x1 + x2`: nearly flat near the origin and
/// diverging at the boundary `s = ρ`.
pub fn testfn_flat_steep(x1: f64, x2: f64, rho: f64) -> Result<f64, ExperimentError> {
    const C: f64 = 1.0;
    let s = x1 + x2;
    if !(s < rho) || !s.is_finite() {
        return Err(ExperimentError::Domain { x1, x2, rho });
    }
    Ok(C * s / (rho - s))
}

/// `Σ_{i,j ≤ 10} γ_ij x1^i x2^j` with `γ_ij = (i+1)(j+1)β`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub beta: f64,
    pub coefficients: Vec<Vec<f64>>,
}

impl Polynomial {
    pub const DEGREE: usize = 10;

    pub fn from_beta(beta: f64) -> Self {
        let coefficients = (0..=Self::DEGREE)
            .map(|i| (0..=Self::DEGREE).map(|j| ((i + 1) * (j + 1)) as f64 * beta).collect())
            .collect();
        Self { beta, coefficients }
    }

    pub fn eval(&self, x1: f64, x2: f64) -> f64 {
        let mut acc = 0.0;
        let mut p1 = 1.0;
        for row in &self.coefficients {
            let mut p2 = 1.0;
            let mut inner = 0.0;
            for g in row {
                inner += g * p2;
                p2 *= x2;
            }
            acc += p1 * inner;
            p1 *= x1;
        }
        acc
    }
}

/// One shared `β ~ Gamma(shape 0.01, rate 1)` per surface.
pub fn random_polynomial(seed: u64) -> Polynomial {
    let mut rng = stream(seed, 0, 0, 0x90_1e);
    let beta = Gamma::new(0.01, 1.0).expect("valid gamma").sample(&mut rng);
    Polynomial::from_beta(beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub awoci: f64,
    /// `truth ∈ (Q.025, Q.975)` per point.
    pub covered: Vec<bool>,
}

pub fn metrics(preds: &PosteriorSummary, truth: &[f64]) -> Result<Metrics, ExperimentError> {
    if preds.points.len() != truth.len() {
        return Err(ExperimentError::Length {
            what: "truth",
            expected: preds.points.len(),
            got: truth.len(),
        });
    }
    let n = truth.len() as f64;
    let rmse = (preds
        .points
        .iter()
        .zip(truth)
        .map(|(p, t)| (p.mean - t).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let awoci = preds.points.iter().map(|p| p.q975 - p.q025).sum::<f64>() / n;
    let covered = preds
        .points
        .iter()
        .zip(truth)
        .map(|(p, &t)| p.q025 < t && t < p.q975)
        .collect();
    Ok(Metrics { rmse, awoci, covered })
}

/// Sampler and preprocessing settings shared by the experiment drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSettings {
    pub n_particles: usize,
    pub steps: usize,
    pub tau_final: f64,
    pub n_mh: usize,
    pub seed: u64,
    pub init: InitConfig,
    pub center: bool,
    pub standardize: bool,
    pub variance_hastings: bool,
    pub latent_proposal: LatentProposal,
    pub resample: ResamplePolicy,
    /// Explicit strictness ladder starting at 0; overrides `steps` and
    /// `tau_final`.
    pub schedule: Option<Vec<f64>>,
    /// ESS floor, as a fraction of N, below which extra strictness values
    /// are inserted into the ladder; 0 keeps the ladder as is.
    pub refine_ess: f64,
    /// Initial step sizes; derived from the initial ensemble when absent.
    pub moves: Option<MoveConfig>,
    pub adapt: bool,
    pub jitter: JitterPolicy,
    pub priors: Priors,
    /// Holds `(l, σ²)` fixed instead of sampling them; the variance is on
    /// the transformed response scale.
    pub fixed: Option<KernelParams>,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            n_particles: 2000,
            steps: 20,
            tau_final: 1e6,
            n_mh: 5,
            seed: 7,
            init: InitConfig::default(),
            center: true,
            standardize: false,
            variance_hastings: true,
            latent_proposal: LatentProposal::Conditional,
            resample: ResamplePolicy::Always,
            schedule: None,
            refine_ess: 0.5,
            moves: None,
            adapt: true,
            jitter: JitterPolicy::default(),
            priors: Priors::default(),
            fixed: None,
            execution: Execution::default(),
        }
    }
}

impl RunSettings {
    pub fn full_scale() -> Self {
        Self {
            n_particles: 40_000,
            ..Self::default()
        }
    }

    /// Range checks on every field; also builds the schedule.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |field, message: &str| {
            Err(ExperimentError::Setting {
                field,
                message: message.into(),
            })
        };
        if self.n_particles < 2 {
            return bad("n_particles", "need at least 2 particles");
        }
        if self.steps == 0 {
            return bad("steps", "need at least 1 step");
        }
        if !(self.tau_final.is_finite() && self.tau_final > 0.0) {
            return bad("tau_final", "must be positive and finite");
        }
        if self.n_mh == 0 {
            return bad("n_mh", "need at least 1 sweep per step");
        }
        if !(0.0..1.0).contains(&self.refine_ess) {
            return bad("refine_ess", "must lie in [0, 1)");
        }
        if self.init.thin == 0 || !(0.0..=1.0).contains(&self.init.max_failure_rate) {
            return bad("init", "thin must be positive and max_failure_rate in [0, 1]");
        }
        if !self.jitter.is_valid() {
            return bad("jitter", "need 0 < initial <= max and factor > 1");
        }
        let pr = &self.priors;
        if !(pr.lengthscale_df > 0.0 && pr.variance_df > 0.0) {
            return bad("priors", "degrees of freedom must be positive");
        }
        if let ResamplePolicy::EssBelow(f) = self.resample {
            if !(0.0..=1.0).contains(&f) {
                return bad("resample", "ESS fraction must lie in [0, 1]");
            }
        }
        self.scmc_config().map(|_| ())
    }

    pub fn scmc_config(&self) -> Result<ScmcConfig, ExperimentError> {
        let base = match &self.schedule {
            Some(v) => TauSchedule::new(v.clone())?,
            None => default_schedule(self.tau_final, self.steps)?,
        };
        let schedule = if self.refine_ess > 0.0 {
            ScheduleMode::Refined {
                max_steps: 10 * base.steps(),
                base,
                ess_fraction: self.refine_ess,
            }
        } else {
            ScheduleMode::Fixed(base)
        };
        let mut cfg = ScmcConfig::new(self.n_particles, schedule);
        cfg.init = self.init;
        cfg.n_mh = self.n_mh;
        cfg.resample = self.resample;
        cfg.variance_hastings = self.variance_hastings;
        cfg.latent_proposal = self.latent_proposal;
        cfg.execution = self.execution;
        cfg.moves = self.moves.clone();
        cfg.adapt = self.adapt;
        Ok(cfg)
    }
}

/// A fitted ensemble with its response transform undone in the summary.
#[derive(Debug, Clone)]
pub struct Fit {
    pub model: Model,
    pub ensemble: Ensemble,
    pub trace: Trace,
    pub transform: ResponseTransform,
    pub summary: PosteriorSummary,
}

/// Fits the GP with the given derivative set. An empty set stops after
/// the unconstrained draw.
pub fn fit(
    data: &Dataset,
    predictions: Vec<Point>,
    spec: DerivativeSpec,
    settings: &RunSettings,
    seed: u64,
    observe: Option<&mut dyn FnMut(usize, &Ensemble)>,
) -> Result<Fit, ExperimentError> {
    let transform = ResponseTransform::fit(data.outputs(), settings.center, settings.standardize);
    let scaled = data.map_outputs(|y| transform.forward(y));
    let model = Model::with_jitter(
        scaled,
        predictions,
        spec,
        match &settings.fixed {
            Some(p) => Hyperparameters::Fixed(p.clone()),
            None => Hyperparameters::Sampled(settings.priors),
        },
        settings.jitter,
    )?;
    let cfg = settings.scmc_config()?;
    let mut noop = |_: usize, _: &Ensemble| {};
    let observe: &mut dyn FnMut(usize, &Ensemble) = match observe {
        Some(f) => f,
        None => &mut noop,
    };
    let (ensemble, trace) = if model.spec().total() == 0 {
        let (e, mut t) = mcmc_init(&model, cfg.n_particles, &cfg.init, seed, cfg.execution)?;
        t.steps.clear();
        observe(0, &e);
        (e, t)
    } else {
        scmc_run_with(&model, &cfg, seed, observe)?
    };
    let summary = summarize_mapped(&ensemble, |v| transform.inverse(v));
    Ok(Fit {
        model,
        ensemble,
        trace,
        transform,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub rmse: Vec<f64>,
    pub awoci: Vec<f64>,
    pub coverage: f64,
    pub covered: usize,
    pub total: usize,
}

impl MethodMetrics {
    fn from_metrics(all: &[Metrics]) -> Self {
        let covered = all.iter().flat_map(|m| &m.covered).filter(|&&c| c).count();
        let total = all.iter().map(|m| m.covered.len()).sum();
        Self {
            rmse: all.iter().map(|m| m.rmse).collect(),
            awoci: all.iter().map(|m| m.awoci).collect(),
            coverage: if total > 0 { covered as f64 / total as f64 } else { f64::NAN },
            covered,
            total,
        }
    }

    pub fn median_rmse(&self) -> f64 {
        median(&self.rmse)
    }

    pub fn median_awoci(&self) -> f64 {
        median(&self.awoci)
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    crate::scmc::quantile_sorted(&s, 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub n_particles: usize,
    pub steps: usize,
    pub tau_final: f64,
    pub seed: u64,
}

impl From<&RunSettings> for RunMeta {
    fn from(s: &RunSettings) -> Self {
        Self {
            n_particles: s.n_particles,
            steps: s.steps,
            tau_final: s.tau_final,
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub unconstrained: MethodMetrics,
    pub monotone: MethodMetrics,
    pub failed_replicates: usize,
    pub meta: RunMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub x: Vec<f64>,
    pub truth: f64,
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
}

fn curve(points: &[Point], summary: &PosteriorSummary, truth: &[f64]) -> Vec<CurveRow> {
    points
        .iter()
        .zip(&summary.points)
        .zip(truth)
        .map(|((x, s), &t)| CurveRow {
            x: x.clone(),
            truth: t,
            mean: s.mean,
            q025: s.q025,
            q975: s.q975,
        })
        .collect()
}

pub const EXAMPLE1_X: [f64; 7] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.9, 1.0];
pub const EXAMPLE1_GRID: usize = 50;
pub const EXAMPLE1_GAP: (f64, f64) = (0.4, 0.9);
pub const EXAMPLE1_DERIVS: usize = 10;
/// Places the gap grid at 0.42, 0.47, …, 0.87.
pub const EXAMPLE1_GAP_OFFSET: f64 = 0.4;

pub fn example1_data() -> Dataset {
    Dataset::new(
        EXAMPLE1_X.iter().map(|&x| vec![x]).collect(),
        EXAMPLE1_X.iter().map(|&x| testfn_example1(x)).collect(),
    )
    .expect("fixed design")
}

pub fn example1_spec(count: usize) -> DerivativeSpec {
    let pts = place_gap_grid(EXAMPLE1_GAP.0, EXAMPLE1_GAP.1, EXAMPLE1_DERIVS, EXAMPLE1_GAP_OFFSET).expect("fixed grid");
    DerivativeSpec::new(vec![DerivativeBlock {
        dim: 0,
        direction: Direction::Increasing,
        locations: pts.into_iter().take(count).map(|v| vec![v]).collect(),
    }])
}

/// 50-point grid on `[0,1]` followed by the training inputs.
pub fn example1_predictions() -> (Vec<Point>, usize) {
    let mut pts: Vec<Point> = (0..EXAMPLE1_GRID)
        .map(|i| vec![i as f64 / (EXAMPLE1_GRID - 1) as f64])
        .collect();
    let grid = pts.len();
    pts.extend(EXAMPLE1_X.iter().map(|&x| vec![x]));
    (pts, grid)
}

fn gap_width(points: &[Point], summary: &PosteriorSummary) -> f64 {
    let (lo, hi) = EXAMPLE1_GAP;
    let w: Vec<f64> = points
        .iter()
        .zip(&summary.points)
        .filter(|(x, _)| x[0] > lo && x[0] < hi)
        .map(|(_, s)| s.width)
        .collect();
    w.iter().sum::<f64>() / w.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example1Output {
    pub report: ExperimentReport,
    pub unconstrained_curve: Vec<CurveRow>,
    pub monotone_curve: Vec<CurveRow>,
    /// Mean 95% interval width over grid points in the gap.
    pub gap_width_unconstrained: f64,
    pub gap_width_monotone: f64,
    pub fraction_satisfied: f64,
    /// Largest `|mean − y|` at the training inputs, per method.
    pub interpolation_error: (f64, f64),
    pub jitter: f64,
    pub trace: Trace,
}

pub fn run_example1(settings: &RunSettings) -> Result<Example1Output, ExperimentError> {
    let data = example1_data();
    let (pts, grid) = example1_predictions();
    let truth: Vec<f64> = pts.iter().map(|x| testfn_example1(x[0])).collect();
    let unc = fit(&data, pts.clone(), DerivativeSpec::none(), settings, settings.seed, None)?;
    let mono = fit(&data, pts.clone(), example1_spec(EXAMPLE1_DERIVS), settings, settings.seed, None)?;

    let interp = |f: &Fit| {
        f.summary.points[grid..]
            .iter()
            .zip(data.outputs())
            .map(|(s, y)| (s.mean - y).abs())
            .fold(0.0, f64::max)
    };
    let grid_summary = |f: &Fit| PosteriorSummary {
        points: f.summary.points[..grid].to_vec(),
    };
    let m_unc = metrics(&grid_summary(&unc), &truth[..grid])?;
    let m_mono = metrics(&grid_summary(&mono), &truth[..grid])?;
    let jitter = mono.model.jitter().initial * mono.transform.scale.powi(2);
    Ok(Example1Output {
        report: ExperimentReport {
            name: "example1".into(),
            unconstrained: MethodMetrics::from_metrics(&[m_unc]),
            monotone: MethodMetrics::from_metrics(&[m_mono]),
            failed_replicates: 0,
            meta: settings.into(),
        },
        unconstrained_curve: curve(&pts[..grid], &unc.summary, &truth),
        monotone_curve: curve(&pts[..grid], &mono.summary, &truth),
        gap_width_unconstrained: gap_width(&pts[..grid], &grid_summary(&unc)),
        gap_width_monotone: gap_width(&pts[..grid], &grid_summary(&mono)),
        fraction_satisfied: mono.ensemble.fraction_satisfied(),
        interpolation_error: (interp(&unc), interp(&mono)),
        jitter,
        trace: mono.trace,
    })
}

/// Mean gap width as the gap derivatives are added left to right; entry
/// `k` uses the first `k` points (entry 0 is unconstrained).
pub fn run_gap_prefix_study(settings: &RunSettings) -> Result<Vec<f64>, ExperimentError> {
    let data = example1_data();
    let (pts, grid) = example1_predictions();
    let grid_pts = &pts[..grid];
    let mut out = Vec::with_capacity(EXAMPLE1_DERIVS + 1);
    for k in 0..=EXAMPLE1_DERIVS {
        let f = fit(&data, grid_pts.to_vec(), example1_spec(k), settings, settings.seed, None)?;
        out.push(gap_width(grid_pts, &f.summary));
    }
    Ok(out)
}

pub const EXAMPLE2_TRAIN: usize = 15;
pub const EXAMPLE2_LHD_SEED: u64 = 2;

/// Prediction points A–E.
pub fn example2_predictions() -> Vec<Point> {
    vec![
        vec![0.3, 0.3],
        vec![0.3, 0.7],
        vec![0.5, 0.5],
        vec![0.7, 0.3],
        vec![0.7, 0.7],
    ]
}

pub fn example2_design() -> Vec<Point> {
    lhd(EXAMPLE2_TRAIN, 2, EXAMPLE2_LHD_SEED)
}

fn plus_spec(centers: &[Point]) -> Result<DerivativeSpec, DesignError> {
    place_plus_shape(
        centers,
        0.1,
        2,
        &InputBox::unit(2),
        &[(0, Direction::Increasing), (1, Direction::Increasing)],
    )
}

pub fn example2_spec() -> DerivativeSpec {
    plus_spec(&example2_predictions()).expect("interior centers")
}

/// Posterior summaries recorded after one SCMC step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDensities {
    pub step: usize,
    pub tau: f64,
    pub predictions: Vec<PointSummary>,
    pub lengthscales: Vec<PointSummary>,
    pub variance: PointSummary,
    /// Raw `y*` draws per prediction point, for density plots.
    pub draws: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example2Output {
    pub report: ExperimentReport,
    pub truth: Vec<f64>,
    pub steps: Vec<StepDensities>,
    pub fraction_satisfied: f64,
    pub derivative_count: usize,
    pub trace: Trace,
}

pub fn run_example2(
    settings: &RunSettings,
    design: Option<Vec<Point>>,
) -> Result<Example2Output, ExperimentError> {
    let x = design.unwrap_or_else(example2_design);
    let y: Vec<f64> = x.iter().map(|p| testfn_example2(p[0], p[1])).collect();
    let data = Dataset::new(x, y)?;
    let preds = example2_predictions();
    let truth: Vec<f64> = preds.iter().map(|p| testfn_example2(p[0], p[1])).collect();
    let spec = example2_spec();
    let transform = ResponseTransform::fit(data.outputs(), settings.center, settings.standardize);
    let mut steps = Vec::new();
    let mut observe = |step: usize, ens: &Ensemble| {
        let w = ens.weights();
        let s = summarize_mapped(ens, |v| transform.inverse(v));
        let d = ens.particles[0].lengthscales.len();
        let lengthscales = (0..d)
            .map(|k| {
                let v: Vec<f64> = ens.particles.iter().map(|p| p.lengthscales[k]).collect();
                summarize_values(&v, &w)
            })
            .collect();
        let var: Vec<f64> = ens.particles.iter().map(|p| p.variance * transform.scale.powi(2)).collect();
        let draws = (0..s.points.len())
            .map(|j| ens.particles.iter().map(|p| transform.inverse(p.ystar[j])).collect())
            .collect();
        steps.push(StepDensities {
            step,
            tau: ens.tau,
            predictions: s.points,
            lengthscales,
            variance: summarize_values(&var, &w),
            draws,
        });
    };
    let mono = fit(&data, preds.clone(), spec.clone(), settings, settings.seed, Some(&mut observe))?;
    let unc = PosteriorSummary {
        points: steps[0].predictions.clone(),
    };
    Ok(Example2Output {
        report: ExperimentReport {
            name: "example2".into(),
            unconstrained: MethodMetrics::from_metrics(&[metrics(&unc, &truth)?]),
            monotone: MethodMetrics::from_metrics(&[metrics(&mono.summary, &truth)?]),
            failed_replicates: 0,
            meta: settings.into(),
        },
        truth,
        steps,
        fraction_satisfied: mono.ensemble.fraction_satisfied(),
        derivative_count: spec.total(),
        trace: mono.trace,
    })
}

pub const SIM_POINTS: usize = 25;
pub const SIM_TRAIN: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub index: usize,
    pub beta: f64,
    pub unconstrained: Metrics,
    pub monotone: Metrics,
    pub derivative_count: usize,
    pub fraction_satisfied: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimstudyOutput {
    pub report: ExperimentReport,
    pub replicates: Vec<Replicate>,
    pub failures: Vec<(usize, String)>,
}

fn simstudy_replicate(r: usize, settings: &RunSettings) -> Result<Replicate, ExperimentError> {
    let seed = settings.seed.wrapping_mul(1_000_003).wrapping_add(r as u64);
    let poly = random_polynomial(seed);
    if !(poly.beta.is_normal()) {
        return Err(GpError::DegenerateVariance(poly.beta).into());
    }
    let mut pts = lhd(SIM_POINTS, 2, seed);
    pts.shuffle(&mut stream(seed, 0, 1, 0x5b11));
    let test = pts.split_off(SIM_TRAIN);
    let y: Vec<f64> = pts.iter().map(|p| poly.eval(p[0], p[1])).collect();
    let truth: Vec<f64> = test.iter().map(|p| poly.eval(p[0], p[1])).collect();
    let data = Dataset::new(pts, y)?;
    let spec = plus_spec(&test)?;
    let unc = fit(&data, test.clone(), DerivativeSpec::none(), settings, seed, None)?;
    let mono = fit(&data, test.clone(), spec.clone(), settings, seed, None)?;
    Ok(Replicate {
        index: r,
        beta: poly.beta,
        unconstrained: metrics(&unc.summary, &truth)?,
        monotone: metrics(&mono.summary, &truth)?,
        derivative_count: spec.total(),
        fraction_satisfied: mono.ensemble.fraction_satisfied(),
    })
}

/// `R` replicates of: random monotone polynomial, 25-point LHD split into
/// 20 training and 5 test points, both models fitted, metrics on the test
/// points. Failed replicates are reported and excluded.
pub fn run_simstudy(replicates: usize, settings: &RunSettings) -> Result<SimstudyOutput, ExperimentError> {
    if replicates == 0 {
        return Err(ExperimentError::NoReplicates);
    }
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for r in 0..replicates {
        match simstudy_replicate(r, settings) {
            Ok(rep) => ok.push(rep),
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    let unc: Vec<Metrics> = ok.iter().map(|r| r.unconstrained.clone()).collect();
    let mono: Vec<Metrics> = ok.iter().map(|r| r.monotone.clone()).collect();
    Ok(SimstudyOutput {
        report: ExperimentReport {
            name: "simstudy".into(),
            unconstrained: MethodMetrics::from_metrics(&unc),
            monotone: MethodMetrics::from_metrics(&mono),
            failed_replicates: failures.len(),
            meta: settings.into(),
        },
        replicates: ok,
        failures,
    })
}

pub const QUEUE_RHO: f64 = 1.0;

/// 28-point triangular grid plus 4 points close to the boundary.
pub fn queue_design() -> Vec<Point> {
    let h = 0.14;
    let mut pts = Vec::new();
    for i in 0..=6 {
        for j in 0..=(6 - i) {
            pts.push(vec![i as f64 * h, j as f64 * h]);
        }
    }
    pts.extend([[0.15, 0.75], [0.35, 0.55], [0.55, 0.35], [0.75, 0.15]].map(|p| p.to_vec()));
    pts
}

pub fn queue_predictions() -> Vec<Point> {
    vec![vec![0.2, 0.6], vec![0.4, 0.4], vec![0.6, 0.2], vec![0.45, 0.45]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueOutput {
    pub report: ExperimentReport,
    pub truth: Vec<f64>,
    pub unconstrained: Vec<PointSummary>,
    pub monotone: Vec<PointSummary>,
    pub fraction_satisfied: f64,
}

pub fn run_queue_demo(settings: &RunSettings) -> Result<QueueOutput, ExperimentError> {
    let x = queue_design();
    let y = x
        .iter()
        .map(|p| testfn_flat_steep(p[0], p[1], QUEUE_RHO))
        .collect::<Result<Vec<_>, _>>()?;
    let data = Dataset::new(x, y)?;
    let preds = queue_predictions();
    let truth = preds
        .iter()
        .map(|p| testfn_flat_steep(p[0], p[1], QUEUE_RHO))
        .collect::<Result<Vec<_>, _>>()?;
    let spec = place_plus_shape(
        &preds,
        0.05,
        2,
        &InputBox::unit(2),
        &[(0, Direction::Increasing), (1, Direction::Increasing)],
    )?;
    let unc = fit(&data, preds.clone(), DerivativeSpec::none(), settings, settings.seed, None)?;
    let mono = fit(&data, preds.clone(), spec, settings, settings.seed, None)?;
    Ok(QueueOutput {
        report: ExperimentReport {
            name: "queue_demo".into(),
            unconstrained: MethodMetrics::from_metrics(&[metrics(&unc.summary, &truth)?]),
            monotone: MethodMetrics::from_metrics(&[metrics(&mono.summary, &truth)?]),
            failed_replicates: 0,
            meta: settings.into(),
        },
        truth,
        unconstrained: unc.summary.points,
        monotone: mono.summary.points,
        fraction_satisfied: mono.ensemble.fraction_satisfied(),
    })
}
