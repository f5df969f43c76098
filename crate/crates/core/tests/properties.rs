use mono_gp::constraint::{default_schedule, log_probit};
use mono_gp::experiments::{metrics, testfn_example1};
use mono_gp::gp::{
    assemble_joint_cov, gp_conditional, Dataset, DerivativeBlock, DerivativeSpec, Direction, Hyperparameters,
    Model, Point, Priors, Site,
};
use mono_gp::kernel::KernelParams;
use mono_gp::linalg::{Factor, JitterPolicy};
use mono_gp::par::Execution;
use mono_gp::scmc::{
    mcmc_init, move_particles, scmc_run, summarize_values, InitConfig, MoveConfig, PointSummary, PosteriorSummary,
    ScheduleMode, ScmcConfig,
};
use proptest::prelude::*;

fn unit_points(raw: &[f64], d: usize) -> Vec<Point> {
    raw.chunks(d).map(|c| c.to_vec()).collect()
}

fn spread(points: &[Point]) -> bool {
    points.iter().enumerate().all(|(i, a)| {
        points[..i]
            .iter()
            .all(|b| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>() > 1e-4)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probit_is_a_probability(
        yp in proptest::collection::vec(-50.0f64..50.0, 0..12),
        tau in 0.0f64..1e7,
    ) {
        let p = log_probit(&yp, tau).exp();
        prop_assert!(p > 0.0 || yp.iter().any(|&v| v * tau < -38.0));
        prop_assert!(p <= 1.0);
    }

    #[test]
    fn joint_covariance_factorises(
        raw in proptest::collection::vec(0.0f64..1.0, 6..24),
        draw in proptest::collection::vec(0.0f64..1.0, 4..16),
        l1 in 0.1f64..2.0,
        l2 in 0.1f64..2.0,
        var in 0.1f64..10.0,
    ) {
        let x = unit_points(&raw[..raw.len() / 2 * 2], 2);
        let locs = unit_points(&draw[..draw.len() / 2 * 2], 2);
        let half = locs.len() / 2;
        let spec = DerivativeSpec::new(vec![
            DerivativeBlock { dim: 0, direction: Direction::Increasing, locations: locs[..half.max(1)].to_vec() },
            DerivativeBlock { dim: 1, direction: Direction::Decreasing, locations: locs[half.max(1)..].to_vec() },
        ]
        .into_iter()
        .filter(|b| !b.locations.is_empty())
        .collect());
        let p = KernelParams::new(vec![l1, l2], var).unwrap();
        let (m, _) = assemble_joint_cov(&x, &[], &spec, &p).unwrap();
        let f = Factor::new(&m, var, &JitterPolicy::default()).unwrap();
        prop_assert!(f.jitter() <= 1e-6 * var);
        prop_assert!((m.clone() - m.transpose()).amax() == 0.0);
    }

    #[test]
    fn conditional_mean_interpolates(
        raw in proptest::collection::vec(0.0f64..1.0, 2..16),
        ys in proptest::collection::vec(-3.0f64..3.0, 8),
        two_d in any::<bool>(),
        l in 0.1f64..1.0,
    ) {
        let d = if two_d { 2 } else { 1 };
        let x = unit_points(&raw[..raw.len() / d * d], d);
        prop_assume!(spread(&x));
        let n = x.len().min(ys.len());
        let x = x[..n].to_vec();
        let data = Dataset::new(x.clone(), ys[..n].to_vec()).unwrap();
        let p = KernelParams::new(vec![l; d], 1.0).unwrap();
        let targets: Vec<Site> = x.iter().cloned().map(Site::value).collect();
        let c = gp_conditional(&data, &targets, &p).unwrap();
        for (m, y) in c.mean.iter().zip(&ys[..n]) {
            prop_assert!((m - y).abs() <= 10.0 * 1e-10 * p.variance().max(1.0), "{m} vs {y}");
        }
    }

    #[test]
    fn metrics_are_nonnegative(vals in proptest::collection::vec((-5.0f64..5.0, 0.0f64..2.0, -5.0f64..5.0), 1..10)) {
        let preds = PosteriorSummary {
            points: vals
                .iter()
                .map(|&(m, w, _)| PointSummary { mean: m, sd: w / 4.0, q025: m - w / 2.0, q500: m, q975: m + w / 2.0, width: w })
                .collect(),
        };
        let truth: Vec<f64> = vals.iter().map(|v| v.2).collect();
        let m = metrics(&preds, &truth).unwrap();
        prop_assert!(m.rmse >= 0.0 && m.awoci >= 0.0);
        prop_assert_eq!(m.covered.len(), truth.len());
    }
}

fn example1_data() -> Dataset {
    let x = [0.0, 0.2, 0.4, 0.9, 1.0];
    Dataset::new(x.iter().map(|&v| vec![v]).collect(), x.iter().map(|&v| testfn_example1(v)).collect()).unwrap()
}

/// At zero strictness with fixed hyperparameters the target over
/// `(y*, y')` is a 2-d Gaussian; one move sweep from an exact sample must
/// keep its moments.
#[test]
fn move_sweep_preserves_tractable_target() {
    let data = example1_data();
    let kp = KernelParams::new(vec![0.35], 1.0).unwrap();
    let spec = DerivativeSpec::new(vec![DerivativeBlock {
        dim: 0,
        direction: Direction::Increasing,
        locations: vec![vec![0.7]],
    }]);
    let model = Model::new(data.clone(), vec![vec![0.6]], spec, Hyperparameters::Fixed(kp.clone())).unwrap();
    let n = 4000;
    let (mut ens, _) = mcmc_init(&model, n, &InitConfig::default(), 21, Execution::Sequential).unwrap();
    let cfg = MoveConfig::new(vec![0.1], 1.0);
    let stats = move_particles(&mut ens, &model, 0.0, &cfg, 1, Execution::Sequential).unwrap();
    assert!(stats.latent.rate().unwrap_or(0.0) > 0.05, "move kernel is stuck: {:?}", stats.latent);

    let targets = [Site::value(vec![0.6]), Site::derivative(vec![0.7], 0, Direction::Increasing)];
    let exact = gp_conditional(&data, &targets, &kp).unwrap();
    let w = ens.weights();
    for j in 0..2 {
        let vals: Vec<f64> = ens
            .particles
            .iter()
            .map(|p| if j == 0 { p.ystar[0] } else { p.yprime[0] })
            .collect();
        let s = summarize_values(&vals, &w);
        let v = exact.cov[(j, j)];
        assert!((s.mean - exact.mean[j]).abs() < 3.0 * (v / n as f64).sqrt(), "mean {j}: {} vs {}", s.mean, exact.mean[j]);
        assert!((s.sd.powi(2) - v).abs() < 3.0 * v * (2.0 / n as f64).sqrt(), "var {j}: {} vs {v}", s.sd.powi(2));
    }
}

#[test]
fn runs_are_identical_across_execution_modes() {
    let spec = DerivativeSpec::new(vec![DerivativeBlock {
        dim: 0,
        direction: Direction::Increasing,
        locations: vec![vec![0.5], vec![0.7]],
    }]);
    let model = Model::new(example1_data(), vec![vec![0.6]], spec, Hyperparameters::Sampled(Priors::default())).unwrap();
    let mut cfg = ScmcConfig::new(64, ScheduleMode::Fixed(default_schedule(1e6, 6).unwrap()));
    cfg.init = InitConfig { burnin: 300, thin: 2, max_failure_rate: 0.1 };
    cfg.execution = Execution::Sequential;
    let (a, ta) = scmc_run(&model, &cfg, 3).unwrap();
    cfg.execution = Execution::Parallel;
    let (b, tb) = scmc_run(&model, &cfg, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    let (c, _) = scmc_run(&model, &cfg, 4).unwrap();
    assert_ne!(a, c);
}
