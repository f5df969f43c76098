use std::path::{Path, PathBuf};
use std::process::Command;

use mono_gp::design::PlacementPlan;
use mono_gp::experiments::{example2_design, EXAMPLE1_X};
use mono_gp_cli::config::load_resolved;
use mono_gp_cli::data::{load_dataset, load_points};
use mono_gp_cli::snapshot::{load_snapshot, save_snapshot, EnsembleSnapshot, SNAPSHOT_VERSION};
use mono_gp_cli::CliError;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn monogp(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_monogp")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fit_fixture(dir: &Path, particles: &str) {
    let out = monogp(&[
        "fit",
        "--config",
        s(&fixture("example1.toml")),
        "--out",
        s(dir),
        "--n-particles",
        particles,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn example1_fixture_loads() {
    let d = load_dataset(&fixture("example1.csv")).unwrap();
    assert_eq!((d.len(), d.dims()), (7, 1));
    let xs: Vec<f64> = d.inputs().iter().map(|x| x[0]).collect();
    assert_eq!(xs, EXAMPLE1_X);
    for (x, y) in xs.iter().zip(d.outputs()) {
        assert!((y - (20.0 * x + 1.0).ln()).abs() < 1e-15);
    }
}

#[test]
fn example2_fixture_matches_design() {
    assert_eq!(load_points(&fixture("example2_lhd.csv")).unwrap(), example2_design());
}

#[test]
fn no_arguments_prints_usage() {
    let out = monogp(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = monogp(&["example1", "--out", "x", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));
}

#[test]
fn invalid_setting_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = monogp(&["example1", "--out", s(dir.path()), "--n-particles", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_particles"));
}

#[test]
fn fit_with_missing_data_reports_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "data = \"missing.csv\"\n").unwrap();
    let out = monogp(&["fit", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));
}

#[test]
fn config_resolves_relative_paths() {
    let r = load_resolved(&fixture("example1.toml")).unwrap();
    assert_eq!(r.data.len(), 7);
    assert_eq!(r.predictions.len(), 11);
    assert_eq!(r.spec.total(), 10);
    assert_eq!(r.config.sampler.n_particles, 200);
}

#[test]
fn config_rejects_multiple_prediction_sources() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(fixture("example1.csv"), dir.path().join("d.csv")).unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "data = \"d.csv\"\n[predictions]\npoints = [[0.5]]\ngrid = { lo = [0.0], hi = [1.0], count = [3] }\n",
    )
    .unwrap();
    assert!(matches!(load_resolved(&cfg), Err(CliError::Config { .. })));
    std::fs::write(&cfg, "data = \"d.csv\"\n[sampler]\ntau_final = -1.0\n").unwrap();
    assert!(matches!(load_resolved(&cfg), Err(CliError::Config { .. })));
}

#[test]
fn snapshot_round_trip_and_failure_modes() {
    let dir = tempfile::tempdir().unwrap();
    fit_fixture(dir.path(), "10");
    let path = dir.path().join("snapshot.json");
    let snap = load_snapshot(&path).unwrap();
    assert_eq!(snap.version, SNAPSHOT_VERSION);
    assert_eq!(snap.payload.ensemble.len(), 10);

    let copy = dir.path().join("copy.json");
    save_snapshot(&copy, &snap).unwrap();
    let again = load_snapshot(&copy).unwrap();
    assert_eq!(again, snap);
    assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(&path).unwrap());

    let text = std::fs::read_to_string(&path).unwrap();
    let cut = dir.path().join("cut.json");
    std::fs::write(&cut, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_snapshot(&cut), Err(CliError::Parse { .. })));

    let old = dir.path().join("old.json");
    std::fs::write(&old, text.replacen("\"version\":1", "\"version\":0", 1)).unwrap();
    assert!(matches!(
        load_snapshot(&old),
        Err(CliError::Migration { found: 0, expected: 1, .. })
    ));

    let mut tampered = snap.clone();
    tampered.payload.ensemble.tau *= 2.0;
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, serde_json::to_string(&tampered).unwrap()).unwrap();
    assert!(matches!(load_snapshot(&bad), Err(CliError::Checksum { .. })));

    let cfg = load_resolved(&fixture("example1.toml")).unwrap();
    assert!(snap.digest_matches(&cfg.digest));
    assert!(!snap.digest_matches("0000"));

    let mut nan = snap.clone();
    nan.payload.ensemble.logweights[0] = f64::NAN;
    let nan = EnsembleSnapshot::new(nan.payload);
    assert!(matches!(save_snapshot(&dir.path().join("nan.json"), &nan), Err(CliError::Numerical(_))));
}

#[test]
fn predict_reuses_a_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    fit_fixture(dir.path(), "100");
    let pts = dir.path().join("pts.csv");
    std::fs::write(&pts, "x\n0.0\n0.65\n1.0\n").unwrap();
    let out_csv = dir.path().join("pred.csv");
    let (snap, cfg) = (dir.path().join("snapshot.json"), fixture("example1.toml"));
    let args = [
        "predict",
        "--snapshot",
        s(&snap),
        "--points",
        s(&pts),
        "--out",
        s(&out_csv),
        "--config",
        s(&cfg),
    ];
    let out = monogp(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!String::from_utf8_lossy(&out.stderr).contains("different config"));
    let first = std::fs::read_to_string(&out_csv).unwrap();
    let rows: Vec<Vec<f64>> = first
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    // Training inputs are reproduced.
    assert!(rows[0][1].abs() < 1e-6);
    assert!((rows[2][1] - 21f64.ln()).abs() < 1e-6);
    // Inside the gap the monotone fit stays between its neighbours.
    assert!(rows[1][1] > 2.1 && rows[1][1] < 3.0, "{rows:?}");

    let out = monogp(&args);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(&out_csv).unwrap(), first);

    std::fs::write(&pts, "x1,x2\n0.1,0.2\n").unwrap();
    assert_eq!(monogp(&args).status.code(), Some(1));
}

#[test]
fn predict_warns_on_config_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    fit_fixture(dir.path(), "10");
    let other = dir.path().join("other.toml");
    let text = std::fs::read_to_string(fixture("example1.toml")).unwrap().replace("seed = 11", "seed = 12");
    std::fs::write(&other, text).unwrap();
    std::fs::copy(fixture("example1.csv"), dir.path().join("example1.csv")).unwrap();
    let pts = dir.path().join("pts.csv");
    std::fs::write(&pts, "x\n0.5\n").unwrap();
    let out = monogp(&[
        "predict",
        "--snapshot",
        s(&dir.path().join("snapshot.json")),
        "--points",
        s(&pts),
        "--out",
        s(&dir.path().join("p.csv")),
        "--config",
        s(&other),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("different config"));
}

#[test]
fn design_derivs_emits_a_plan() {
    let out = monogp(&["design-derivs", "--gap", "0.4,0.9,10", "--dims", "0:+"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    #[derive(serde::Deserialize)]
    struct Doc {
        placement: PlacementPlan,
    }
    let doc: Doc = toml::from_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(doc.placement.resolve(1).unwrap().total(), 10);

    let dir = tempfile::tempdir().unwrap();
    let centers = dir.path().join("c.csv");
    std::fs::write(&centers, "x1,x2\n0.3,0.3\n0.5,0.5\n").unwrap();
    let plan = dir.path().join("plan.toml");
    let out = monogp(&[
        "design-derivs",
        "--centers",
        s(&centers),
        "--dims",
        "0:+,1:-",
        "--resolve",
        "--out",
        s(&plan),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: Doc = toml::from_str(&std::fs::read_to_string(&plan).unwrap()).unwrap();
    let PlacementPlan::Explicit { blocks } = &doc.placement else {
        panic!("expected explicit plan");
    };
    assert_eq!(blocks.len(), 2);
    assert_eq!(blocks.iter().map(|b| b.locations.len()).sum::<usize>(), 16);

    let out = monogp(&["design-derivs", "--config", s(&fixture("example1.toml"))]);
    assert!(out.status.success());
    assert_eq!(
        monogp(&["design-derivs", "--gap", "0.4,0.9,10", "--dims", "0:x"]).status.code(),
        Some(1)
    );
}

#[test]
fn example1_smoke_run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = monogp(&["example1", "--n-particles", "2000", "--seed", "7", "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.json", "example1.json", "metrics.csv", "curves.csv", "trace.jsonl"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["name"], "example1");
    assert_eq!(report["meta"]["n_particles"], 2000);
    let curves = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2 * 50);
    let trace = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["ess"].as_f64().unwrap() >= 1.0);
    }
}
