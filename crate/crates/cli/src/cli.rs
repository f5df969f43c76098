//! Command-line surface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mono_gp::design::PlacementPlan;
use mono_gp::experiments::{
    fit, run_example1, run_example2, run_gap_prefix_study, run_queue_demo, run_simstudy, RunSettings,
};
use mono_gp::gp::Direction;
use mono_gp::par::Execution;
use mono_gp::scmc::{predict_draws, summarize_draws};
use serde::Serialize;

use crate::config::{load_resolved, RunConfig};
use crate::data::{load_dataset, load_points};
use crate::error::CliError;
use crate::report::{
    write_curves_csv, write_json, write_metrics_csv, write_replicates_csv, write_series_csv, write_summary_csv,
    write_trace_jsonl,
};
use crate::snapshot::{load_snapshot, save_snapshot, EnsembleSnapshot};

#[derive(Debug, Parser)]
#[command(name = "monogp", version, about = "Monotone Gaussian-process emulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model described by a config file and write a snapshot.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for snapshot.json, predictions.csv, trace.jsonl.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Summarize a snapshot at new input points.
    Predict {
        #[arg(long)]
        snapshot: PathBuf,
        /// CSV of input points (header row).
        #[arg(long)]
        points: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        /// Config the snapshot should have been fitted with; a mismatch warns.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        sequential: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Build a derivative placement plan and print it as TOML.
    DesignDerivs {
        /// Take the plan from this config's `[placement]` table.
        #[arg(long, conflicts_with_all = ["centers", "gap"])]
        config: Option<PathBuf>,
        /// CSV of plus-shape centers.
        #[arg(long)]
        centers: Option<PathBuf>,
        /// 1-d gap grid as `lo,hi,count`.
        #[arg(long, value_delimiter = ',')]
        gap: Option<Vec<f64>>,
        /// Monotone inputs as `dim:+` or `dim:-` (0-based), e.g. `0:+,1:+`.
        #[arg(long, value_delimiter = ',', value_parser = parse_dim)]
        dims: Vec<(usize, Direction)>,
        #[arg(long, default_value_t = 0.1)]
        arm: f64,
        #[arg(long, default_value_t = 2)]
        per_arm: usize,
        #[arg(long, default_value_t = 0.5)]
        offset: f64,
        /// Emit the resolved locations instead of the placement rule.
        #[arg(long)]
        resolve: bool,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One-dimensional example with a data gap.
    Example1 {
        #[arg(long)]
        out: PathBuf,
        /// Also run the gap-prefix study (derivatives added one at a time).
        #[arg(long)]
        gap_study: bool,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Two-dimensional example with per-step densities.
    Example2 {
        #[arg(long)]
        out: PathBuf,
        /// Training design CSV (x1,x2 columns) replacing the built-in LHD.
        #[arg(long)]
        design: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Random monotone polynomial simulation study.
    Simstudy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        replicates: usize,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Flat-then-steep queueing-style surface.
    QueueDemo {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
}

/// Sampler overrides shared by the fitting commands. Flags win over
/// `--settings`, which wins over the built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct SamplerArgs {
    /// TOML file holding sampler settings (same keys as `[sampler]`).
    #[arg(long)]
    pub settings: Option<PathBuf>,
    #[arg(long)]
    pub n_particles: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub tau_final: Option<f64>,
    #[arg(long)]
    pub n_mh: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// ESS fraction that triggers extra strictness steps; 0 disables.
    #[arg(long)]
    pub refine_ess: Option<f64>,
    #[arg(long)]
    pub standardize: bool,
    #[arg(long)]
    pub no_center: bool,
    /// Use the bare chi-squared variance proposal without the Hastings ratio.
    #[arg(long)]
    pub bare_variance_move: bool,
    /// Full-scale particle count (N = 40000).
    #[arg(long)]
    pub full_scale: bool,
    /// Run without the thread pool.
    #[arg(long)]
    pub sequential: bool,
    /// Worker threads for the parallel moves.
    #[arg(long)]
    pub threads: Option<usize>,
}

fn parse_dim(s: &str) -> Result<(usize, Direction), String> {
    let (d, sign) = s.split_once(':').ok_or_else(|| format!("expected dim:+ or dim:-, got {s:?}"))?;
    let dim = d.trim().parse().map_err(|_| format!("bad dimension {d:?}"))?;
    let dir = match sign.trim() {
        "+" => Direction::Increasing,
        "-" => Direction::Decreasing,
        other => return Err(format!("direction must be + or -, got {other:?}")),
    };
    Ok((dim, dir))
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

impl SamplerArgs {
    fn apply(&self, mut s: RunSettings) -> RunSettings {
        if self.full_scale {
            s.n_particles = RunSettings::full_scale().n_particles;
        }
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { s.$f = v; })*};
        }
        set!(n_particles, steps, tau_final, n_mh, seed, refine_ess);
        if self.standardize {
            s.standardize = true;
        }
        if self.no_center {
            s.center = false;
        }
        if self.bare_variance_move {
            s.variance_hastings = false;
        }
        s.execution = execution(self.sequential);
        s
    }

    /// Defaults, then the settings file, then flags; validated.
    fn settings(&self, base: RunSettings) -> Result<RunSettings, CliError> {
        let base = match &self.settings {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                toml::from_str(&text).map_err(|e| CliError::Config {
                    path: path.clone(),
                    message: e.to_string(),
                })?
            }
            None => base,
        };
        let s = self.apply(base);
        s.validate().map_err(usage)?;
        Ok(s)
    }
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn with_threads<T>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError>
where
    T: Send,
{
    match threads {
        None => Ok(f()),
        Some(0) => Err(usage("--threads must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Numerical(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn threads_of(cmd: &Command) -> Option<usize> {
    match cmd {
        Command::Fit { sampler, .. }
        | Command::Example1 { sampler, .. }
        | Command::Example2 { sampler, .. }
        | Command::Simstudy { sampler, .. }
        | Command::QueueDemo { sampler, .. } => sampler.threads,
        Command::Predict { threads, .. } => *threads,
        Command::DesignDerivs { .. } => None,
    }
}

fn out_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[derive(Serialize)]
struct PlacementDoc<'a> {
    placement: &'a PlacementPlan,
}

fn design_derivs(
    config: Option<&Path>,
    centers: Option<&Path>,
    gap: Option<&[f64]>,
    dims: &[(usize, Direction)],
    (arm, per_arm, offset): (f64, usize, f64),
    resolve: bool,
) -> Result<String, CliError> {
    let (plan, d) = if let Some(path) = config {
        let cfg = RunConfig::load(path)?;
        let d = load_dataset(&cfg.data)?.dims();
        let plan = cfg.placement.ok_or_else(|| CliError::Config {
            path: path.to_path_buf(),
            message: "no [placement] table".into(),
        })?;
        (plan, d)
    } else if let Some(g) = gap {
        if g.len() != 3 {
            return Err(usage("--gap takes lo,hi,count"));
        }
        let &[(dim, direction)] = dims else {
            return Err(usage("a gap grid needs exactly one --dims entry"));
        };
        if g[2] < 0.0 || g[2].fract() != 0.0 {
            return Err(usage("gap count must be a whole number"));
        }
        let plan = PlacementPlan::GapGrid {
            dim,
            direction,
            lo: g[0],
            hi: g[1],
            count: g[2] as usize,
            offset,
        };
        (plan, 1)
    } else if let Some(path) = centers {
        if dims.is_empty() {
            return Err(usage("plus-shape placement needs --dims"));
        }
        let centers = load_points(path)?;
        let d = centers[0].len();
        let plan = PlacementPlan::PlusShape {
            centers,
            arm,
            per_arm,
            dims: dims.to_vec(),
            bounds: None,
        };
        (plan, d)
    } else {
        return Err(usage("give one of --config, --gap or --centers"));
    };
    let spec = plan.resolve(d).map_err(usage)?;
    let plan = if resolve {
        PlacementPlan::Explicit {
            blocks: spec.blocks().to_vec(),
        }
    } else {
        plan
    };
    toml::to_string(&PlacementDoc { placement: &plan }).map_err(|e| CliError::Numerical(e.to_string()))
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Fit { config, out, sampler } => {
            let resolved = load_resolved(&config)?;
            let settings = sampler.settings(resolved.config.sampler.clone())?;
            let f = fit(
                &resolved.data,
                resolved.predictions.clone(),
                resolved.spec.clone(),
                &settings,
                settings.seed,
                None,
            )?;
            let snap = EnsembleSnapshot::from_fit(&f, &resolved.data, &settings, resolved.digest.clone());
            save_snapshot(&out_file(&out, "snapshot.json"), &snap)?;
            write_summary_csv(&out_file(&out, "predictions.csv"), &resolved.predictions, &f.summary)?;
            write_trace_jsonl(&out_file(&out, "trace.jsonl"), &f.trace)?;
            log::info!(
                "fit: {} particles, {} steps, final tau {}",
                f.ensemble.len(),
                f.trace.steps.len(),
                f.ensemble.tau
            );
        }
        Command::Predict {
            snapshot,
            points,
            out,
            config,
            seed,
            sequential,
            ..
        } => {
            let snap = load_snapshot(&snapshot)?;
            if let Some(c) = config {
                let digest = RunConfig::load(&c)?.digest();
                if !snap.digest_matches(&digest) {
                    log::warn!("{}: snapshot was fitted with a different config than {}", snapshot.display(), c.display());
                }
            }
            let pts = load_points(&points)?;
            let d = snap.payload.data.dims();
            if let Some(i) = pts.iter().position(|p| p.len() != d) {
                return Err(CliError::Parse {
                    path: points,
                    line: i as u64 + 2,
                    message: format!("expected {d} columns"),
                });
            }
            let model = snap.model()?;
            let ens = &snap.payload.ensemble;
            let draws = predict_draws(&model, ens, &pts, seed, execution(sequential))?;
            let t = snap.payload.transform;
            let summary = summarize_draws(&draws, &ens.weights(), |v| t.inverse(v));
            write_summary_csv(&out, &pts, &summary)?;
        }
        Command::DesignDerivs {
            config,
            centers,
            gap,
            dims,
            arm,
            per_arm,
            offset,
            resolve,
            out,
        } => {
            let text = design_derivs(
                config.as_deref(),
                centers.as_deref(),
                gap.as_deref(),
                &dims,
                (arm, per_arm, offset),
                resolve,
            )?;
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))?,
                None => print!("{text}"),
            }
        }
        Command::Example1 { out, gap_study, sampler } => {
            let settings = sampler.settings(RunSettings::default())?;
            let r = run_example1(&settings)?;
            write_json(&out_file(&out, "report.json"), &r.report)?;
            write_json(&out_file(&out, "example1.json"), &r)?;
            write_metrics_csv(&out_file(&out, "metrics.csv"), &r.report)?;
            write_curves_csv(
                &out_file(&out, "curves.csv"),
                &[("unconstrained", &r.unconstrained_curve), ("monotone", &r.monotone_curve)],
            )?;
            write_trace_jsonl(&out_file(&out, "trace.jsonl"), &r.trace)?;
            if gap_study {
                let widths = run_gap_prefix_study(&settings)?;
                write_series_csv(&out_file(&out, "gap_study.csv"), "derivatives", "mean_gap_width", &widths)?;
            }
        }
        Command::Example2 { out, design, sampler } => {
            let settings = sampler.settings(RunSettings::default())?;
            let design = design.as_deref().map(load_points).transpose()?;
            let r = run_example2(&settings, design)?;
            write_json(&out_file(&out, "report.json"), &r.report)?;
            write_json(&out_file(&out, "steps.json"), &r.steps)?;
            write_metrics_csv(&out_file(&out, "metrics.csv"), &r.report)?;
            write_trace_jsonl(&out_file(&out, "trace.jsonl"), &r.trace)?;
        }
        Command::Simstudy {
            out,
            replicates,
            sampler,
        } => {
            let settings = sampler.settings(RunSettings::default())?;
            if replicates == 0 {
                return Err(usage("--replicates must be at least 1"));
            }
            let r = run_simstudy(replicates, &settings)?;
            for (i, e) in &r.failures {
                log::warn!("replicate {i} failed: {e}");
            }
            write_json(&out_file(&out, "report.json"), &r.report)?;
            write_metrics_csv(&out_file(&out, "metrics.csv"), &r.report)?;
            write_replicates_csv(&out_file(&out, "replicates.csv"), &r.replicates)?;
        }
        Command::QueueDemo { out, sampler } => {
            let settings = sampler.settings(RunSettings::default())?;
            let r = run_queue_demo(&settings)?;
            write_json(&out_file(&out, "report.json"), &r.report)?;
            write_json(&out_file(&out, "queue.json"), &r)?;
            write_metrics_csv(&out_file(&out, "metrics.csv"), &r.report)?;
        }
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code: 0 success, 1 usage or input error, 2 numerical failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let threads = threads_of(&cli.command);
    match with_threads(threads, || execute(cli.command)).and_then(|r| r) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
