//! Report writers: JSON documents, CSV tables and JSONL traces.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use mono_gp::experiments::{CurveRow, ExperimentReport, Replicate};
use mono_gp::gp::Point;
use mono_gp::scmc::{PosteriorSummary, Trace};
use serde::Serialize;

use crate::error::CliError;

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::io(path, e.into())
}

fn num(v: f64) -> String {
    // Shortest representation that reads back to the same f64.
    format!("{v:?}")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::io(path, e.into()))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

/// One row per point: coordinates then the summary columns.
pub fn write_summary_csv(path: &Path, points: &[Point], summary: &PosteriorSummary) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    let d = points.first().map_or(0, |p| p.len());
    let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    header.extend(["mean", "sd", "q025", "q500", "q975", "width"].map(String::from));
    w.write_record(&header).map_err(&err)?;
    for (x, s) in points.iter().zip(&summary.points) {
        let row: Vec<String> = x
            .iter()
            .chain(&[s.mean, s.sd, s.q025, s.q500, s.q975, s.width])
            .map(|&v| num(v))
            .collect();
        w.write_record(&row).map_err(&err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Curves for several methods in long format.
pub fn write_curves_csv(path: &Path, curves: &[(&str, &[CurveRow])]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    let d = curves.iter().find_map(|(_, c)| c.first()).map_or(0, |r| r.x.len());
    let mut header = vec!["method".to_string()];
    header.extend((1..=d).map(|k| format!("x{k}")));
    header.extend(["truth", "mean", "q025", "q975"].map(String::from));
    w.write_record(&header).map_err(&err)?;
    for (method, rows) in curves {
        for r in *rows {
            let mut row = vec![method.to_string()];
            row.extend(r.x.iter().chain(&[r.truth, r.mean, r.q025, r.q975]).map(|&v| num(v)));
            w.write_record(&row).map_err(&err)?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Median RMSE, median AWoCI and pooled coverage per method.
pub fn write_metrics_csv(path: &Path, report: &ExperimentReport) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(["method", "median_rmse", "median_awoci", "coverage", "covered", "total"])
        .map_err(&err)?;
    for (name, m) in [("unconstrained", &report.unconstrained), ("monotone", &report.monotone)] {
        w.write_record([
            name.to_string(),
            num(m.median_rmse()),
            num(m.median_awoci()),
            num(m.coverage),
            m.covered.to_string(),
            m.total.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_replicates_csv(path: &Path, reps: &[Replicate]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record([
        "replicate",
        "beta",
        "rmse_unconstrained",
        "rmse_monotone",
        "awoci_unconstrained",
        "awoci_monotone",
        "covered_unconstrained",
        "covered_monotone",
        "fraction_satisfied",
    ])
    .map_err(&err)?;
    let count = |c: &[bool]| c.iter().filter(|&&b| b).count().to_string();
    for r in reps {
        w.write_record([
            r.index.to_string(),
            num(r.beta),
            num(r.unconstrained.rmse),
            num(r.monotone.rmse),
            num(r.unconstrained.awoci),
            num(r.monotone.awoci),
            count(&r.unconstrained.covered),
            count(&r.monotone.covered),
            num(r.fraction_satisfied),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Single-column series with a named value column.
pub fn write_series_csv(path: &Path, index: &str, value: &str, values: &[f64]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record([index, value]).map_err(&err)?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([i.to_string(), num(*v)]).map_err(&err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// One JSON object per SCMC step.
pub fn write_trace_jsonl(path: &Path, trace: &Trace) -> Result<(), CliError> {
    let mut w = create(path)?;
    for rec in &trace.steps {
        let line = serde_json::to_string(rec).map_err(|e| CliError::io(path, e.into()))?;
        writeln!(w, "{line}").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, 12345.678901234567, -2.5e17] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
    }
}
