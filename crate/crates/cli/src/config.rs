//! Run configuration files (TOML).
//!
//! ```toml
//! data = "train.csv"
//!
//! [predictions]
//! grid = { lo = [0.0], hi = [1.0], count = [50] }
//!
//! [placement]
//! strategy = "gap_grid"
//! dim = 0
//! direction = "increasing"
//! lo = 0.4
//! hi = 0.9
//! count = 10
//!
//! [sampler]
//! n_particles = 2000
//! seed = 7
//! ```

use std::path::{Path, PathBuf};

use mono_gp::design::PlacementPlan;
use mono_gp::experiments::RunSettings;
use mono_gp::gp::{Dataset, DerivativeSpec, Point};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_dataset, load_points};
use crate::error::CliError;

/// Tensor-product grid: `count[k]` equally spaced values on `[lo[k], hi[k]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub count: Vec<usize>,
}

impl GridSpec {
    pub fn points(&self) -> Vec<Point> {
        let mut out: Vec<Point> = vec![Vec::new()];
        for k in 0..self.lo.len() {
            let n = self.count[k];
            let axis: Vec<f64> = (0..n)
                .map(|i| {
                    if n == 1 {
                        self.lo[k]
                    } else {
                        self.lo[k] + (self.hi[k] - self.lo[k]) * i as f64 / (n - 1) as f64
                    }
                })
                .collect();
            out = out
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        out
    }
}

/// Exactly one of the three fields must be given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionSource {
    pub points: Option<Vec<Point>>,
    pub file: Option<PathBuf>,
    pub grid: Option<GridSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: PathBuf,
    #[serde(default)]
    pub predictions: PredictionSource,
    /// Absent means an unconstrained fit.
    pub placement: Option<PlacementPlan>,
    #[serde(default)]
    pub sampler: RunSettings,
}

/// A loaded configuration with its inputs read and checked.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub data: Dataset,
    pub predictions: Vec<Point>,
    pub spec: DerivativeSpec,
    pub digest: String,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data = base.join(&cfg.data);
        if let Some(f) = &mut cfg.predictions.file {
            *f = base.join(&*f);
        }
        Ok(cfg)
    }

    /// sha256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Reads the data and prediction files and checks every field.
    pub fn resolve(self, path: &Path) -> Result<Resolved, CliError> {
        let bad = |message: String| CliError::Config {
            path: path.to_path_buf(),
            message,
        };
        self.sampler.validate().map_err(|e| bad(e.to_string()))?;
        let data = load_dataset(&self.data)?;
        let d = data.dims();
        let src = &self.predictions;
        let given = [src.points.is_some(), src.file.is_some(), src.grid.is_some()];
        let predictions = match given.iter().filter(|&&g| g).count() {
            0 => data.inputs().to_vec(),
            1 => {
                if let Some(p) = &src.points {
                    p.clone()
                } else if let Some(f) = &src.file {
                    load_points(f)?
                } else {
                    let g = src.grid.as_ref().expect("one source");
                    if g.lo.len() != d || g.hi.len() != d || g.count.len() != d {
                        return Err(bad(format!("prediction grid must have {d} entries per field")));
                    }
                    if g.count.iter().any(|&c| c == 0) || g.lo.iter().zip(&g.hi).any(|(l, h)| !(l <= h)) {
                        return Err(bad("prediction grid needs lo <= hi and positive counts".into()));
                    }
                    g.points()
                }
            }
            _ => return Err(bad("give only one of predictions.points, .file, .grid".into())),
        };
        if let Some(i) = predictions.iter().position(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
            return Err(bad(format!("prediction point {} must have {d} finite coordinates", i + 1)));
        }
        let spec = match &self.placement {
            Some(plan) => plan.resolve(d).map_err(|e| bad(e.to_string()))?,
            None => DerivativeSpec::none(),
        };
        let digest = self.digest();
        Ok(Resolved {
            config: self,
            data,
            predictions,
            spec,
            digest,
        })
    }
}

pub fn load_resolved(path: &Path) -> Result<Resolved, CliError> {
    RunConfig::load(path)?.resolve(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_row_major() {
        let g = GridSpec {
            lo: vec![0.0, 0.0],
            hi: vec![1.0, 2.0],
            count: vec![2, 3],
        };
        let p = g.points();
        assert_eq!(p.len(), 6);
        assert_eq!(p[0], vec![0.0, 0.0]);
        assert_eq!(p[1], vec![0.0, 1.0]);
        assert_eq!(p[5], vec![1.0, 2.0]);
    }

    #[test]
    fn parses_full_config() {
        let text = r#"
            data = "train.csv"
            [predictions]
            grid = { lo = [0.0], hi = [1.0], count = [5] }
            [placement]
            strategy = "gap_grid"
            dim = 0
            direction = "increasing"
            lo = 0.4
            hi = 0.9
            count = 10
            [sampler]
            n_particles = 100
            schedule = [0.0, 1.0, 10.0]
            resample = { ess_below = 0.5 }
            latent_proposal = "prior_correlation"
        "#;
        let cfg = RunConfig::parse(text, Path::new("/tmp/x/run.toml")).unwrap();
        assert_eq!(cfg.data, PathBuf::from("/tmp/x/train.csv"));
        assert_eq!(cfg.sampler.n_particles, 100);
        assert_eq!(cfg.sampler.n_mh, 5);
        assert!(cfg.sampler.validate().is_ok());
        let spec = cfg.placement.as_ref().unwrap().resolve(1).unwrap();
        assert_eq!(spec.total(), 10);
        assert_eq!(cfg.digest(), cfg.clone().digest());
        assert_eq!(cfg.digest().len(), 64);
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(RunConfig::parse("data = 'a.csv'\nbogus = 1\n", Path::new("c.toml")).is_err());
    }
}
