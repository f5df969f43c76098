//! Versioned, checksummed ensemble snapshots.

use std::path::Path;

use mono_gp::experiments::{Fit, RunSettings};
use mono_gp::gp::{Dataset, DerivativeSpec, Hyperparameters, Model, Point, ResponseTransform};
use mono_gp::scmc::{Ensemble, Trace};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SNAPSHOT_VERSION: u32 = 1;

/// Everything needed to rebuild the model and reuse the ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotPayload {
    pub config_digest: String,
    /// Training data on the original response scale.
    pub data: Dataset,
    pub predictions: Vec<Point>,
    pub spec: DerivativeSpec,
    pub settings: RunSettings,
    pub transform: ResponseTransform,
    pub ensemble: Ensemble,
    pub trace: Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSnapshot {
    pub version: u32,
    pub checksum: String,
    pub payload: SnapshotPayload,
}

#[derive(Deserialize)]
struct Header {
    version: u32,
}

fn checksum(payload: &SnapshotPayload) -> String {
    let json = serde_json::to_string(payload).expect("payload serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

impl EnsembleSnapshot {
    pub fn new(payload: SnapshotPayload) -> Self {
        Self {
            version: SNAPSHOT_VERSION,
            checksum: checksum(&payload),
            payload,
        }
    }

    pub fn from_fit(fit: &Fit, data: &Dataset, settings: &RunSettings, config_digest: String) -> Self {
        Self::new(SnapshotPayload {
            config_digest,
            data: data.clone(),
            predictions: fit.model.predictions().to_vec(),
            spec: fit.model.spec().clone(),
            settings: settings.clone(),
            transform: fit.transform,
            ensemble: fit.ensemble.clone(),
            trace: fit.trace.clone(),
        })
    }

    /// Rebuilds the fitted model on the transformed response scale.
    pub fn model(&self) -> Result<Model, CliError> {
        let p = &self.payload;
        let s = &p.settings;
        let hyper = match &s.fixed {
            Some(k) => Hyperparameters::Fixed(k.clone()),
            None => Hyperparameters::Sampled(s.priors),
        };
        let t = p.transform;
        let model = Model::with_jitter(
            p.data.map_outputs(|y| t.forward(y)),
            p.predictions.clone(),
            p.spec.clone(),
            hyper,
            s.jitter,
        )?;
        Ok(model)
    }

    pub fn digest_matches(&self, config_digest: &str) -> bool {
        self.payload.config_digest == config_digest
    }
}

pub fn save_snapshot(path: &Path, snap: &EnsembleSnapshot) -> Result<(), CliError> {
    let ens = &snap.payload.ensemble;
    let finite = ens.logweights.iter().all(|w| w.is_finite())
        && ens
            .particles
            .iter()
            .all(|p| p.variance.is_finite() && p.lengthscales.iter().chain(&p.ystar).chain(&p.yprime).all(|v| v.is_finite()));
    if !finite {
        return Err(CliError::Numerical("ensemble holds non-finite values; refusing to save".into()));
    }
    let json = serde_json::to_string(snap).expect("snapshot serializes");
    std::fs::write(path, json).map_err(|e| CliError::io(path, e))
}

pub fn load_snapshot(path: &Path) -> Result<EnsembleSnapshot, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parse_err = |e: serde_json::Error| CliError::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        message: e.to_string(),
    };
    let header: Header = serde_json::from_str(&text).map_err(parse_err)?;
    if header.version != SNAPSHOT_VERSION {
        return Err(CliError::Migration {
            path: path.to_path_buf(),
            found: header.version,
            expected: SNAPSHOT_VERSION,
        });
    }
    let snap: EnsembleSnapshot = serde_json::from_str(&text).map_err(parse_err)?;
    if checksum(&snap.payload) != snap.checksum {
        return Err(CliError::Checksum { path: path.to_path_buf() });
    }
    Ok(snap)
}
