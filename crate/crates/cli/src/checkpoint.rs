//! Binary checkpoint.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (kind tag, shape table, model structure, standardizers,
//! calibration, metadata), then every parameter as row-major little-endian
//! `f64` in shape-table order.

use std::path::Path;

use cro_core::problems::TaskSpec;
use cro_core::train::{Method, Predictor, TrainReport};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"CROCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epochs: Vec<(String, usize)>,
    pub config_sha256: String,
    pub config: RunConfig,
    pub build: String,
}

impl Metadata {
    pub fn new(config: &RunConfig, seed: u64, report: &TrainReport) -> Result<Self> {
        Ok(Self {
            seed,
            epochs_run: report.epochs_run(),
            best_epochs: report.best_epochs.clone(),
            config_sha256: config.sha256()?,
            config: config.clone(),
            build: crate::build_id(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    method: Method,
    shapes: Vec<(String, Vec<usize>)>,
    predictor: Predictor,
    metadata: Metadata,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub predictor: Predictor,
    pub metadata: Metadata,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(rec) = &self.predictor.calibration {
            if !rec.q.is_finite() {
                return Err(CliError::Checkpoint(format!(
                    "refusing to store an infinite threshold (alpha {} with {} calibration points)",
                    rec.alpha, rec.m
                )));
            }
        }
        let params = &self.predictor.model.params;
        let header = Header {
            kind: self.predictor.model.representation().to_string(),
            method: self.predictor.method,
            shapes: params.shape_table(),
            predictor: self.predictor.clone(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let values = params.flat_values();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| CliError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CliError::Checkpoint(format!(
                "format version {version} is not supported (this build reads version {FORMAT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if len > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..len])?;
        let raw = &body[len..];
        if !raw.len().is_multiple_of(8) {
            return Err(bad("parameter section is not a whole number of f64 values"));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut predictor = header.predictor;
        predictor.model.params.restore(&header.shapes, &values)?;
        let kind = predictor.model.representation().to_string();
        if kind != header.kind {
            return Err(CliError::Checkpoint(format!(
                "kind tag `{}` does not match the stored `{kind}` model",
                header.kind
            )));
        }
        Ok(Self {
            predictor,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            CliError::Usage(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        Self::from_bytes(&bytes)
    }

    /// Task the model was trained for, rebuilt from the stored configuration.
    pub fn task(&self) -> Result<TaskSpec> {
        self.metadata.config.task_spec(self.predictor.model.y_dim())
    }
}
