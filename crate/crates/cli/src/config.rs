//! Run configuration (TOML). Unknown keys are rejected at every level.

use std::path::Path;

use cro_core::models::Representation;
use cro_core::problems::{
    data::load_csv, split, split_sizes, BatteryParams, Dataset, Schema, Split, SplitMode, TaskSpec,
};
use cro_core::train::{Method, TrainConfig};
use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Portfolio,
    Battery,
}

impl TaskKind {
    pub fn schema(self) -> Schema {
        match self {
            TaskKind::Portfolio => Schema::Portfolio,
            TaskKind::Battery => Schema::Battery,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub mode: SplitMode,
    /// `[train, cal, test]` shares of the rows.
    pub fractions: [f64; 3],
    /// Absolute `[train, cal, test]` sizes; take precedence over `fractions`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sizes: Option<[usize; 3]>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            mode: SplitMode::Random,
            fractions: [0.3, 0.2, 0.5],
            sizes: None,
        }
    }
}

impl SplitConfig {
    pub fn apply(&self, ds: &Dataset, seed: u64) -> Result<Split> {
        Ok(match self.sizes {
            Some(sizes) => split_sizes(ds, self.mode, sizes, seed)?,
            None => split(ds, self.mode, self.fractions, seed)?,
        })
    }
}

/// One `(method, representation)` cell of the `bench` grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchRun {
    pub method: Method,
    pub representation: Representation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskKind,
    /// Risk levels; `bench` sweeps all of them, `calibrate` defaults to the first.
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub split: SplitConfig,
    pub battery: BatteryParams,
    pub train: TrainConfig,
    /// `bench` grid; empty means the single `train.method` / `train.representation` cell.
    pub runs: Vec<BenchRun>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Portfolio,
            alphas: vec![0.1],
            seeds: vec![0],
            split: SplitConfig::default(),
            battery: BatteryParams::default(),
            train: TrainConfig::default(),
            runs: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(CliError::Usage(format!(
                "alphas {:?} must be a nonempty list of values in (0, 1)",
                self.alphas
            )));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Usage("seeds must not be empty".into()));
        }
        self.train.validate()?;
        if self.task == TaskKind::Battery {
            self.battery.validate()?;
        }
        Ok(())
    }

    /// Resolved configuration as written next to every output.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn sha256(&self) -> Result<String> {
        Ok(hex_digest(self.to_toml()?.as_bytes()))
    }

    /// Grid cells for `bench`.
    pub fn bench_runs(&self) -> Vec<BenchRun> {
        if self.runs.is_empty() {
            vec![BenchRun {
                method: self.train.method,
                representation: self.train.representation,
            }]
        } else {
            self.runs.clone()
        }
    }

    pub fn task_spec(&self, y_dim: usize) -> Result<TaskSpec> {
        match self.task {
            TaskKind::Portfolio => Ok(TaskSpec::portfolio(y_dim)?),
            TaskKind::Battery => {
                if self.battery.horizon != y_dim {
                    return Err(CliError::Usage(format!(
                        "battery horizon {} does not match {y_dim} price columns",
                        self.battery.horizon
                    )));
                }
                Ok(TaskSpec::battery(&self.battery)?)
            }
        }
    }

    pub fn load_data(&self, path: &Path) -> Result<Dataset> {
        load_dataset(path, self.task)
    }
}

pub fn load_dataset(path: &Path, task: TaskKind) -> Result<Dataset> {
    let report = load_csv(path, task.schema())?;
    if report.nan_rows > 0 {
        warn!(
            "{}: skipped {} rows containing NaN",
            path.display(),
            report.nan_rows
        );
    }
    Ok(report.dataset)
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("tsak = \"portfolio\"").is_err());
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 0.1").is_err());
        assert!(RunConfig::from_toml("[train.solver]\ntolerance = 1e-6").is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_toml("task = \"battery\"\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.task, TaskKind::Battery);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }
}
