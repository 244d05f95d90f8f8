//! Robust decisions for new inputs and test-set metrics.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use log::warn;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{effective_q, par_map, Predictor};
use crate::error::{CroError, Result};
use crate::models::{chol_to_cov, SetGeometry};
use crate::problems::{Dataset, TaskSpec};
use crate::reform::reform;
use crate::solver::SolverOptions;

/// Tolerance of the "realized loss <= robust value" audit on covered points.
pub const BOUND_TOL: f64 = 1e-6;

static BOUND_VIOLATIONS: AtomicUsize = AtomicUsize::new(0);

/// Violations of the covered-point bound across every evaluation in this process.
pub fn bound_violations_total() -> usize {
    BOUND_VIOLATIONS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub z: Vec<f64>,
    /// Worst-case task loss of `z` over the set.
    pub robust_value: f64,
    /// Threshold actually used.
    pub q: f64,
    pub q_raised: bool,
}

/// Exact worst case of `cᵀy` over a box or ellipsoid; `None` for PICNN sets.
fn worst_case_linear(geom: &SetGeometry, q: f64, c: &DVector<f64>) -> Option<f64> {
    match geom {
        SetGeometry::Box { lo, hi } => Some(
            (0..lo.len())
                .map(|i| (c[i] * (lo[i] - q)).max(c[i] * (hi[i] + q)))
                .sum(),
        ),
        SetGeometry::Ellipsoid { mu, chol } => {
            let n = mu.len();
            let cov = chol_to_cov(chol, n);
            let mut quad = 0.0;
            for i in 0..n {
                for j in 0..n {
                    quad += c[i] * cov[i * n + j] * c[j];
                }
            }
            let lin: f64 = mu.iter().zip(c.iter()).map(|(m, c)| m * c).sum();
            Some(lin + (q.max(0.0) * quad.max(0.0)).sqrt())
        }
        SetGeometry::Picnn(_) => None,
    }
}

/// Solves the robust problem for one set (standardized task) at `ρ = 0`.
pub fn decide(
    geom: &SetGeometry,
    q: f64,
    task: &TaskSpec,
    opts: &SolverOptions,
    seed: u64,
) -> Result<Decision> {
    let (q_eff, raised) = effective_q(geom, q, seed);
    let r = reform(geom, q_eff, task)?;
    let res = r.solve(&opts.evaluation())?;
    let z = r.decision(&res);
    let zv = DVector::from_column_slice(&z);
    let rest = 0.5 * zv.dot(&(&task.quad * &zv)) + task.lin.dot(&zv) + task.c0;
    let robust_value =
        worst_case_linear(geom, q_eff, &(&task.f * &zv)).map_or(res.value, |w| w + rest);
    Ok(Decision {
        z,
        robust_value,
        q: q_eff,
        q_raised: raised,
    })
}

/// Robust decision for one raw input row using the stored calibration.
pub fn infer(
    pred: &Predictor,
    task: &TaskSpec,
    x: &[f64],
    opts: &SolverOptions,
) -> Result<Decision> {
    let q = pred.record()?.finite_q()?;
    if x.len() != pred.model.x_dim() {
        return Err(CroError::Shape(format!(
            "input has {} features, model expects {}",
            x.len(),
            pred.model.x_dim()
        )));
    }
    let geom = pred.model.geometry(&pred.x_scaler.transform_row(x))?;
    decide(&geom, q, &pred.task(task), opts, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub alpha: f64,
    pub representation: String,
    pub method: String,
    pub task_loss_mean: f64,
    pub task_loss_std: f64,
    pub coverage: f64,
    pub robust_value_mean: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metrics: MetricsRow,
    pub losses: Vec<f64>,
    pub robust_values: Vec<f64>,
    pub covered: Vec<bool>,
    /// Covered points whose realized loss exceeded the robust value.
    pub bound_violations: usize,
    /// Largest `loss - robust value` over covered points.
    pub max_bound_gap: f64,
    /// Sets whose threshold had to be raised to be nonempty.
    pub raised: usize,
}

/// Task loss, coverage and robust value over a raw test set.
pub fn evaluate(
    pred: &Predictor,
    test: &Dataset,
    task: &TaskSpec,
    opts: &SolverOptions,
    seed: u64,
    threads: usize,
) -> Result<EvalReport> {
    let start = Instant::now();
    let rec = pred.record()?;
    let q = rec.finite_q()?;
    if test.is_empty() {
        return Err(CroError::Data("empty test set".into()));
    }
    let xs = pred.std_x(&test.x);
    let scores = pred.model.scores(&xs, &pred.std_y(&test.y))?;
    let covered: Vec<bool> = scores.iter().map(|s| *s <= q).collect();
    let geoms = pred.model.geometries(&xs)?;
    let wrapped = pred.task(task);
    let decisions = par_map(&geoms, threads, |i, g| {
        decide(g, q, &wrapped, opts, seed ^ i as u64)
    });
    let mut losses = Vec::with_capacity(test.len());
    let mut robust_values = Vec::with_capacity(test.len());
    let (mut violations, mut max_gap, mut raised) = (0, f64::NEG_INFINITY, 0);
    for (i, d) in decisions.into_iter().enumerate() {
        let d = d?;
        let loss = task.loss(test.y.row_slice(i), &d.z);
        if covered[i] {
            let gap = loss - d.robust_value;
            max_gap = max_gap.max(gap);
            if gap > BOUND_TOL {
                violations += 1;
                warn!(
                    "covered test point {i}: loss {loss} exceeds robust value {}",
                    d.robust_value
                );
            }
        }
        raised += usize::from(d.q_raised);
        losses.push(loss);
        robust_values.push(d.robust_value);
    }
    BOUND_VIOLATIONS.fetch_add(violations, Ordering::Relaxed);
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let metrics = MetricsRow {
        seed,
        alpha: rec.alpha,
        representation: pred.model.representation().to_string(),
        method: pred.method.to_string(),
        task_loss_mean: mean,
        task_loss_std: var.sqrt(),
        coverage: covered.iter().filter(|c| **c).count() as f64 / n,
        robust_value_mean: robust_values.iter().sum::<f64>() / n,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(EvalReport {
        metrics,
        losses,
        robust_values,
        covered,
        bound_violations: violations,
        max_bound_gap: max_gap,
        raised,
    })
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(CroError::from))
        .collect()
}
