//! Split conformal calibration and its exact gradient.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CroError, Result};
use crate::models::{GatedPicnn, ScoreModel};
use crate::tensor::Tensor;

/// Slack added on top of the minimal score when the set would be empty.
pub const QMIN_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub alpha: f64,
    /// Number of calibration scores `M`.
    pub m: usize,
    /// Rank `k = ⌈(M+1)(1-α)⌉` in `1..=M+1`.
    pub k: usize,
    pub q: f64,
    /// Original index of the score equal to `q`; `None` when `q = +∞`.
    pub grad_index: Option<usize>,
}

impl CalibrationRecord {
    pub fn is_finite(&self) -> bool {
        self.grad_index.is_some()
    }

    /// `q`, or an error explaining that `α` is too small for `M` points.
    pub fn finite_q(&self) -> Result<f64> {
        if self.is_finite() {
            Ok(self.q)
        } else {
            Err(CroError::AlphaTooSmall {
                alpha: self.alpha,
                m: self.m,
            })
        }
    }
}

/// `⌈(M+1) β⌉`, robust to the rounding error in `(M+1) β`.
pub fn rank(m: usize, beta: f64) -> usize {
    let x = (m as f64 + 1.0) * beta;
    let k = (x - 1e-9 * x.max(1.0)).ceil().max(1.0) as usize;
    k.min(m + 1)
}

/// The `⌈(M+1)β⌉`-th smallest element of `scores ∪ {+∞}` and the index of
/// the score that realizes it. Ties resolve by original index.
pub fn quantile(scores: &[f64], beta: f64) -> Result<(f64, Option<usize>)> {
    if scores.is_empty() {
        return Err(CroError::InvalidArgument(
            "quantile of an empty score set".into(),
        ));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(CroError::InvalidArgument(format!(
            "beta {beta} must lie in (0, 1)"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CroError::NonFinite("calibration scores".into()));
    }
    let m = scores.len();
    let k = rank(m, beta);
    if k == m + 1 {
        return Ok((f64::INFINITY, None));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let idx = order[k - 1];
    Ok((scores[idx], Some(idx)))
}

/// Builds the record at risk level `alpha`.
pub fn calibrate_scores(scores: &[f64], alpha: f64) -> Result<CalibrationRecord> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CroError::InvalidArgument(format!(
            "alpha {alpha} must lie in (0, 1)"
        )));
    }
    let (q, grad_index) = quantile(scores, 1.0 - alpha)?;
    Ok(CalibrationRecord {
        alpha,
        m: scores.len(),
        k: rank(scores.len(), 1.0 - alpha),
        q,
        grad_index,
    })
}

/// Scores every calibration pair (standardized coordinates) and takes the quantile.
pub fn calibrate(
    model: &ScoreModel,
    x: &Tensor,
    y: &Tensor,
    alpha: f64,
) -> Result<CalibrationRecord> {
    let scores = model.scores(x, y)?;
    calibrate_scores(&scores, alpha)
}

/// `dq/dθ`: the gradient of the selected score, or zero on the `+∞` branch.
pub fn quantile_gradient(record: &CalibrationRecord, score_grads: &[Vec<f64>]) -> Vec<f64> {
    let width = score_grads.first().map_or(0, Vec::len);
    match record.grad_index {
        Some(i) => score_grads[i].clone(),
        None => vec![0.0; width],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonemptyOutcome {
    pub q: f64,
    /// Minimal score found (an upper bound on it when `q` was not raised).
    pub q_min: f64,
    /// True when `q` was raised (its gradient must then be treated as zero).
    pub raised: bool,
}

/// Approximate `min_y s(x, y)` by subgradient descent with restarts.
pub fn min_score(g: &GatedPicnn, seed: u64) -> (f64, Vec<f64>) {
    const RESTARTS: usize = 5;
    const ITERS: usize = 500;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut best = (f64::INFINITY, vec![0.0; g.n]);
    let mut stalled = true;
    for r in 0..RESTARTS {
        let mut y: Vec<f64> = if r == 0 {
            vec![0.0; g.n]
        } else {
            (0..g.n).map(|_| normal.sample(&mut rng)).collect()
        };
        let mut local_best = f64::INFINITY;
        let mut best_at_checkpoint = f64::INFINITY;
        for it in 0..ITERS {
            let (s, grad) = g.score_grad(&y);
            if s < local_best {
                local_best = s;
            }
            if s < best.0 {
                best = (s, y.clone());
            }
            let gn = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gn < 1e-12 {
                break;
            }
            if it == ITERS - 100 {
                best_at_checkpoint = local_best;
            }
            let step = 0.5 / ((it + 1) as f64).sqrt() / gn.max(1.0);
            for (yi, gi) in y.iter_mut().zip(&grad) {
                *yi -= step * gi;
            }
        }
        if best_at_checkpoint - local_best < 1e-6 {
            stalled = false;
        }
    }
    if stalled {
        warn!(
            "score minimization did not settle; using best iterate {:.3e}",
            best.0
        );
    }
    best
}

/// Raises `q` to `min_y s(x, y) + slack` when the sublevel set would be empty.
pub fn ensure_nonempty(g: &GatedPicnn, q: f64, seed: u64) -> NonemptyOutcome {
    // the origin (the standardized mean) already certifies a nonempty set most of the time
    let at_origin = g.score(&vec![0.0; g.n]);
    if at_origin + QMIN_SLACK <= q {
        return NonemptyOutcome {
            q,
            q_min: at_origin,
            raised: false,
        };
    }
    let (q_min, _) = min_score(g, seed);
    let floor = q_min + QMIN_SLACK;
    if q >= floor {
        NonemptyOutcome {
            q,
            q_min,
            raised: false,
        }
    } else {
        NonemptyOutcome {
            q: floor,
            q_min,
            raised: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_examples() {
        let s = [1.0, 3.0, 2.0, 4.0];
        assert_eq!(quantile(&s, 0.8).unwrap(), (4.0, Some(3)));
        assert_eq!(quantile(&s, 0.9).unwrap(), (f64::INFINITY, None));
        assert_eq!(quantile(&[3.0], 0.5).unwrap(), (3.0, Some(0)));
        assert!(quantile(&[], 0.5).is_err());
    }

    #[test]
    fn ties_go_to_lower_index() {
        let s = [2.0, 1.0, 2.0, 2.0];
        assert_eq!(quantile(&s, 0.4).unwrap(), (2.0, Some(0)));
        assert_eq!(quantile(&s, 0.5).unwrap(), (2.0, Some(2)));
    }

    #[test]
    fn rank_tolerates_rounding() {
        assert_eq!(rank(4, 0.8), 4);
        assert_eq!(rank(9, 0.9), 9);
        assert_eq!(rank(399, 0.9), 360);
        assert_eq!(rank(4, 0.9), 5);
    }

    #[test]
    fn infinite_record_reports_alpha_too_small() {
        let rec = calibrate_scores(&[0.1, 0.2], 0.2).unwrap();
        assert!(matches!(
            rec.finite_q(),
            Err(CroError::AlphaTooSmall { m: 2, .. })
        ));
        assert_eq!(quantile_gradient(&rec, &[vec![1.0], vec![2.0]]), vec![0.0]);
    }
}
