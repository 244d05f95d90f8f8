//! Auxiliary losses for the two-stage baselines, as plain functions and as
//! tape builders.

use crate::autodiff::{forward_subst, packed_index, Tape, Var};
use crate::error::Result;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `max(β (y - ŷ), (β - 1)(y - ŷ))`.
pub fn pinball(beta: f64, y_hat: f64, y: f64) -> f64 {
    let d = y - y_hat;
    (beta * d).max((beta - 1.0) * d)
}

/// Lower bound at level `α/2`, upper bound at `1 - α/2`, summed over dimensions.
pub fn pinball_loss(lo: &[f64], hi: &[f64], y: &[f64], alpha: f64) -> f64 {
    assert_eq!(lo.len(), y.len(), "pinball_loss: lo vs y");
    assert_eq!(hi.len(), y.len(), "pinball_loss: hi vs y");
    lo.iter()
        .zip(hi)
        .zip(y)
        .map(|((l, h), v)| pinball(alpha / 2.0, *l, *v) + pinball(1.0 - alpha / 2.0, *h, *v))
        .sum()
}

/// `-ln N(y | μ, L Lᵀ)` with `L` packed lower-triangular.
pub fn gaussian_nll(mu: &[f64], chol: &[f64], y: &[f64]) -> f64 {
    let n = mu.len();
    let r: Vec<f64> = y.iter().zip(mu).map(|(a, b)| a - b).collect();
    let w = forward_subst(chol, &r, n);
    let logdet: f64 = (0..n).map(|i| chol[packed_index(i, i)].ln()).sum();
    0.5 * w.iter().map(|v| v * v).sum::<f64>() + logdet + n as f64 * HALF_LN_2PI
}

/// Per-row pinball at level `beta`, summed over columns: `[batch, 1]`.
pub(crate) fn pinball_tape(tape: &mut Tape, beta: f64, y_hat: Var, y: Var) -> Result<Var> {
    let d = tape.sub(y, y_hat)?;
    let a = tape.scale(d, beta);
    let b = tape.scale(d, beta - 1.0);
    let m = tape.max(a, b)?;
    Ok(tape.row_sum(m))
}

/// Mean over rows of [`pinball_loss`].
pub(crate) fn interval_pinball_tape(
    tape: &mut Tape,
    lo: Var,
    hi: Var,
    y: Var,
    alpha: f64,
) -> Result<Var> {
    let a = pinball_tape(tape, alpha / 2.0, lo, y)?;
    let b = pinball_tape(tape, 1.0 - alpha / 2.0, hi, y)?;
    let s = tape.add(a, b)?;
    Ok(tape.mean(s))
}

/// Mean over rows of [`gaussian_nll`].
pub(crate) fn gaussian_nll_tape(
    tape: &mut Tape,
    mu: Var,
    chol: Var,
    y: Var,
    n: usize,
) -> Result<Var> {
    let r = tape.sub(y, mu)?;
    let w = tape.tri_solve(chol, r)?;
    let w2 = tape.square(w);
    let quad = tape.row_sum(w2);
    let quad = tape.scale(quad, 0.5);
    let diag: Vec<usize> = (0..n).map(|i| packed_index(i, i)).collect();
    let d = tape.gather_cols(chol, &diag)?;
    let ld = tape.ln(d);
    let ld = tape.row_sum(ld);
    let per_row = tape.add(quad, ld)?;
    let m = tape.mean(per_row);
    Ok(tape.add_scalar(m, n as f64 * HALF_LN_2PI))
}

/// Mean over rows of the squared error, summed over columns.
pub(crate) fn mse_tape(tape: &mut Tape, pred: Var, y: Var) -> Result<Var> {
    let d = tape.sub(pred, y)?;
    let d2 = tape.square(d);
    let s = tape.row_sum(d2);
    Ok(tape.mean(s))
}
