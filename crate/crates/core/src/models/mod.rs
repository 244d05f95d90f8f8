//! Conditional nonconformity scores `s(x, y)`, convex in `y`.
//!
//! Every model works in standardized coordinates; see
//! [`crate::problems::FeatureScaler`] and [`crate::reform::Standardizer`].
//! The three representations differ in the shape of the sublevel set
//! `{y : s(x, y) <= q}`:
//!
//! * box: `[h_lo(x) - q, h_hi(x) + q]`
//! * ellipsoid: `{y : (y - μ(x))ᵀ Σ(x)⁻¹ (y - μ(x)) <= q}`
//! * PICNN: an arbitrary convex set.

pub mod mlp;
pub mod picnn;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward_subst_t, forward_subst, packed_index, softplus_inverse, Tape, Var};
use crate::error::{CroError, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub use mlp::Mlp;
pub use picnn::{GatedPicnn, Picnn, PicnnConfig, PicnnContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Box,
    Ellipsoid,
    Picnn,
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Representation::Box => "box",
            Representation::Ellipsoid => "ellipsoid",
            Representation::Picnn => "picnn",
        })
    }
}

impl FromStr for Representation {
    type Err = CroError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "box" => Ok(Self::Box),
            "ellipsoid" | "ellipse" => Ok(Self::Ellipsoid),
            "picnn" => Ok(Self::Picnn),
            other => Err(CroError::InvalidArgument(format!(
                "unknown representation `{other}` (expected box, ellipsoid or picnn)"
            ))),
        }
    }
}

/// Box score `max_i max(lo_i - y_i, y_i - hi_i)`.
pub fn box_score(lo: &[f64], hi: &[f64], y: &[f64]) -> f64 {
    lo.iter()
        .zip(hi)
        .zip(y)
        .map(|((l, h), v)| (l - v).max(v - h))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Squared Mahalanobis distance `(y - μ)ᵀ (L Lᵀ)⁻¹ (y - μ)` for a packed
/// lower-triangular Cholesky factor `L`.
pub fn ellipsoid_score(mu: &[f64], chol: &[f64], y: &[f64]) -> f64 {
    let n = mu.len();
    let r: Vec<f64> = y.iter().zip(mu).map(|(a, b)| a - b).collect();
    forward_subst(chol, &r, n).iter().map(|w| w * w).sum()
}

/// `Σ = L Lᵀ` as a dense row-major matrix.
pub fn chol_to_cov(chol: &[f64], n: usize) -> Vec<f64> {
    let mut cov = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..=i.min(j) {
                acc += chol[packed_index(i, k)] * chol[packed_index(j, k)];
            }
            cov[i * n + j] = acc;
        }
    }
    cov
}

/// Packed Cholesky factor of a dense SPD matrix.
pub fn cholesky_packed(cov: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * (n + 1) / 2];
    for i in 0..n {
        for j in 0..=i {
            let mut acc = cov[i * n + j];
            for k in 0..j {
                acc -= l[packed_index(i, k)] * l[packed_index(j, k)];
            }
            if i == j {
                if acc <= 0.0 || !acc.is_finite() {
                    return Err(CroError::InvalidArgument(format!(
                        "matrix is not positive definite (pivot {i} = {acc:e})"
                    )));
                }
                l[packed_index(i, i)] = acc.sqrt();
            } else {
                l[packed_index(i, j)] = acc / l[packed_index(j, j)];
            }
        }
    }
    Ok(l)
}

/// Uncertainty-set geometry at one input, in standardized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum SetGeometry {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ellipsoid { mu: Vec<f64>, chol: Vec<f64> },
    Picnn(GatedPicnn),
}

impl SetGeometry {
    pub fn score(&self, y: &[f64]) -> f64 {
        match self {
            SetGeometry::Box { lo, hi } => box_score(lo, hi, y),
            SetGeometry::Ellipsoid { mu, chol } => ellipsoid_score(mu, chol, y),
            SetGeometry::Picnn(g) => g.score(y),
        }
    }

    pub fn representation(&self) -> Representation {
        match self {
            SetGeometry::Box { .. } => Representation::Box,
            SetGeometry::Ellipsoid { .. } => Representation::Ellipsoid,
            SetGeometry::Picnn(_) => Representation::Picnn,
        }
    }
}

/// Head architectures. The first three are trained end to end; the residual
/// heads back the two-stage baselines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Head {
    /// Backbone output `r ∈ R^{2n}`: `h_lo = r[..n]`, `h_hi = h_lo + softplus(r[n..])`.
    Box(Mlp),
    /// Backbone output `μ ∈ R^n` followed by a packed Cholesky factor whose
    /// diagonal passes through softplus.
    Ellipsoid(Mlp),
    Picnn(Picnn),
    /// Point prediction `μ(x)` plus per-dimension radius `softplus(ρ(x))`.
    ResidualBox {
        point: Mlp,
        radius: Mlp,
    },
    /// Point prediction with a shared covariance `Σ̂ = L̂ L̂ᵀ`, optionally
    /// scaled per input by `softplus(ρ(x))²`.
    ResidualEllipsoid {
        point: Mlp,
        radius: Option<Mlp>,
        chol: Vec<f64>,
    },
}

/// Head outputs recorded on a tape.
#[derive(Debug, Clone)]
pub enum HeadVars {
    Bounds { lo: Var, hi: Var },
    Gaussian { mu: Var, chol: Var },
    Picnn(PicnnContext),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreModel {
    pub params: ParamStore,
    pub head: Head,
    x_dim: usize,
    y_dim: usize,
}

fn tri_len(n: usize) -> usize {
    n * (n + 1) / 2
}

fn diag_mask(n: usize) -> Vec<bool> {
    let mut mask = vec![false; tri_len(n)];
    for i in 0..n {
        mask[packed_index(i, i)] = true;
    }
    mask
}

impl ScoreModel {
    pub fn new_box(x_dim: usize, y_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let net = Mlp::new(&mut params, "box", x_dim, hidden, 2 * y_dim, rng);
        // start with unit-width boxes around zero
        let bias = net.output_bias();
        let b = params.get_mut(bias).data_mut();
        for (i, v) in b.iter_mut().enumerate() {
            *v = if i < y_dim {
                -0.5
            } else {
                softplus_inverse(1.0)
            };
        }
        Self {
            params,
            head: Head::Box(net),
            x_dim,
            y_dim,
        }
    }

    pub fn new_ellipsoid(x_dim: usize, y_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let out = y_dim + tri_len(y_dim);
        let net = Mlp::new(&mut params, "ellipsoid", x_dim, hidden, out, rng);
        let bias = net.output_bias();
        let b = params.get_mut(bias).data_mut();
        for i in 0..y_dim {
            b[y_dim + packed_index(i, i)] = softplus_inverse(1.0);
        }
        // near-identity factor at init; O(1) off-diagonals make L⁻¹ blow up with the dimension
        let w = net.output_weight();
        let wt = params.get_mut(w);
        let cols = wt.cols();
        let shrink = 1.0 / y_dim as f64;
        for v in &mut wt.data_mut()[y_dim * cols..] {
            *v *= shrink;
        }
        Self {
            params,
            head: Head::Ellipsoid(net),
            x_dim,
            y_dim,
        }
    }

    pub fn new_picnn(
        x_dim: usize,
        y_dim: usize,
        config: PicnnConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Picnn::new(&mut params, x_dim, y_dim, config, rng)?;
        Ok(Self {
            params,
            head: Head::Picnn(net),
            x_dim,
            y_dim,
        })
    }

    pub fn new_residual_box(
        x_dim: usize,
        y_dim: usize,
        hidden: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let mut params = ParamStore::new();
        let point = Mlp::new(&mut params, "point", x_dim, hidden, y_dim, rng);
        let radius = Mlp::new(&mut params, "radius", x_dim, hidden, y_dim, rng);
        Self {
            params,
            head: Head::ResidualBox { point, radius },
            x_dim,
            y_dim,
        }
    }

    /// Residual ellipsoid with shared factor `chol`; `scaled` adds a
    /// per-input radius network.
    pub fn new_residual_ellipsoid(
        x_dim: usize,
        y_dim: usize,
        hidden: &[usize],
        scaled: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut params = ParamStore::new();
        let point = Mlp::new(&mut params, "point", x_dim, hidden, y_dim, rng);
        let radius = scaled.then(|| Mlp::new(&mut params, "radius", x_dim, hidden, 1, rng));
        let mut chol = vec![0.0; tri_len(y_dim)];
        for i in 0..y_dim {
            chol[packed_index(i, i)] = 1.0;
        }
        Self {
            params,
            head: Head::ResidualEllipsoid {
                point,
                radius,
                chol,
            },
            x_dim,
            y_dim,
        }
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn y_dim(&self) -> usize {
        self.y_dim
    }

    pub fn representation(&self) -> Representation {
        match &self.head {
            Head::Box(_) | Head::ResidualBox { .. } => Representation::Box,
            Head::Ellipsoid(_) | Head::ResidualEllipsoid { .. } => Representation::Ellipsoid,
            Head::Picnn(_) => Representation::Picnn,
        }
    }

    pub fn picnn(&self) -> Option<&Picnn> {
        match &self.head {
            Head::Picnn(p) => Some(p),
            _ => None,
        }
    }

    /// Keeps the PICNN convex after a parameter update; no-op otherwise.
    pub fn project(&mut self) {
        if let Head::Picnn(p) = &self.head {
            p.project_nonneg(&mut self.params);
        }
    }

    /// Records head outputs for a batch of standardized inputs.
    pub fn head_vars(&self, tape: &mut Tape, x: Var) -> Result<HeadVars> {
        let n = self.y_dim;
        let store = &self.params;
        match &self.head {
            Head::Box(net) => {
                let out = net.forward(tape, store, x)?;
                let lo = tape.slice_cols(out, 0, n)?;
                let raw = tape.slice_cols(out, n, 2 * n)?;
                let gap = tape.softplus(raw);
                let hi = tape.add(lo, gap)?;
                Ok(HeadVars::Bounds { lo, hi })
            }
            Head::Ellipsoid(net) => {
                let out = net.forward(tape, store, x)?;
                let mu = tape.slice_cols(out, 0, n)?;
                let raw = tape.slice_cols(out, n, n + tri_len(n))?;
                let chol = tape.softplus_cols(raw, &diag_mask(n))?;
                Ok(HeadVars::Gaussian { mu, chol })
            }
            Head::Picnn(p) => Ok(HeadVars::Picnn(p.context(tape, store, x)?)),
            Head::ResidualBox { point, radius } => {
                let mu = point.forward(tape, store, x)?;
                let r = radius.forward(tape, store, x)?;
                let r = tape.softplus(r);
                let lo = tape.sub(mu, r)?;
                let hi = tape.add(mu, r)?;
                Ok(HeadVars::Bounds { lo, hi })
            }
            Head::ResidualEllipsoid {
                point,
                radius,
                chol,
            } => {
                let mu = point.forward(tape, store, x)?;
                let rows = tape.value(x).rows();
                let mut shared = Tensor::zeros(rows, chol.len());
                for r in 0..rows {
                    shared.row_slice_mut(r).copy_from_slice(chol);
                }
                let mut l = tape.leaf(shared);
                if let Some(radius) = radius {
                    let r = radius.forward(tape, store, x)?;
                    let r = tape.softplus(r);
                    l = tape.mul_col(l, r)?;
                }
                Ok(HeadVars::Gaussian { mu, chol: l })
            }
        }
    }

    /// Scores `[batch, 1]` given recorded head outputs.
    pub fn score_from_head(&self, tape: &mut Tape, head: &HeadVars, y: Var) -> Result<Var> {
        match head {
            HeadVars::Bounds { lo, hi } => {
                let below = tape.sub(*lo, y)?;
                let above = tape.sub(y, *hi)?;
                let worst = tape.max(below, above)?;
                Ok(tape.row_max(worst))
            }
            HeadVars::Gaussian { mu, chol } => {
                let r = tape.sub(y, *mu)?;
                let w = tape.tri_solve(*chol, r)?;
                let w2 = tape.square(w);
                Ok(tape.row_sum(w2))
            }
            HeadVars::Picnn(ctx) => match &self.head {
                Head::Picnn(p) => p.score_with(tape, ctx, y),
                _ => unreachable!("PICNN head vars from a non-PICNN model"),
            },
        }
    }

    pub fn scores_tape(&self, tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
        let head = self.head_vars(tape, x)?;
        self.score_from_head(tape, &head, y)
    }

    /// Scores for every row pair of standardized `(x, y)`.
    pub fn scores(&self, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        if x.rows() != y.rows() {
            return Err(CroError::Shape(format!(
                "scores: x {:?} vs y {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let mut out = Vec::with_capacity(x.rows());
        // chunking bounds tape memory on big calibration sets
        for start in (0..x.rows()).step_by(1024) {
            let idx: Vec<usize> = (start..(start + 1024).min(x.rows())).collect();
            let mut tape = Tape::new();
            let xv = tape.leaf(x.select_rows(&idx));
            let yv = tape.leaf(y.select_rows(&idx));
            let s = self.scores_tape(&mut tape, xv, yv)?;
            out.extend_from_slice(tape.value(s).data());
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(CroError::NonFinite("nonconformity scores".into()));
        }
        Ok(out)
    }

    /// Per-row set geometry for standardized inputs `x`.
    pub fn geometries(&self, x: &Tensor) -> Result<Vec<SetGeometry>> {
        if let Head::Picnn(p) = &self.head {
            let gated = p.gated(&self.params, x)?;
            debug_assert!(gated.iter().all(GatedPicnn::gated_weights_nonneg));
            return Ok(gated.into_iter().map(SetGeometry::Picnn).collect());
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let head = self.head_vars(&mut tape, xv)?;
        let out = (0..x.rows())
            .map(|i| match &head {
                HeadVars::Bounds { lo, hi } => SetGeometry::Box {
                    lo: tape.value(*lo).row_slice(i).to_vec(),
                    hi: tape.value(*hi).row_slice(i).to_vec(),
                },
                HeadVars::Gaussian { mu, chol } => SetGeometry::Ellipsoid {
                    mu: tape.value(*mu).row_slice(i).to_vec(),
                    chol: tape.value(*chol).row_slice(i).to_vec(),
                },
                HeadVars::Picnn(_) => unreachable!(),
            })
            .collect();
        Ok(out)
    }

    pub fn geometry(&self, x_row: &[f64]) -> Result<SetGeometry> {
        Ok(self
            .geometries(&Tensor::row(x_row))?
            .pop()
            .expect("one row"))
    }
}

/// `L⁻ᵀ L⁻¹ r`, i.e. `Σ⁻¹ r` through two triangular solves.
pub fn cov_inv_apply(chol: &[f64], r: &[f64]) -> Vec<f64> {
    let n = r.len();
    let w = forward_subst(chol, r, n);
    backward_subst_t(chol, &w, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn box_score_examples() {
        assert_eq!(box_score(&[0.0, 0.0], &[1.0, 1.0], &[0.5, 0.5]), -0.5);
        assert_eq!(box_score(&[0.0, 0.0], &[1.0, 1.0], &[2.0, 0.5]), 1.0);
    }

    #[test]
    fn ellipsoid_score_examples() {
        let eye = [1.0, 0.0, 1.0];
        assert!((ellipsoid_score(&[0.0, 0.0], &eye, &[3.0, 4.0]) - 25.0).abs() < 1e-12);
        assert_eq!(ellipsoid_score(&[0.3, -0.2], &eye, &[0.3, -0.2]), 0.0);
        // Σ = diag(4, 1) -> L = diag(2, 1)
        let l = [2.0, 0.0, 1.0];
        assert!((ellipsoid_score(&[0.0, 0.0], &l, &[2.0, 0.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cholesky_roundtrip() {
        let cov = [4.0, 2.0, 0.4, 2.0, 3.0, 0.5, 0.4, 0.5, 1.0];
        let l = cholesky_packed(&cov, 3).unwrap();
        let back = chol_to_cov(&l, 3);
        for (a, b) in cov.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(cholesky_packed(&[1.0, 2.0, 2.0, 1.0], 2).is_err());
    }

    #[test]
    fn tape_scores_match_geometry_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let models = vec![
            ScoreModel::new_box(3, 2, &[8], &mut rng),
            ScoreModel::new_ellipsoid(3, 2, &[8], &mut rng),
            ScoreModel::new_residual_box(3, 2, &[8], &mut rng),
            ScoreModel::new_residual_ellipsoid(3, 2, &[8], true, &mut rng),
            ScoreModel::new_picnn(
                3,
                2,
                PicnnConfig {
                    hidden: 6,
                    ..Default::default()
                },
                &mut rng,
            )
            .unwrap(),
        ];
        let x = Tensor::from_rows(&[vec![0.2, -1.0, 0.5], vec![1.0, 0.0, -0.3]]).unwrap();
        let y = Tensor::from_rows(&[vec![0.4, 0.1], vec![-2.0, 1.5]]).unwrap();
        for m in &models {
            let s = m.scores(&x, &y).unwrap();
            let g = m.geometries(&x).unwrap();
            for i in 0..2 {
                assert!((g[i].score(y.row_slice(i)) - s[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn representation_parses() {
        assert_eq!(
            "PICNN".parse::<Representation>().unwrap(),
            Representation::Picnn
        );
        assert!("hexagon".parse::<Representation>().is_err());
    }
}
