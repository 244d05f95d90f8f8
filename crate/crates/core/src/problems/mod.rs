//! Downstream tasks, datasets and splits.

pub mod battery_data;
pub mod data;
pub mod gmm;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CroError, Result};
use crate::solver::{self, ConicProgram, SolverOptions};

pub use battery_data::{synth_battery_data, BatterySynthConfig};
pub use data::{split, split_sizes, Dataset, FeatureScaler, Schema, Split, SplitMode};
pub use gmm::GmmSpec;

/// Task loss `f(y, z) = yᵀ F z + ½ zᵀ P z + pᵀ z + c0` with affine constraints
/// `A_in z <= b_in`, `A_eq z = b_eq`.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub f: DMatrix<f64>,
    pub quad: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub c0: f64,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    /// Names of `(z, A_in, A_eq)` sub-blocks, for diagnostics.
    pub in_name: String,
    pub eq_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatteryParams {
    pub horizon: usize,
    pub capacity: f64,
    pub efficiency: f64,
    pub rate_in: f64,
    pub rate_out: f64,
    /// Weight on keeping the state of charge near half capacity.
    pub lambda: f64,
    /// Weight on charge/discharge magnitude.
    pub eps: f64,
}

impl Default for BatteryParams {
    fn default() -> Self {
        Self {
            horizon: 24,
            capacity: 1.0,
            efficiency: 0.9,
            rate_in: 0.5,
            rate_out: 0.2,
            lambda: 0.1,
            eps: 0.05,
        }
    }
}

impl BatteryParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.horizon > 0
            && self.efficiency > 0.0
            && self.efficiency <= 1.0
            && self.capacity > 0.0
            && self.rate_in > 0.0
            && self.rate_out > 0.0
            && self.lambda > 0.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(CroError::InvalidArgument(format!(
                "invalid battery parameters {self:?}"
            )))
        }
    }
}

impl TaskSpec {
    pub fn n(&self) -> usize {
        self.f.nrows()
    }

    pub fn p(&self) -> usize {
        self.f.ncols()
    }

    /// Realized loss `f(y, z)`.
    pub fn loss(&self, y: &[f64], z: &[f64]) -> f64 {
        let yv = DVector::from_column_slice(y);
        let zv = DVector::from_column_slice(z);
        yv.dot(&(&self.f * &zv)) + 0.5 * zv.dot(&(&self.quad * &zv)) + self.lin.dot(&zv) + self.c0
    }

    /// `∂f/∂z = Fᵀ y + P z + p`.
    pub fn loss_grad_z(&self, y: &[f64], z: &[f64]) -> DVector<f64> {
        let yv = DVector::from_column_slice(y);
        let zv = DVector::from_column_slice(z);
        self.f.tr_mul(&yv) + &self.quad * &zv + &self.lin
    }

    /// Largest constraint violation of a decision.
    pub fn max_violation(&self, z: &[f64]) -> f64 {
        let zv = DVector::from_column_slice(z);
        let eq = (&self.a_eq * &zv - &self.b_eq).amax();
        let r = &self.a_in * &zv - &self.b_in;
        eq.max(r.iter().fold(0.0_f64, |m, v| m.max(*v)))
    }

    /// Program for a known `y` (a point uncertainty set).
    pub fn nominal_program(&self, y: &[f64]) -> ConicProgram {
        let p = self.p();
        let mut prog = ConicProgram::new(&[("z", p)]);
        prog.p = self.quad.clone();
        prog.c = self.f.tr_mul(&DVector::from_column_slice(y)) + &self.lin;
        prog.c0 = self.c0;
        if self.a_eq.nrows() > 0 {
            prog.push_eq(&self.eq_name, self.a_eq.clone(), self.b_eq.clone());
        }
        if self.a_in.nrows() > 0 {
            prog.push_in(&self.in_name, self.a_in.clone(), self.b_in.clone());
        }
        prog
    }

    /// Confirms the constraint set is nonempty with one solve.
    pub fn check_feasible(&self) -> Result<()> {
        let prog = self.nominal_program(&vec![0.0; self.n()]);
        let opts = SolverOptions::default().evaluation();
        solver::solve(&prog, &opts)?.ensure_optimal().map(|_| ())
    }

    pub fn battery(params: &BatteryParams) -> Result<Self> {
        params.validate()?;
        let t = params.horizon;
        let p = 3 * t;
        let (zin, zout, zst) = (0, t, 2 * t);
        let mut f = DMatrix::zeros(t, p);
        let mut quad = DMatrix::zeros(p, p);
        let mut lin = DVector::zeros(p);
        for h in 0..t {
            f[(h, zin + h)] = 1.0;
            f[(h, zout + h)] = -1.0;
            quad[(zin + h, zin + h)] = 2.0 * params.eps;
            quad[(zout + h, zout + h)] = 2.0 * params.eps;
            quad[(zst + h, zst + h)] = 2.0 * params.lambda;
            lin[zst + h] = -params.lambda * params.capacity;
        }
        let c0 = params.lambda * t as f64 * params.capacity * params.capacity / 4.0;
        // state_h - state_{h-1} + out_h - γ in_h = 0, state_{-1} = B/2
        let mut a_eq = DMatrix::zeros(t, p);
        let mut b_eq = DVector::zeros(t);
        for h in 0..t {
            a_eq[(h, zst + h)] = 1.0;
            if h > 0 {
                a_eq[(h, zst + h - 1)] = -1.0;
            } else {
                b_eq[h] = params.capacity / 2.0;
            }
            a_eq[(h, zout + h)] = 1.0;
            a_eq[(h, zin + h)] = -params.efficiency;
        }
        let mut a_in = DMatrix::zeros(2 * p, p);
        let mut b_in = DVector::zeros(2 * p);
        for j in 0..p {
            a_in[(j, j)] = -1.0;
            a_in[(p + j, j)] = 1.0;
            b_in[p + j] = if j < zout {
                params.rate_in
            } else if j < zst {
                params.rate_out
            } else {
                params.capacity
            };
        }
        Ok(Self {
            name: "battery".into(),
            f,
            quad,
            lin,
            c0,
            a_in,
            b_in,
            a_eq,
            b_eq,
            in_name: "battery_limits".into(),
            eq_name: "state_recursion".into(),
        })
    }

    pub fn portfolio(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(CroError::InvalidArgument(
                "portfolio needs at least one asset".into(),
            ));
        }
        Ok(Self {
            name: "portfolio".into(),
            f: -DMatrix::identity(n, n),
            quad: DMatrix::zeros(n, n),
            lin: DVector::zeros(n),
            c0: 0.0,
            a_in: -DMatrix::identity(n, n),
            b_in: DVector::zeros(n),
            a_eq: DMatrix::from_element(1, n, 1.0),
            b_eq: DVector::from_element(1, 1.0),
            in_name: "long_only".into(),
            eq_name: "budget".into(),
        })
    }
}
