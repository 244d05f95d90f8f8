use nalgebra::{DMatrix, DVector};

use crate::error::{CroError, Result};

/// A named contiguous range of variables or constraint rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl Block {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

pub(crate) fn block_of(blocks: &[Block], idx: usize) -> &str {
    blocks
        .iter()
        .find(|b| b.range().contains(&idx))
        .map_or("?", |b| b.name.as_str())
}

/// `t * ||G v + h||_2`, smoothed by the solver to `t * sqrt(||G v + h||^2 + δ)`.
#[derive(Debug, Clone)]
pub struct NormTerm {
    pub weight: f64,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

/// ```text
/// minimize    ½ vᵀ P v + cᵀ v + c0 + t ||G v + h||
/// subject to  A_eq v  = b_eq
///             A_in v <= b_in
/// ```
#[derive(Debug, Clone)]
pub struct ConicProgram {
    pub vars: Vec<Block>,
    pub p: DMatrix<f64>,
    pub c: DVector<f64>,
    pub c0: f64,
    pub norm: Option<NormTerm>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub eq_rows: Vec<Block>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub in_rows: Vec<Block>,
}

impl ConicProgram {
    /// Empty program over the given variable blocks (zero objective, no constraints).
    pub fn new(vars: &[(&str, usize)]) -> Self {
        let mut blocks = Vec::with_capacity(vars.len());
        let mut start = 0;
        for (name, len) in vars {
            blocks.push(Block {
                name: (*name).to_string(),
                start,
                len: *len,
            });
            start += len;
        }
        let n = start;
        Self {
            vars: blocks,
            p: DMatrix::zeros(n, n),
            c: DVector::zeros(n),
            c0: 0.0,
            norm: None,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            eq_rows: Vec::new(),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
            in_rows: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.c.len()
    }

    pub fn var_block(&self, name: &str) -> Option<&Block> {
        self.vars.iter().find(|b| b.name == name)
    }

    pub fn eq_block(&self, name: &str) -> Option<&Block> {
        self.eq_rows.iter().find(|b| b.name == name)
    }

    pub fn in_block(&self, name: &str) -> Option<&Block> {
        self.in_rows.iter().find(|b| b.name == name)
    }

    pub fn push_eq(&mut self, name: &str, a: DMatrix<f64>, b: DVector<f64>) {
        assert_eq!(a.ncols(), self.num_vars(), "equality block `{name}` width");
        assert_eq!(a.nrows(), b.len(), "equality block `{name}` rhs");
        self.eq_rows.push(Block {
            name: name.to_string(),
            start: self.a_eq.nrows(),
            len: a.nrows(),
        });
        self.a_eq = vstack(&self.a_eq, &a);
        self.b_eq = vconcat(&self.b_eq, &b);
    }

    pub fn push_in(&mut self, name: &str, a: DMatrix<f64>, b: DVector<f64>) {
        assert_eq!(
            a.ncols(),
            self.num_vars(),
            "inequality block `{name}` width"
        );
        assert_eq!(a.nrows(), b.len(), "inequality block `{name}` rhs");
        self.in_rows.push(Block {
            name: name.to_string(),
            start: self.a_in.nrows(),
            len: a.nrows(),
        });
        self.a_in = vstack(&self.a_in, &a);
        self.b_in = vconcat(&self.b_in, &b);
    }

    /// Objective at `v` with the exact (unsmoothed) norm.
    pub fn objective(&self, v: &DVector<f64>) -> f64 {
        let mut val = 0.5 * v.dot(&(&self.p * v)) + self.c.dot(v) + self.c0;
        if let Some(nt) = &self.norm {
            val += nt.weight * (&nt.g * v + &nt.h).norm();
        }
        val
    }

    /// Largest violation of any constraint at `v`.
    pub fn max_violation(&self, v: &DVector<f64>) -> f64 {
        let eq = (&self.a_eq * v - &self.b_eq).amax();
        let r = &self.a_in * v - &self.b_in;
        let ineq = r.iter().fold(0.0_f64, |m, x| m.max(*x));
        eq.max(ineq)
    }

    /// Checks dimensions, finiteness, `t >= 0` and that `P` is PSD.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        let dims_ok = self.p.shape() == (n, n)
            && self.a_eq.ncols() == n
            && self.a_in.ncols() == n
            && self.a_eq.nrows() == self.b_eq.len()
            && self.a_in.nrows() == self.b_in.len();
        if !dims_ok {
            return Err(CroError::Shape(format!(
                "program: P {:?}, c {}, A_eq {:?}, b_eq {}, A_in {:?}, b_in {}",
                self.p.shape(),
                n,
                self.a_eq.shape(),
                self.b_eq.len(),
                self.a_in.shape(),
                self.b_in.len()
            )));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|x| x.is_finite());
        let finite_v = |m: &DVector<f64>| m.iter().all(|x| x.is_finite());
        if !(finite(&self.p)
            && finite_v(&self.c)
            && finite(&self.a_eq)
            && finite_v(&self.b_eq)
            && finite(&self.a_in)
            && finite_v(&self.b_in)
            && self.c0.is_finite())
        {
            return Err(CroError::NonFinite("program data".into()));
        }
        if let Some(nt) = &self.norm {
            if nt.g.ncols() != n || nt.g.nrows() != nt.h.len() {
                return Err(CroError::Shape(format!(
                    "norm term: G {:?}, h {}",
                    nt.g.shape(),
                    nt.h.len()
                )));
            }
            if !(nt.weight >= 0.0 && nt.weight.is_finite() && finite(&nt.g) && finite_v(&nt.h)) {
                return Err(CroError::InvalidArgument(format!(
                    "norm weight must be finite and >= 0 (got {})",
                    nt.weight
                )));
            }
        }
        let asym = (&self.p - self.p.transpose()).amax();
        if asym > 1e-9 * (1.0 + self.p.amax()) {
            return Err(CroError::InvalidArgument(format!(
                "P is not symmetric (max asymmetry {asym:e})"
            )));
        }
        if n > 0 {
            let jitter = 1e-10 * (1.0 + self.p.amax());
            let shifted = &self.p + DMatrix::identity(n, n) * jitter;
            if shifted.cholesky().is_none() {
                return Err(CroError::InvalidArgument(
                    "P is not positive semidefinite".into(),
                ));
            }
        }
        Ok(())
    }
}

pub(crate) fn vstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

fn vconcat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}
