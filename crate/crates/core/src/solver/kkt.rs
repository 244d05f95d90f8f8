//! Reduced KKT system
//!
//! ```text
//! [ H + A_inᵀ D A_in   A_eqᵀ ] [dv]   [r_v]
//! [ A_eq               0     ] [dy] = [r_y]
//! ```
//!
//! Variables whose Hessian row is diagonal (no coupling through `P`, the norm
//! term or multi-variable inequality rows) are eliminated before the dense LU.

use nalgebra::{DMatrix, DVector, LU};

use crate::error::{CroError, Result};
use crate::solver::program::ConicProgram;
use crate::solver::SolveStatus;

/// Sparse row view of a dense matrix.
pub(crate) fn sparse_rows(m: &DMatrix<f64>) -> Vec<Vec<(usize, f64)>> {
    (0..m.nrows())
        .map(|i| {
            (0..m.ncols())
                .filter_map(|j| {
                    let v = m[(i, j)];
                    (v != 0.0).then_some((j, v))
                })
                .collect()
        })
        .collect()
}

/// Structure shared by all iterations of one solve.
#[derive(Debug, Clone)]
pub(crate) struct Structure {
    pub in_rows: Vec<Vec<(usize, f64)>>,
    pub eq_rows: Vec<Vec<(usize, f64)>>,
    /// `eq_cols[j]`: nonzeros `(row, value)` of column `j` of `A_eq`.
    pub eq_cols: Vec<Vec<(usize, f64)>>,
    pub keep: Vec<usize>,
    pub elim: Vec<usize>,
    /// Position of each variable inside `keep`, if kept.
    pub pos: Vec<Option<usize>>,
}

impl Structure {
    pub fn new(prog: &ConicProgram) -> Self {
        let n = prog.num_vars();
        let in_rows = sparse_rows(&prog.a_in);
        let eq_rows = sparse_rows(&prog.a_eq);
        let mut eq_cols = vec![Vec::new(); n];
        for (i, row) in eq_rows.iter().enumerate() {
            for &(j, v) in row {
                eq_cols[j].push((i, v));
            }
        }
        let mut diagonal = vec![true; n];
        let mut touched = vec![false; n];
        for row in &in_rows {
            for &(j, _) in row {
                touched[j] = true;
                if row.len() > 1 {
                    diagonal[j] = false;
                }
            }
        }
        for j in 0..n {
            if (0..n).any(|i| i != j && prog.p[(i, j)] != 0.0) {
                diagonal[j] = false;
            }
            if let Some(nt) = &prog.norm {
                if nt.g.column(j).iter().any(|v| *v != 0.0) {
                    diagonal[j] = false;
                }
            }
            // needs a strictly positive pivot
            if !touched[j] && prog.p[(j, j)] <= 0.0 {
                diagonal[j] = false;
            }
        }
        let (elim, keep): (Vec<usize>, Vec<usize>) = (0..n).partition(|&j| diagonal[j]);
        let mut pos = vec![None; n];
        for (k, &j) in keep.iter().enumerate() {
            pos[j] = Some(k);
        }
        Self {
            in_rows,
            eq_rows,
            eq_cols,
            keep,
            elim,
            pos,
        }
    }
}

/// Factorized reduced KKT matrix at one iterate.
#[derive(Debug, Clone)]
pub struct KktFactor {
    keep: Vec<usize>,
    elim: Vec<usize>,
    /// Diagonal Hessian entries of the eliminated variables.
    elim_diag: Vec<f64>,
    eq_cols_elim: Vec<Vec<(usize, f64)>>,
    /// `None` when every variable was eliminated and there are no equalities.
    lu: Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    n: usize,
    m_eq: usize,
}

impl KktFactor {
    /// `hess` is the full `n x n` Hessian of the objective (without the
    /// barrier part); `d = λ / s` scales the inequality rows.
    pub(crate) fn factor(st: &Structure, hess: &DMatrix<f64>, d: &[f64], reg: f64) -> Result<Self> {
        let n = hess.nrows();
        let m_eq = st.eq_rows.len();
        let nk = st.keep.len();
        let mut elim_diag: Vec<f64> = st.elim.iter().map(|&j| hess[(j, j)] + reg).collect();
        let mut elim_pos = vec![usize::MAX; n];
        for (k, &j) in st.elim.iter().enumerate() {
            elim_pos[j] = k;
        }
        let dim = nk + m_eq;
        let mut k_mat = DMatrix::<f64>::zeros(dim, dim);
        for (a, &i) in st.keep.iter().enumerate() {
            for (b, &j) in st.keep.iter().enumerate() {
                k_mat[(a, b)] = hess[(i, j)];
            }
            k_mat[(a, a)] += reg;
        }
        for (row, &di) in st.in_rows.iter().zip(d) {
            if row.len() == 1 && elim_pos[row[0].0] != usize::MAX {
                let (j, v) = row[0];
                elim_diag[elim_pos[j]] += di * v * v;
                continue;
            }
            for &(j1, v1) in row {
                let a = st.pos[j1].expect("coupled variable is kept");
                for &(j2, v2) in row {
                    let b = st.pos[j2].expect("coupled variable is kept");
                    k_mat[(a, b)] += di * v1 * v2;
                }
            }
        }
        for (i, row) in st.eq_rows.iter().enumerate() {
            for &(j, v) in row {
                if let Some(a) = st.pos[j] {
                    k_mat[(nk + i, a)] = v;
                    k_mat[(a, nk + i)] = v;
                }
            }
        }
        let eq_cols_elim: Vec<Vec<(usize, f64)>> =
            st.elim.iter().map(|&j| st.eq_cols[j].clone()).collect();
        for (col, &dj) in eq_cols_elim.iter().zip(&elim_diag) {
            for &(i1, v1) in col {
                for &(i2, v2) in col {
                    k_mat[(nk + i1, nk + i2)] -= v1 * v2 / dj;
                }
            }
        }
        for i in 0..m_eq {
            k_mat[(nk + i, nk + i)] -= reg;
        }
        if k_mat.iter().any(|v| !v.is_finite()) {
            return Err(CroError::NonFinite("KKT matrix".into()));
        }
        let lu = (dim > 0).then(|| k_mat.lu());
        if lu.as_ref().is_some_and(|lu| !lu.is_invertible()) {
            return Err(CroError::Solver {
                status: SolveStatus::MaxIter,
                detail: "singular KKT matrix".into(),
            });
        }
        Ok(Self {
            keep: st.keep.clone(),
            elim: st.elim.clone(),
            elim_diag,
            eq_cols_elim,
            lu,
            n,
            m_eq,
        })
    }

    pub fn solve(&self, r_v: &DVector<f64>, r_y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let nk = self.keep.len();
        let mut rhs = DVector::zeros(nk + self.m_eq);
        for (a, &j) in self.keep.iter().enumerate() {
            rhs[a] = r_v[j];
        }
        for i in 0..self.m_eq {
            rhs[nk + i] = r_y[i];
        }
        for ((col, &dj), &j) in self
            .eq_cols_elim
            .iter()
            .zip(&self.elim_diag)
            .zip(&self.elim)
        {
            let scaled = r_v[j] / dj;
            for &(i, v) in col {
                rhs[nk + i] -= v * scaled;
            }
        }
        let sol = match &self.lu {
            Some(lu) => lu
                .solve(&rhs)
                .unwrap_or_else(|| DVector::from_element(rhs.len(), f64::NAN)),
            None => rhs,
        };
        let mut dv = DVector::zeros(self.n);
        for (a, &j) in self.keep.iter().enumerate() {
            dv[j] = sol[a];
        }
        let dy = sol.rows(nk, self.m_eq).into_owned();
        for ((col, &dj), &j) in self
            .eq_cols_elim
            .iter()
            .zip(&self.elim_diag)
            .zip(&self.elim)
        {
            let mut acc = r_v[j];
            for &(i, v) in col {
                acc -= v * dy[i];
            }
            dv[j] = acc / dj;
        }
        (dv, dy)
    }
}
