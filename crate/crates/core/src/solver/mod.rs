//! Primal-dual interior-point solver for [`ConicProgram`]s and implicit
//! differentiation of the returned argmin through the KKT conditions.
//!
//! The norm term is smoothed to `t * sqrt(||G v + h||^2 + δ)`, which keeps
//! every Newton system symmetric and lets one code path serve LPs, QPs and the
//! ellipsoidal programs.

mod kkt;
mod program;

use log::{trace, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CroError, Result};

pub use kkt::KktFactor;
use kkt::Structure;
pub use program::{Block, ConicProgram, NormTerm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    /// KKT residual tolerance.
    pub tol: f64,
    pub max_iter: usize,
    /// Norm smoothing `δ`.
    pub smoothing: f64,
    /// `ρ ||z||^2` added on the variable block named `z`; zero at evaluation.
    pub rho: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            smoothing: 1e-8,
            rho: 1e-6,
        }
    }
}

impl SolverOptions {
    /// Same options with the training regularizer switched off.
    pub fn evaluation(&self) -> Self {
        Self {
            rho: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub v: DVector<f64>,
    /// Equality multipliers.
    pub y: DVector<f64>,
    /// Inequality multipliers (`>= 0`).
    pub lam: DVector<f64>,
    /// Inequality slacks `b_in - A_in v`.
    pub s: DVector<f64>,
    /// Objective of the unregularized, unsmoothed program at `v`.
    pub value: f64,
    pub iterations: usize,
    pub detail: String,
    kkt: Option<KktFactor>,
    /// Copy of the regularized Hessian's `P` (needed by the adjoint).
    p_eff: DMatrix<f64>,
    smoothing: f64,
}

impl SolveResult {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    /// Errors unless the solve reached optimality.
    pub fn ensure_optimal(self) -> Result<Self> {
        if self.is_optimal() {
            Ok(self)
        } else {
            Err(CroError::Solver {
                status: self.status,
                detail: self.detail,
            })
        }
    }

    pub fn block(&self, prog: &ConicProgram, name: &str) -> Option<Vec<f64>> {
        let b = prog.var_block(name)?;
        Some(self.v.rows(b.start, b.len).iter().copied().collect())
    }

    pub fn kkt(&self) -> Option<&KktFactor> {
        self.kkt.as_ref()
    }

    /// Reverse-mode sensitivity of a loss `ℓ(v*)` with respect to every piece
    /// of program data, given `∂ℓ/∂v` at the solution.
    pub fn differentiate_solution(
        &self,
        prog: &ConicProgram,
        dl_dv: &DVector<f64>,
    ) -> Result<Adjoint> {
        let n = prog.num_vars();
        if dl_dv.len() != n {
            return Err(CroError::Shape(format!(
                "differentiate_solution: gradient of length {} for {n} variables",
                dl_dv.len()
            )));
        }
        if !self.is_optimal() {
            warn!("differentiating a non-optimal solution ({:?})", self.status);
        }
        if self.s.iter().zip(&self.lam).any(|(s, l)| s + l < 1e-10) {
            warn!("weak strict complementarity at the solution; gradient is a subgradient");
        }
        let d: Vec<f64> = self.lam.iter().zip(&self.s).map(|(l, s)| l / s).collect();
        let hess = objective_hessian(prog, &self.p_eff, &self.v, self.smoothing);
        let (xi, xi_eq, eta) = match augmented_adjoint(prog, &hess, &self.lam, &self.s, dl_dv) {
            Some(sol) => sol,
            None => {
                warn!("augmented adjoint system is singular, using the reduced factor");
                let rebuilt;
                let kkt = match &self.kkt {
                    Some(k) => k,
                    None => {
                        let st = Structure::new(prog);
                        rebuilt = KktFactor::factor(&st, &hess, &d, 1e-8)?;
                        &rebuilt
                    }
                };
                let (xi, xi_eq) = kkt.solve(&-dl_dv, &DVector::zeros(prog.a_eq.nrows()));
                let a_xi = &prog.a_in * &xi;
                let eta =
                    DVector::from_iterator(d.len(), d.iter().zip(a_xi.iter()).map(|(a, b)| a * b));
                (xi, xi_eq, eta)
            }
        };
        if xi.iter().chain(xi_eq.iter()).any(|v| !v.is_finite()) {
            return Err(CroError::NonFinite("KKT adjoint solve".into()));
        }
        let norm = prog.norm.as_ref().map(|nt| {
            let u = &nt.g * &self.v + &nt.h;
            let r = (u.norm_squared() + self.smoothing).sqrt();
            let a = &nt.g * &xi;
            let au = a.dot(&u);
            let dt = au / r;
            let t = nt.weight;
            let dh = (&a / r - &u * (au / (r * r * r))) * t;
            let mut dg = DMatrix::zeros(nt.g.nrows(), nt.g.ncols());
            for k in 0..nt.g.nrows() {
                for j in 0..nt.g.ncols() {
                    dg[(k, j)] = t * xi[j] * u[k] / r + dh[k] * self.v[j];
                }
            }
            NormGrad { dt, dh, dg }
        });
        Ok(Adjoint {
            xi,
            xi_eq,
            eta,
            v: self.v.clone(),
            y: self.y.clone(),
            lam: self.lam.clone(),
            norm,
        })
    }
}

/// Gradients of the norm term data.
#[derive(Debug, Clone)]
pub struct NormGrad {
    pub dt: f64,
    pub dh: DVector<f64>,
    pub dg: DMatrix<f64>,
}

/// Output of [`SolveResult::differentiate_solution`]: gradients with respect
/// to program data, stored in factored form.
#[derive(Debug, Clone)]
pub struct Adjoint {
    pub xi: DVector<f64>,
    pub xi_eq: DVector<f64>,
    pub eta: DVector<f64>,
    v: DVector<f64>,
    y: DVector<f64>,
    lam: DVector<f64>,
    pub norm: Option<NormGrad>,
}

impl Adjoint {
    pub fn dc(&self) -> &DVector<f64> {
        &self.xi
    }

    pub fn dp(&self, i: usize, j: usize) -> f64 {
        self.xi[i] * self.v[j]
    }

    pub fn da_eq(&self, i: usize, j: usize) -> f64 {
        self.y[i] * self.xi[j] + self.xi_eq[i] * self.v[j]
    }

    pub fn db_eq(&self, i: usize) -> f64 {
        -self.xi_eq[i]
    }

    pub fn da_in(&self, i: usize, j: usize) -> f64 {
        self.lam[i] * self.xi[j] + self.eta[i] * self.v[j]
    }

    pub fn db_in(&self, i: usize) -> f64 {
        -self.eta[i]
    }
}

/// Adjoint KKT solve with the active inequality rows kept as rows:
///
/// ```text
/// [ H + A_Iᵀ D_I A_I   A_eqᵀ   A_Aᵀ    ] [ξ  ]   [-∂ℓ/∂v]
/// [ A_eq               0       0       ] [ξ_e] = [0     ]
/// [ A_A                0       -D_A⁻¹  ] [η_A]   [0     ]
/// ```
///
/// `I` are rows with `λ <= s`, `A` the rest. Eliminating `η_A` gives the
/// reduced system, whose `D_A` entries reach `1/μ` at a converged solution.
fn augmented_adjoint(
    prog: &ConicProgram,
    hess: &DMatrix<f64>,
    lam: &DVector<f64>,
    s: &DVector<f64>,
    dl_dv: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n = prog.num_vars();
    let m_eq = prog.a_eq.nrows();
    let active: Vec<usize> = (0..lam.len()).filter(|&i| lam[i] > s[i]).collect();
    let dim = n + m_eq + active.len();
    let mut k = DMatrix::zeros(dim, dim);
    k.view_mut((0, 0), (n, n)).copy_from(hess);
    for i in (0..lam.len()).filter(|&i| lam[i] <= s[i]) {
        let row = prog.a_in.row(i);
        k.view_mut((0, 0), (n, n))
            .ger(lam[i] / s[i], &row.transpose(), &row.transpose(), 1.0);
    }
    k.view_mut((n, 0), (m_eq, n)).copy_from(&prog.a_eq);
    k.view_mut((0, n), (n, m_eq))
        .copy_from(&prog.a_eq.transpose());
    for (r, &i) in active.iter().enumerate() {
        let row = n + m_eq + r;
        for j in 0..n {
            k[(row, j)] = prog.a_in[(i, j)];
            k[(j, row)] = prog.a_in[(i, j)];
        }
        k[(row, row)] = -s[i] / lam[i];
    }
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&-dl_dv);
    let sol = k.lu().solve(&rhs)?;
    let xi = sol.rows(0, n).into_owned();
    let xi_eq = sol.rows(n, m_eq).into_owned();
    let a_xi = &prog.a_in * &xi;
    let mut eta = DVector::from_fn(lam.len(), |i, _| lam[i] / s[i] * a_xi[i]);
    for (r, &i) in active.iter().enumerate() {
        eta[i] = sol[n + m_eq + r];
    }
    Some((xi, xi_eq, eta))
}

fn with_rho(prog: &ConicProgram, rho: f64) -> DMatrix<f64> {
    let mut p = prog.p.clone();
    if rho > 0.0 {
        if let Some(b) = prog.var_block("z") {
            for j in b.range() {
                p[(j, j)] += 2.0 * rho;
            }
        }
    }
    p
}

fn objective_gradient(
    prog: &ConicProgram,
    p: &DMatrix<f64>,
    v: &DVector<f64>,
    smoothing: f64,
) -> DVector<f64> {
    let mut g = p * v + &prog.c;
    if let Some(nt) = &prog.norm {
        let u = &nt.g * v + &nt.h;
        let r = (u.norm_squared() + smoothing).sqrt();
        g += nt.g.tr_mul(&u) * (nt.weight / r);
    }
    g
}

fn objective_hessian(
    prog: &ConicProgram,
    p: &DMatrix<f64>,
    v: &DVector<f64>,
    smoothing: f64,
) -> DMatrix<f64> {
    let mut h = p.clone();
    if let Some(nt) = &prog.norm {
        let u = &nt.g * v + &nt.h;
        let r = (u.norm_squared() + smoothing).sqrt();
        let w = nt.g.tr_mul(&u);
        h += nt.g.tr_mul(&nt.g) * (nt.weight / r);
        h -= &w * w.transpose() * (nt.weight / (r * r * r));
    }
    h
}

fn smoothed_objective(prog: &ConicProgram, p: &DMatrix<f64>, v: &DVector<f64>, delta: f64) -> f64 {
    let mut val = 0.5 * v.dot(&(p * v)) + prog.c.dot(v);
    if let Some(nt) = &prog.norm {
        val += nt.weight * ((&nt.g * v + &nt.h).norm_squared() + delta).sqrt();
    }
    val
}

fn max_step(x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    x.iter()
        .zip(dx.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

struct Residuals {
    dual: DVector<f64>,
    eq: DVector<f64>,
    ineq: DVector<f64>,
    mu: f64,
}

impl Residuals {
    fn merit(&self) -> f64 {
        self.feasibility().max(self.mu)
    }

    /// Residuals a Newton step reduces to first order; a centering step
    /// leaves `mu` alone, so it is not part of the line-search test.
    fn feasibility(&self) -> f64 {
        self.dual.amax().max(self.eq.amax()).max(self.ineq.amax())
    }
}

/// Solves `prog` with Mehrotra's predictor-corrector method.
pub fn solve(prog: &ConicProgram, opts: &SolverOptions) -> Result<SolveResult> {
    prog.validate()?;
    let n = prog.num_vars();
    let m_eq = prog.a_eq.nrows();
    let m_in = prog.a_in.nrows();
    let p_eff = with_rho(prog, opts.rho);
    let st = {
        let mut tmp = prog.clone();
        tmp.p = p_eff.clone();
        Structure::new(&tmp)
    };
    let target = opts.smoothing;
    // continuation: the smoothing shrinks with the gap
    let mut delta = if prog.norm.is_some() {
        target.max(1.0)
    } else {
        target
    };

    let mut v = DVector::<f64>::zeros(n);
    let mut y = DVector::<f64>::zeros(m_eq);
    let mut s = (&prog.b_in - &prog.a_in * &v).map(|x| x.max(1.0));
    let mut lam = DVector::<f64>::from_element(m_in, 1.0);

    // residuals are judged relative to the largest term they sum, so the
    // stopping test sits above the roundoff floor of the data
    let data_p = prog.b_eq.amax().max(prog.b_in.amax());
    let data_d = prog.c.amax();
    let scales = |v: &DVector<f64>, y: &DVector<f64>, lam: &DVector<f64>| -> (f64, f64) {
        let av = (&prog.a_eq * v).amax().max((&prog.a_in * v).amax());
        let terms = (&p_eff * v)
            .amax()
            .max(prog.a_eq.tr_mul(y).amax())
            .max(prog.a_in.tr_mul(lam).amax());
        (1.0 + data_p.max(av), 1.0 + data_d.max(terms))
    };
    // complementarity is not driven below this, which keeps `λ / s` bounded
    let mu_floor = 0.1 * opts.tol;

    let residuals =
        |v: &DVector<f64>, y: &DVector<f64>, s: &DVector<f64>, lam: &DVector<f64>, delta: f64| {
            let dual = objective_gradient(prog, &p_eff, v, delta)
                + prog.a_eq.tr_mul(y)
                + prog.a_in.tr_mul(lam);
            Residuals {
                dual,
                eq: &prog.a_eq * v - &prog.b_eq,
                ineq: &prog.a_in * v + s - &prog.b_in,
                mu: if m_in > 0 {
                    s.dot(lam) / m_in as f64
                } else {
                    0.0
                },
            }
        };

    let mut status = SolveStatus::MaxIter;
    let mut detail = String::new();
    let mut iterations = 0;
    let mut res = residuals(&v, &y, &s, &lam, delta);
    for it in 0..=opts.max_iter {
        iterations = it;
        let (_, scale_d) = scales(&v, &y, &lam);
        // shrink only once the current smoothed problem is nearly solved
        if delta > target
            && res.dual.amax() <= (res.mu.max(delta.sqrt()) * 10.0).max(opts.tol) * scale_d
        {
            let gap = if m_in > 0 { res.mu } else { res.merit() };
            let next = (gap * gap).min(delta * 0.5).max(target);
            if next < delta {
                delta = next;
                res = residuals(&v, &y, &s, &lam, delta);
            }
        }
        let (scale_p, scale_d) = scales(&v, &y, &lam);
        let pres = res.eq.amax().max(res.ineq.amax());
        let dres = res.dual.amax();
        trace!(
            "it {it}: primal {pres:.2e} dual {dres:.2e} mu {:.2e} delta {delta:.1e}",
            res.mu
        );
        if delta <= target
            && pres <= opts.tol * scale_p
            && dres <= opts.tol * scale_d
            && res.mu <= opts.tol
        {
            status = SolveStatus::Optimal;
            break;
        }
        if v.amax() > 1e10 {
            let j = v.iamax();
            status = SolveStatus::Unbounded;
            detail = format!(
                "variable block `{}` diverges",
                program::block_of(&prog.vars, j)
            );
            break;
        }
        let lam_max = lam.amax();
        let y_max = y.amax();
        if lam_max.max(y_max) > 1e10 && pres > opts.tol * scale_p {
            status = SolveStatus::Infeasible;
            detail = if lam_max >= y_max {
                format!(
                    "inequality block `{}` cannot be satisfied",
                    program::block_of(&prog.in_rows, lam.iamax())
                )
            } else {
                format!(
                    "equality block `{}` cannot be satisfied",
                    program::block_of(&prog.eq_rows, y.iamax())
                )
            };
            break;
        }
        if it == opts.max_iter {
            if pres > opts.tol.sqrt() * scale_p {
                status = SolveStatus::Infeasible;
                let (blocks, idx) = if res.eq.amax() >= res.ineq.amax() {
                    (&prog.eq_rows, res.eq.iamax())
                } else {
                    (&prog.in_rows, res.ineq.iamax())
                };
                detail = format!(
                    "no feasible point found; largest residual in block `{}`",
                    program::block_of(blocks, idx)
                );
            } else {
                detail = format!(
                    "iteration limit {} reached (primal {pres:.2e}, dual {dres:.2e}, gap {:.2e})",
                    opts.max_iter, res.mu
                );
            }
            break;
        }

        let hess = objective_hessian(prog, &p_eff, &v, delta);
        let d: Vec<f64> = lam.iter().zip(s.iter()).map(|(l, s)| l / s).collect();
        let kkt = match KktFactor::factor(&st, &hess, &d, 1e-13) {
            Ok(k) => k,
            Err(_) => KktFactor::factor(&st, &hess, &d, 1e-8)?,
        };
        let direction = |rc: &DVector<f64>| {
            let mut w = DVector::zeros(m_in);
            for i in 0..m_in {
                w[i] = (-rc[i] + lam[i] * res.ineq[i]) / s[i];
            }
            let rhs_v = -&res.dual - prog.a_in.tr_mul(&w);
            let rhs_y = -&res.eq;
            let (dv, dy) = kkt.solve(&rhs_v, &rhs_y);
            let ds = -&res.ineq - &prog.a_in * &dv;
            let mut dl = DVector::zeros(m_in);
            for i in 0..m_in {
                dl[i] = (-rc[i] - lam[i] * ds[i]) / s[i];
            }
            (dv, dy, ds, dl)
        };

        let rc_aff = s.component_mul(&lam);
        let (dv_a, _, ds_a, dl_a) = direction(&rc_aff);
        if dv_a.iter().any(|x| !x.is_finite()) {
            status = SolveStatus::MaxIter;
            detail = "Newton system produced non-finite direction".into();
            break;
        }
        let (dv, dy, ds, dl) = if m_in > 0 {
            let a_aff = max_step(&s, &ds_a).min(max_step(&lam, &dl_a)).min(1.0);
            let mu_aff = (&s + &ds_a * a_aff).dot(&(&lam + &dl_a * a_aff)) / m_in as f64;
            let sigma = (mu_aff / res.mu).powi(3).clamp(0.0, 1.0);
            let target = (sigma * res.mu).max(mu_floor);
            let rc = rc_aff + ds_a.component_mul(&dl_a) - DVector::from_element(m_in, target);
            direction(&rc)
        } else {
            direction(&rc_aff)
        };
        let mut alpha = (0.99 * max_step(&s, &ds).min(max_step(&lam, &dl))).min(1.0);
        let step = |a: f64| {
            residuals(
                &(&v + &dv * a),
                &(&y + &dy * a),
                &(&s + &ds * a),
                &(&lam + &dl * a),
                delta,
            )
        };
        let mut next = step(alpha);
        if prog.norm.is_some() {
            let base = res.feasibility();
            let f0 = smoothed_objective(prog, &p_eff, &v, delta);
            let mut tries = 0;
            while next.feasibility() > (1.0 - 1e-4 * alpha) * base && tries < 30 {
                let f1 = smoothed_objective(prog, &p_eff, &(&v + &dv * alpha), delta);
                if f1 <= f0 && next.feasibility() <= base {
                    break;
                }
                alpha *= 0.5;
                next = step(alpha);
                tries += 1;
            }
            trace!(
                "line search: step {alpha:.2e} after {tries} halvings, |dv| {:.2e}",
                dv.amax()
            );
        }
        v += &dv * alpha;
        y += &dy * alpha;
        s += &ds * alpha;
        lam += &dl * alpha;
        res = next;
    }

    let kkt = if status == SolveStatus::Optimal {
        let hess = objective_hessian(prog, &p_eff, &v, delta);
        let d: Vec<f64> = lam.iter().zip(s.iter()).map(|(l, s)| l / s).collect();
        KktFactor::factor(&st, &hess, &d, 1e-13)
            .or_else(|_| KktFactor::factor(&st, &hess, &d, 1e-8))
            .ok()
    } else {
        None
    };
    Ok(SolveResult {
        status,
        value: prog.objective(&v),
        v,
        y,
        lam,
        s,
        iterations,
        detail,
        kkt,
        p_eff,
        smoothing: delta,
    })
}
