//! Robust counterparts `min_z max_{y ∈ Ω} f(y, z)` as single convex programs,
//! plus brute-force inner-maximization oracles.
//!
//! All sets live in standardized coordinates `y' = W⁻¹ (y - μ)`; the task is
//! rewritten accordingly by [`Standardizer::wrap_task`] so that decisions and
//! losses stay in raw units.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::packed_index;
use crate::error::{CroError, Result};
use crate::models::{chol_to_cov, GatedPicnn, SetGeometry};
use crate::problems::TaskSpec;
use crate::solver::{
    self, Adjoint, ConicProgram, NormTerm, SolveResult, SolveStatus, SolverOptions,
};
use crate::tensor::Tensor;

/// Element-wise affine map `y = μ + W y'` with `W = diag(scale)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if mean.len() != scale.len() || scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(CroError::InvalidArgument(
                "standardizer needs matching lengths and positive finite scales".into(),
            ));
        }
        Ok(Self { mean, scale })
    }

    /// Column means and standard deviations of `y`.
    pub fn fit(y: &Tensor) -> Self {
        let s = crate::problems::FeatureScaler::fit(y);
        Self {
            mean: s.mean,
            scale: s.std,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn to_std_row(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn from_std_row(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| m + s * v)
            .collect()
    }

    pub fn to_std(&self, y: &Tensor) -> Tensor {
        let mut out = y.clone();
        for r in 0..out.rows() {
            let row = self.to_std_row(y.row_slice(r));
            out.row_slice_mut(r).copy_from_slice(&row);
        }
        out
    }

    /// Task in standardized coordinates: `F' = W F`, `p' = p + Fᵀ μ`, so that
    /// `f'(y', z) = f(μ + W y', z)`.
    pub fn wrap_task(&self, task: &TaskSpec) -> TaskSpec {
        let mut out = task.clone();
        for i in 0..task.n() {
            for j in 0..task.p() {
                out.f[(i, j)] = self.scale[i] * task.f[(i, j)];
            }
        }
        out.lin = &task.lin + task.f.tr_mul(&DVector::from_column_slice(&self.mean));
        out
    }
}

/// `A`, `b` of the LP relaxation `{(y, σ[, κ]) : A (y, σ[, κ]) <= b}` of a PICNN
/// sublevel set.
///
/// Rows: `L·d` rows `-σ_l <= 0`; `L·d` rows `V_l y + W_l σ_l - σ_{l+1} <= -b_l`;
/// one output row `V_L y + W_L σ_L [+ ε κ] <= q - b_L`; with the modified
/// output, `2n` rows `±y_i - κ <= 0`. Columns: `y` (n), `σ_1..σ_L` (L·d), then
/// `κ` when present.
#[derive(Debug, Clone)]
pub struct PicnnDualData {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub n: usize,
    pub d: usize,
    pub layers: usize,
    pub kappa: bool,
}

impl PicnnDualData {
    pub fn output_row(&self) -> usize {
        2 * self.layers * self.d
    }

    fn sigma_col(&self, l: usize) -> usize {
        // σ_l for l in 1..=L
        self.n + (l - 1) * self.d
    }
}

pub fn build_picnn_dual(g: &GatedPicnn, q: f64) -> PicnnDualData {
    let (n, d, depth) = (g.n, g.d, g.layers);
    let kappa = g.modified_output && g.eps_inf > 0.0;
    let rows = 2 * depth * d + 1 + if kappa { 2 * n } else { 0 };
    let cols = n + depth * d + usize::from(kappa);
    let mut a = DMatrix::zeros(rows, cols);
    let mut b = DVector::zeros(rows);
    let mut data = PicnnDualData {
        a: DMatrix::zeros(0, 0),
        b: DVector::zeros(0),
        n,
        d,
        layers: depth,
        kappa,
    };
    for k in 0..depth * d {
        a[(k, n + k)] = -1.0;
    }
    for l in 0..depth {
        let base = depth * d + l * d;
        for i in 0..d {
            let r = base + i;
            for j in 0..n {
                a[(r, j)] = g.v[l][i * n + j];
            }
            if l > 0 {
                let c0 = data.sigma_col(l);
                for k in 0..d {
                    a[(r, c0 + k)] = g.w[l][i * d + k];
                }
            }
            a[(r, data.sigma_col(l + 1) + i)] = -1.0;
            b[r] = -g.b[l][i];
        }
    }
    let out = data.output_row();
    for j in 0..n {
        a[(out, j)] = g.v[depth][j];
    }
    let c0 = data.sigma_col(depth);
    for k in 0..d {
        a[(out, c0 + k)] = g.w[depth][k];
    }
    b[out] = q - g.b[depth][0];
    if kappa {
        let kc = cols - 1;
        a[(out, kc)] = g.eps_inf;
        for i in 0..n {
            a[(out + 1 + 2 * i, i)] = 1.0;
            a[(out + 1 + 2 * i, kc)] = -1.0;
            a[(out + 2 + 2 * i, i)] = -1.0;
            a[(out + 2 + 2 * i, kc)] = -1.0;
        }
    }
    data.a = a;
    data.b = b;
    data
}

#[derive(Debug, Clone)]
enum Layout {
    Box,
    Ellipsoid { sqrt_q: f64 },
    Picnn { dual: PicnnDualData },
}

/// A robust counterpart ready to solve, remembering how to map program
/// sensitivities back to set parameters.
#[derive(Debug, Clone)]
pub struct Reformulation {
    pub program: ConicProgram,
    /// `F` of the (standardized) task.
    f: DMatrix<f64>,
    layout: Layout,
}

/// Gradients of a downstream loss with respect to a set's parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum GeometryGrad {
    Box {
        dlo: Vec<f64>,
        dhi: Vec<f64>,
        dq: f64,
    },
    Ellipsoid {
        dmu: Vec<f64>,
        /// Packed lower-triangular.
        dchol: Vec<f64>,
        dq: f64,
    },
    Picnn {
        /// Same layout as the gated `w`, `v`, `b` of [`GatedPicnn`].
        dw: Vec<Vec<f64>>,
        dv: Vec<Vec<f64>>,
        db: Vec<Vec<f64>>,
        dq: f64,
    },
}

impl GeometryGrad {
    pub fn dq(&self) -> f64 {
        match self {
            GeometryGrad::Box { dq, .. }
            | GeometryGrad::Ellipsoid { dq, .. }
            | GeometryGrad::Picnn { dq, .. } => *dq,
        }
    }
}

fn with_task(prog: &mut ConicProgram, task: &TaskSpec) {
    let z = prog.var_block("z").expect("z block").clone();
    let nv = prog.num_vars();
    for i in 0..task.p() {
        for j in 0..task.p() {
            prog.p[(z.start + i, z.start + j)] += task.quad[(i, j)];
        }
        prog.c[z.start + i] += task.lin[i];
    }
    prog.c0 += task.c0;
    if task.a_eq.nrows() > 0 {
        let mut a = DMatrix::zeros(task.a_eq.nrows(), nv);
        a.view_mut((0, z.start), (task.a_eq.nrows(), z.len))
            .copy_from(&task.a_eq);
        prog.push_eq(&task.eq_name, a, task.b_eq.clone());
    }
    if task.a_in.nrows() > 0 {
        let mut a = DMatrix::zeros(task.a_in.nrows(), nv);
        a.view_mut((0, z.start), (task.a_in.nrows(), z.len))
            .copy_from(&task.a_in);
        prog.push_in(&task.in_name, a, task.b_in.clone());
    }
}

fn check_dims(task: &TaskSpec, n: usize) -> Result<()> {
    if task.n() != n {
        return Err(CroError::Shape(format!(
            "uncertainty set has dimension {n}, task expects {}",
            task.n()
        )));
    }
    Ok(())
}

/// Box `[lo - q, hi + q]`: program in `(z, ν)`.
pub fn reform_box(lo: &[f64], hi: &[f64], q: f64, task: &TaskSpec) -> Result<Reformulation> {
    let n = lo.len();
    check_dims(task, n)?;
    if !q.is_finite() {
        return Err(CroError::UnboundedSet("box threshold is infinite".into()));
    }
    let lower: Vec<f64> = lo.iter().map(|v| v - q).collect();
    let upper: Vec<f64> = hi.iter().map(|v| v + q).collect();
    if lower.iter().zip(&upper).any(|(l, u)| l > u) {
        return Err(CroError::InvalidArgument(format!(
            "box threshold {q:e} leaves an empty set"
        )));
    }
    let p = task.p();
    let mut prog = ConicProgram::new(&[("z", p), ("nu", n)]);
    let ylo = DVector::from_column_slice(&lower);
    let cz = task.f.tr_mul(&ylo);
    for j in 0..p {
        prog.c[j] = cz[j];
    }
    for i in 0..n {
        prog.c[p + i] = upper[i] - lower[i];
    }
    let mut nonneg = DMatrix::zeros(n, p + n);
    let mut dom = DMatrix::zeros(n, p + n);
    for i in 0..n {
        nonneg[(i, p + i)] = -1.0;
        for j in 0..p {
            dom[(i, j)] = task.f[(i, j)];
        }
        dom[(i, p + i)] = -1.0;
    }
    prog.push_in("nu_nonneg", nonneg, DVector::zeros(n));
    prog.push_in("nu_dominates", dom, DVector::zeros(n));
    with_task(&mut prog, task);
    Ok(Reformulation {
        program: prog,
        f: task.f.clone(),
        layout: Layout::Box,
    })
}

/// Ellipsoid `{(y-μ)ᵀ(LLᵀ)⁻¹(y-μ) <= q}`: `√q ||Lᵀ F z|| + μᵀ F z + f̃(z)`.
pub fn reform_ellipsoid(
    mu: &[f64],
    chol: &[f64],
    q: f64,
    task: &TaskSpec,
) -> Result<Reformulation> {
    let n = mu.len();
    check_dims(task, n)?;
    if !q.is_finite() {
        return Err(CroError::UnboundedSet(
            "ellipsoid threshold is infinite".into(),
        ));
    }
    let q = if q <= 0.0 {
        warn!("ellipsoid threshold {q:e} <= 0, flooring to 1e-12");
        1e-12
    } else {
        q
    };
    let p = task.p();
    let mut prog = ConicProgram::new(&[("z", p)]);
    prog.c = task.f.tr_mul(&DVector::from_column_slice(mu));
    let mut lt = DMatrix::zeros(n, n);
    for i in 0..n {
        for k in 0..=i {
            lt[(k, i)] = chol[packed_index(i, k)];
        }
    }
    let sqrt_q = q.sqrt();
    prog.norm = Some(NormTerm {
        weight: sqrt_q,
        g: lt * &task.f,
        h: DVector::zeros(n),
    });
    with_task(&mut prog, task);
    Ok(Reformulation {
        program: prog,
        f: task.f.clone(),
        layout: Layout::Ellipsoid { sqrt_q },
    })
}

/// PICNN sublevel set through the LP dual: program in `(z, ν)`.
pub fn reform_picnn(g: &GatedPicnn, q: f64, task: &TaskSpec) -> Result<Reformulation> {
    check_dims(task, g.n)?;
    if !q.is_finite() {
        return Err(CroError::UnboundedSet("PICNN threshold is infinite".into()));
    }
    let dual = build_picnn_dual(g, q);
    let (rows, cols) = dual.a.shape();
    let p = task.p();
    let n = g.n;
    let mut prog = ConicProgram::new(&[("z", p), ("nu", rows)]);
    for r in 0..rows {
        prog.c[p + r] = dual.b[r];
    }
    // Aᵀ ν - (F z; 0) = 0
    let mut eq = DMatrix::zeros(cols, p + rows);
    for i in 0..n {
        for j in 0..p {
            eq[(i, j)] = -task.f[(i, j)];
        }
    }
    eq.view_mut((0, p), (cols, rows))
        .copy_from(&dual.a.transpose());
    prog.push_eq("picnn_dual", eq, DVector::zeros(cols));
    let mut nonneg = DMatrix::zeros(rows, p + rows);
    for r in 0..rows {
        nonneg[(r, p + r)] = -1.0;
    }
    prog.push_in("nu_nonneg", nonneg, DVector::zeros(rows));
    with_task(&mut prog, task);
    Ok(Reformulation {
        program: prog,
        f: task.f.clone(),
        layout: Layout::Picnn { dual },
    })
}

/// Dispatches on the set representation.
pub fn reform(geometry: &SetGeometry, q: f64, task: &TaskSpec) -> Result<Reformulation> {
    match geometry {
        SetGeometry::Box { lo, hi } => reform_box(lo, hi, q, task),
        SetGeometry::Ellipsoid { mu, chol } => reform_ellipsoid(mu, chol, q, task),
        SetGeometry::Picnn(g) => reform_picnn(g, q, task),
    }
}

impl Reformulation {
    pub fn is_picnn(&self) -> bool {
        matches!(self.layout, Layout::Picnn { .. })
    }

    /// Solves and insists on optimality; an infeasible PICNN dual means the
    /// inner maximization is unbounded.
    pub fn solve(&self, opts: &SolverOptions) -> Result<SolveResult> {
        let res = solver::solve(&self.program, opts)?;
        match res.status {
            SolveStatus::Optimal => Ok(res),
            SolveStatus::Infeasible if self.is_picnn() => Err(CroError::UnboundedSet(res.detail)),
            _ => Err(CroError::Solver {
                status: res.status,
                detail: res.detail,
            }),
        }
    }

    pub fn decision(&self, res: &SolveResult) -> Vec<f64> {
        res.block(&self.program, "z").expect("z block")
    }

    /// Maps program-data gradients to set-parameter gradients.
    pub fn pullback(&self, adj: &Adjoint, geometry: &SetGeometry) -> GeometryGrad {
        let p = self.f.ncols();
        let n = self.f.nrows();
        let xi_z = adj.dc().rows(0, p).into_owned();
        let f_xi = &self.f * &xi_z;
        match (&self.layout, geometry) {
            (Layout::Box, SetGeometry::Box { .. }) => {
                let xi_nu = adj.dc().rows(p, n);
                let dlo: Vec<f64> = (0..n).map(|i| f_xi[i] - xi_nu[i]).collect();
                let dhi: Vec<f64> = xi_nu.iter().copied().collect();
                let dq = dhi.iter().sum::<f64>() - dlo.iter().sum::<f64>();
                GeometryGrad::Box { dlo, dhi, dq }
            }
            (Layout::Ellipsoid { sqrt_q }, SetGeometry::Ellipsoid { .. }) => {
                let ng = adj.norm.as_ref().expect("norm term gradient");
                let dq = ng.dt / (2.0 * sqrt_q);
                // G = Lᵀ F  =>  dL = F dGᵀ
                let dl = &self.f * ng.dg.transpose();
                let mut dchol = vec![0.0; n * (n + 1) / 2];
                for i in 0..n {
                    for k in 0..=i {
                        dchol[packed_index(i, k)] = dl[(i, k)];
                    }
                }
                GeometryGrad::Ellipsoid {
                    dmu: f_xi.iter().copied().collect(),
                    dchol,
                    dq,
                }
            }
            (Layout::Picnn { dual }, SetGeometry::Picnn(g)) => picnn_pullback(dual, adj, g, p),
            _ => panic!("geometry does not match the reformulation"),
        }
    }
}

fn picnn_pullback(dual: &PicnnDualData, adj: &Adjoint, g: &GatedPicnn, p: usize) -> GeometryGrad {
    let (n, d, depth) = (dual.n, dual.d, dual.layers);
    // A_eq = [.. | Aᵀ]: entry (col c of A, row r of A) sits at eq row c, var p + r
    let da = |r: usize, c: usize| adj.da_eq(c, p + r);
    let dbv = |r: usize| adj.dc()[p + r];
    let mut dw = vec![Vec::new(); depth + 1];
    let mut dv = vec![Vec::new(); depth + 1];
    let mut db = vec![Vec::new(); depth + 1];
    for l in 0..depth {
        let base = depth * d + l * d;
        let mut v = vec![0.0; d * n];
        let mut b = vec![0.0; d];
        let mut w = if l > 0 { vec![0.0; d * d] } else { Vec::new() };
        for i in 0..d {
            let r = base + i;
            for j in 0..n {
                v[i * n + j] = da(r, j);
            }
            if l > 0 {
                let c0 = dual.sigma_col(l);
                for k in 0..d {
                    w[i * d + k] = da(r, c0 + k);
                }
            }
            b[i] = -dbv(r);
        }
        dw[l] = w;
        dv[l] = v;
        db[l] = b;
    }
    let out = dual.output_row();
    dv[depth] = if g.modified_output {
        vec![0.0; n]
    } else {
        (0..n).map(|j| da(out, j)).collect()
    };
    let c0 = dual.sigma_col(depth);
    dw[depth] = (0..d).map(|k| da(out, c0 + k)).collect();
    db[depth] = vec![-dbv(out)];
    GeometryGrad::Picnn {
        dw,
        dv,
        db,
        dq: dbv(out),
    }
}

/// `max_{s(y) <= q} cᵀ y` through the dual LP `min bᵀν, Aᵀν = (c; 0), ν >= 0`.
pub fn picnn_dual_value(g: &GatedPicnn, q: f64, c: &[f64], opts: &SolverOptions) -> Result<f64> {
    let dual = build_picnn_dual(g, q);
    let (rows, cols) = dual.a.shape();
    let mut prog = ConicProgram::new(&[("nu", rows)]);
    prog.c = dual.b.clone();
    let mut rhs = DVector::zeros(cols);
    for (i, ci) in c.iter().enumerate() {
        rhs[i] = *ci;
    }
    prog.push_eq("picnn_dual", dual.a.transpose(), rhs);
    prog.push_in(
        "nu_nonneg",
        -DMatrix::identity(rows, rows),
        DVector::zeros(rows),
    );
    let res = solver::solve(&prog, opts)?;
    match res.status {
        SolveStatus::Optimal => Ok(res.value),
        SolveStatus::Infeasible => Err(CroError::UnboundedSet(res.detail)),
        s => Err(CroError::Solver {
            status: s,
            detail: res.detail,
        }),
    }
}

/// Primal LP relaxation `max cᵀy` over `(y, σ[, κ])`; returns the value and `y`.
pub fn picnn_relaxed_max(
    g: &GatedPicnn,
    q: f64,
    c: &[f64],
    opts: &SolverOptions,
) -> Result<(f64, Vec<f64>)> {
    let dual = build_picnn_dual(g, q);
    let cols = dual.a.ncols();
    let mut prog = ConicProgram::new(&[("y", g.n), ("hidden", cols - g.n)]);
    for (i, ci) in c.iter().enumerate() {
        prog.c[i] = -ci;
    }
    prog.push_in("relaxation", dual.a.clone(), dual.b.clone());
    let res = solver::solve(&prog, opts)?.ensure_optimal()?;
    let y = res.block(&prog, "y").expect("y block");
    Ok((-res.value, y))
}

/// Replaces the hidden variables of a relaxed solution by the exact forward
/// pass at `y` (the limit of decreasing each `σ` coordinate to its lower
/// bound) and returns the exact score there.
pub fn recover_unrelaxed(g: &GatedPicnn, y: &[f64]) -> (Vec<Vec<f64>>, f64) {
    g.forward(y)
}

/// Worst-case `cᵀy` over a set, by brute force (`n <= 3`).
///
/// Box: vertex enumeration. Ellipsoid: closed form. PICNN: dense grid over
/// `||y||_∞ <= bound` with local refinement; `-∞` when no grid point is inside.
pub fn inner_max_oracle(geometry: &SetGeometry, q: f64, c: &[f64], bound: f64) -> f64 {
    match geometry {
        SetGeometry::Box { lo, hi } => {
            let n = lo.len();
            (0..1usize << n)
                .map(|mask| {
                    (0..n)
                        .map(|i| {
                            let v = if mask >> i & 1 == 1 {
                                hi[i] + q
                            } else {
                                lo[i] - q
                            };
                            c[i] * v
                        })
                        .sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max)
        }
        SetGeometry::Ellipsoid { mu, chol } => {
            let n = mu.len();
            let cov = chol_to_cov(chol, n);
            let mut quad = 0.0;
            for i in 0..n {
                for j in 0..n {
                    quad += c[i] * cov[i * n + j] * c[j];
                }
            }
            q.max(0.0).sqrt() * quad.max(0.0).sqrt()
                + mu.iter().zip(c).map(|(m, c)| m * c).sum::<f64>()
        }
        SetGeometry::Picnn(g) => grid_max(&|y: &[f64]| g.score(y), q, c, bound),
    }
}

fn grid_max(score: &dyn Fn(&[f64]) -> f64, q: f64, c: &[f64], bound: f64) -> f64 {
    let n = c.len();
    let per_dim: usize = match n {
        1 => 20_001,
        2 => 401,
        _ => 61,
    };
    let eval = |y: &[f64]| -> Option<f64> {
        (score(y) <= q).then(|| y.iter().zip(c).map(|(a, b)| a * b).sum())
    };
    let mut center = vec![0.0; n];
    let mut half = bound;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut pts = per_dim;
    for round in 0..6 {
        let h = 2.0 * half / (pts - 1) as f64;
        let total = pts.pow(n as u32);
        for flat in 0..total {
            let mut rem = flat;
            let y: Vec<f64> = (0..n)
                .map(|k| {
                    let idx = rem % pts;
                    rem /= pts;
                    center[k] - half + idx as f64 * h
                })
                .collect();
            if let Some(v) = eval(&y) {
                if best.as_ref().is_none_or(|(b, _)| v > *b) {
                    best = Some((v, y));
                }
            }
        }
        let Some((_, ref y)) = best else {
            return f64::NEG_INFINITY;
        };
        center = y.clone();
        half = 4.0 * h;
        if round == 0 {
            pts = if n == 3 { 41 } else { 81 };
        }
    }
    best.map_or(f64::NEG_INFINITY, |(v, _)| v)
}

/// Robust value of `z` evaluated by the oracle: `max_{y ∈ Ω} f'(y, z)`.
pub fn robust_value_oracle(
    geometry: &SetGeometry,
    q: f64,
    task: &TaskSpec,
    z: &[f64],
    bound: f64,
) -> f64 {
    let zv = DVector::from_column_slice(z);
    let c: Vec<f64> = (&task.f * &zv).iter().copied().collect();
    let rest = 0.5 * zv.dot(&(&task.quad * &zv)) + task.lin.dot(&zv) + task.c0;
    inner_max_oracle(geometry, q, &c, bound) + rest
}
