//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive in execution order, so parents always
//! precede children and a single reverse sweep computes all adjoints. Tapes
//! are cheap and short lived: one per minibatch (or per scoring call).
//!
//! ```
//! use cro_core::autodiff::Tape;
//! use cro_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
//! ```

use crate::error::{CroError, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    /// `a @ b^T`, the linear-layer product with weights stored `[out, in]`.
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Max(Var, Var),
    /// `a[r, c] + b[1, c]`
    AddRow(Var, Var),
    /// `a[r, c] * b[1, c]`
    MulRow(Var, Var),
    /// `a[r, c] * b[r, 1]`
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Ln(Var),
    Sqrt(Var),
    RowMax(Var),
    RowSum(Var),
    Sum(Var),
    SliceCols(Var, usize, usize),
    SelectRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    /// Softplus applied to the flagged columns only.
    SoftplusCols(Var, Vec<bool>),
    /// Row-wise `L w = b` with `L` packed lower-triangular (row-major).
    TriSolve {
        l: Var,
        b: Var,
        n: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient per parameter, summed over every leaf that references it.
    pub fn params(&self, store: &ParamStore) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for &(node, pid) in &self.params {
            let Some(adj) = self.adjoints[node].as_ref() else {
                continue;
            };
            match out.iter_mut().find(|(p, _)| *p == pid) {
                Some((_, acc)) => acc.add_assign(adj),
                None => out.push((pid, adj.clone())),
            }
        }
        debug_assert!(out.iter().all(|(p, g)| g.same_shape(store.get(*p))));
        out
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else if v < -30.0 {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_scalar(v: f64) -> f64 {
    softplus(v)
}

pub fn softplus_inverse(v: f64) -> f64 {
    debug_assert!(v > 0.0);
    if v > 30.0 {
        v
    } else {
        v.exp_m1().ln()
    }
}

/// Index of entry `(i, j)`, `j <= i`, in a packed row-major lower triangle.
#[inline]
pub fn packed_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> CroError {
    CroError::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Input or constant; receives an adjoint but maps to no parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf(None))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Leaf(Some(id)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .matmul(self.value(b))
            .map_err(|_| shape_err("matmul", self.value(a), self.value(b)))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .matmul_t(self.value(b))
            .map_err(|_| shape_err("matmul_t", self.value(a), self.value(b)))?;
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    fn binary(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err(name, ta, tb));
        }
        let out = ta.zip_map(tb, f);
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum; ties send the adjoint to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("max", a, b, f64::max, Op::Max(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let mut out = ta.clone();
        let c = ta.cols();
        for r in 0..ta.rows() {
            for (o, b) in out.row_slice_mut(r).iter_mut().zip(&tr.data()[..c]) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("mul_row", ta, tr));
        }
        let mut out = ta.clone();
        for r in 0..ta.rows() {
            for (o, b) in out.row_slice_mut(r).iter_mut().zip(tr.data()) {
                *o *= b;
            }
        }
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(shape_err("mul_col", ta, tc));
        }
        let mut out = ta.clone();
        for r in 0..ta.rows() {
            let s = tc.data()[r];
            for o in out.row_slice_mut(r) {
                *o *= s;
            }
        }
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, Op::AddScalar(a))
    }

    /// ReLU with subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    /// `[r, c] -> [r, 1]` maximum per row.
    pub fn row_max(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows())
            .map(|r| {
                t.row_slice(r)
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect::<Vec<_>>();
        let out = Tensor::column(&data);
        self.push(out, Op::RowMax(a))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows())
            .map(|r| t.row_slice(r).iter().sum())
            .collect::<Vec<_>>();
        let out = Tensor::column(&data);
        self.push(out, Op::RowSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.cols() {
            return Err(CroError::Shape(format!(
                "slice_cols: [{start}, {end}) of {:?}",
                t.shape()
            )));
        }
        let out = t.slice_cols(start, end);
        Ok(self.push(out, Op::SliceCols(a, start, end)))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(CroError::Shape(format!(
                "select_rows: row {bad} of {:?}",
                t.shape()
            )));
        }
        let out = t.select_rows(idx);
        Ok(self.push(out, Op::SelectRows(a, idx.to_vec())))
    }

    pub fn gather_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = cols.iter().find(|&&c| c >= t.cols()) {
            return Err(CroError::Shape(format!(
                "gather_cols: column {bad} of {:?}",
                t.shape()
            )));
        }
        let mut out = Tensor::zeros(t.rows(), cols.len());
        for r in 0..t.rows() {
            let src = t.row_slice(r);
            for (k, &c) in cols.iter().enumerate() {
                out.set(r, k, src[c]);
            }
        }
        Ok(self.push(out, Op::GatherCols(a, cols.to_vec())))
    }

    pub fn softplus_cols(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.cols() {
            return Err(CroError::Shape(format!(
                "softplus_cols: mask of {} vs {:?}",
                mask.len(),
                t.shape()
            )));
        }
        let mut out = t.clone();
        for r in 0..t.rows() {
            for (o, &m) in out.row_slice_mut(r).iter_mut().zip(mask) {
                if m {
                    *o = softplus(*o);
                }
            }
        }
        Ok(self.push(out, Op::SoftplusCols(a, mask.to_vec())))
    }

    /// Solves `L_r w_r = b_r` for every row `r`, where row `r` of `l` packs
    /// a lower-triangular `n x n` factor.
    pub fn tri_solve(&mut self, l: Var, b: Var) -> Result<Var> {
        let (tl, tb) = (self.value(l), self.value(b));
        let n = tb.cols();
        if tl.rows() != tb.rows() || tl.cols() != n * (n + 1) / 2 {
            return Err(shape_err("tri_solve", tl, tb));
        }
        let mut out = Tensor::zeros(tb.rows(), n);
        for r in 0..tb.rows() {
            let w = forward_subst(tl.row_slice(r), tb.row_slice(r), n);
            out.row_slice_mut(r).copy_from_slice(&w);
        }
        Ok(self.push(out, Op::TriSolve { l, b, n }))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let t = self.value(root);
        if t.len() != 1 {
            return Err(CroError::Shape(format!(
                "backward: root must be scalar, got {:?}",
                t.shape()
            )));
        }
        self.backward_seeded(&[(root, Tensor::filled(t.rows(), t.cols(), 1.0))])
    }

    /// Reverse sweep with explicit upstream adjoints on arbitrary nodes.
    ///
    /// Equivalent to calling [`Tape::backward`] on `sum_k <seed_k, node_k>`.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, s) in seeds {
            if !s.same_shape(self.value(*v)) {
                return Err(shape_err("backward seed", s, self.value(*v)));
            }
            accumulate(&mut adj, *v, s.clone());
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let Some(g) = adj[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf(Some(p)) => Some((i, p)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            adjoints: adj,
            params,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                accumulate(adj, *a, g.matmul_t(tb).expect("matmul backward"));
                accumulate(adj, *b, ta.t_matmul(g).expect("matmul backward"));
            }
            Op::MatMulT(a, b) => {
                // out = A B^T: dA = G B, dB = G^T A
                let (ta, tb) = (self.value(*a), self.value(*b));
                accumulate(adj, *a, g.matmul(tb).expect("matmul_t backward"));
                accumulate(adj, *b, g.t_matmul(ta).expect("matmul_t backward"));
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                accumulate(adj, *a, g.zip_map(tb, |x, y| x * y));
                accumulate(adj, *b, g.zip_map(ta, |x, y| x * y));
            }
            Op::Max(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut ga = g.clone();
                let mut gb = g.clone();
                for k in 0..g.len() {
                    if ta.data()[k] >= tb.data()[k] {
                        gb.data_mut()[k] = 0.0;
                    } else {
                        ga.data_mut()[k] = 0.0;
                    }
                }
                accumulate(adj, *a, ga);
                accumulate(adj, *b, gb);
            }
            Op::AddRow(a, row) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *row, col_sums(g));
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (self.value(*a), self.value(*row));
                let mut ga = g.clone();
                for r in 0..g.rows() {
                    for (o, s) in ga.row_slice_mut(r).iter_mut().zip(tr.data()) {
                        *o *= s;
                    }
                }
                accumulate(adj, *a, ga);
                accumulate(adj, *row, col_sums(&g.zip_map(ta, |x, y| x * y)));
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (self.value(*a), self.value(*col));
                let mut ga = g.clone();
                let mut gc = Tensor::zeros(g.rows(), 1);
                for r in 0..g.rows() {
                    let s = tc.data()[r];
                    let mut acc = 0.0;
                    for (o, x) in ga.row_slice_mut(r).iter_mut().zip(ta.row_slice(r)) {
                        acc += *o * x;
                        *o *= s;
                    }
                    gc.data_mut()[r] = acc;
                }
                accumulate(adj, *a, ga);
                accumulate(adj, *col, gc);
            }
            Op::Scale(a, s) => accumulate(adj, *a, g.map(|v| v * s)),
            Op::AddScalar(a) => accumulate(adj, *a, g.clone()),
            Op::Relu(a) => {
                let ta = self.value(*a);
                accumulate(
                    adj,
                    *a,
                    g.zip_map(ta, |gv, x| if x > 0.0 { gv } else { 0.0 }),
                );
            }
            Op::Softplus(a) => {
                let ta = self.value(*a);
                accumulate(adj, *a, g.zip_map(ta, |gv, x| gv * sigmoid(x)));
            }
            Op::Abs(a) => {
                let ta = self.value(*a);
                accumulate(
                    adj,
                    *a,
                    g.zip_map(ta, |gv, x| if x == 0.0 { 0.0 } else { gv * x.signum() }),
                );
            }
            Op::Square(a) => {
                let ta = self.value(*a);
                accumulate(adj, *a, g.zip_map(ta, |gv, x| 2.0 * gv * x));
            }
            Op::Ln(a) => {
                let ta = self.value(*a);
                accumulate(adj, *a, g.zip_map(ta, |gv, x| gv / x));
            }
            Op::Sqrt(a) => {
                accumulate(adj, *a, g.zip_map(out, |gv, y| gv * 0.5 / y));
            }
            Op::RowMax(a) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..ta.rows() {
                    let row = ta.row_slice(r);
                    let m = out.data()[r];
                    if let Some(j) = row.iter().position(|&v| v == m) {
                        ga.set(r, j, g.data()[r]);
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::RowSum(a) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..ta.rows() {
                    let gv = g.data()[r];
                    ga.row_slice_mut(r).iter_mut().for_each(|o| *o = gv);
                }
                accumulate(adj, *a, ga);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                accumulate(adj, *a, Tensor::filled(ta.rows(), ta.cols(), g.item()));
            }
            Op::SliceCols(a, start, end) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..ta.rows() {
                    ga.row_slice_mut(r)[*start..*end].copy_from_slice(g.row_slice(r));
                }
                accumulate(adj, *a, ga);
            }
            Op::SelectRows(a, idx) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for (k, &r) in idx.iter().enumerate() {
                    for (o, v) in ga.row_slice_mut(r).iter_mut().zip(g.row_slice(k)) {
                        *o += v;
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::GatherCols(a, cols) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..ta.rows() {
                    for (k, &c) in cols.iter().enumerate() {
                        let cur = ga.get(r, c);
                        ga.set(r, c, cur + g.get(r, k));
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::SoftplusCols(a, mask) => {
                let ta = self.value(*a);
                let mut ga = g.clone();
                for r in 0..ta.rows() {
                    let src = ta.row_slice(r);
                    for (k, o) in ga.row_slice_mut(r).iter_mut().enumerate() {
                        if mask[k] {
                            *o *= sigmoid(src[k]);
                        }
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::TriSolve { l, b, n } => {
                let n = *n;
                let tl = self.value(*l);
                let mut gl = Tensor::zeros(tl.rows(), tl.cols());
                let mut gb = Tensor::zeros(out.rows(), n);
                for r in 0..out.rows() {
                    let lr = tl.row_slice(r);
                    // b_bar = L^{-T} g ; L_bar = -b_bar w^T (lower part)
                    let bbar = backward_subst_t(lr, g.row_slice(r), n);
                    let w = out.row_slice(r);
                    let glr = gl.row_slice_mut(r);
                    for i in 0..n {
                        for j in 0..=i {
                            glr[packed_index(i, j)] = -bbar[i] * w[j];
                        }
                    }
                    gb.row_slice_mut(r).copy_from_slice(&bbar);
                }
                accumulate(adj, *l, gl);
                accumulate(adj, *b, gb);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row_slice(r)) {
            *o += v;
        }
    }
    out
}

/// Solve `L w = b` for packed lower-triangular `L`.
pub fn forward_subst(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut acc = b[i];
        for j in 0..i {
            acc -= l[packed_index(i, j)] * w[j];
        }
        w[i] = acc / l[packed_index(i, i)];
    }
    w
}

/// Solve `L^T w = b` for packed lower-triangular `L`.
pub fn backward_subst_t(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = b[i];
        for j in i + 1..n {
            acc -= l[packed_index(j, i)] * w[j];
        }
        w[i] = acc / l[packed_index(i, i)];
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_scalar(f: impl Fn(&mut Tape, Var) -> Var, x0: f64) -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(x0));
        let y = f(&mut tape, x);
        tape.backward(y).unwrap().wrt(x).unwrap().item()
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.softplus(x);
        assert!((tape.value(y).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn square_derivative() {
        assert_eq!(grad_scalar(|t, x| t.mul(x, x).unwrap(), 3.0), 6.0);
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        assert_eq!(grad_scalar(|t, x| t.relu(x), -1.0), 0.0);
        // subgradient at the kink is defined as zero
        assert_eq!(grad_scalar(|t, x| t.relu(x), 0.0), 0.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 2));
        let b = tape.leaf(Tensor::zeros(3, 2));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 2]") && err.contains("[3, 2]"));
    }

    #[test]
    fn tri_solve_matches_dense() {
        // L = [[2, 0], [1, 3]]
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::row(&[2.0, 1.0, 3.0]));
        let b = tape.leaf(Tensor::row(&[4.0, 5.0]));
        let w = tape.tri_solve(l, b).unwrap();
        let got = tape.value(w).data();
        assert!((got[0] - 2.0).abs() < 1e-15);
        assert!((got[1] - 1.0).abs() < 1e-15);
    }
}
