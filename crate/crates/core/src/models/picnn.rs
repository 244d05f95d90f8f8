//! Partially input-convex network score `s(x, y)`, convex in `y`.
//!
//! Layer recursion (hidden width `d`, `L` hidden layers, `u_0 = x`, `σ_0 = 0`):
//!
//! ```text
//! u_{l+1} = relu(R_l u_l + r_l)
//! W_l     = W̄_l diag([Ŵ_l u_l + w_l]_+)      (W̄_l >= 0)
//! V_l     = V̄_l diag(V̂_l u_l + v_l)
//! b_l     = B̄_l u_l + b̄_l
//! σ_{l+1} = relu(W_l σ_l + V_l y + b_l)
//! s       = W_L σ_L + V_L y + b_L               (standard output)
//! s       = W_L σ_L + eps ||y||_inf + b_L        (modified output, V_L = 0)
//! ```
//!
//! Since `σ_0 = 0`, `W_0` never contributes and is not stored.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{CroError, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PicnnConfig {
    /// Hidden width `d` shared by every hidden layer (both paths).
    pub hidden: usize,
    /// Number of hidden layers `L`.
    pub layers: usize,
    /// Drop `V_L` and add `eps_inf * ||y||_inf` to the output.
    pub modified_output: bool,
    pub eps_inf: f64,
}

impl Default for PicnnConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            modified_output: false,
            eps_inf: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct XLayer {
    r: ParamId,
    r_bias: ParamId,
}

/// Parameters of output/hidden layer `l` (indexed `0..=L`).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct YLayer {
    /// `(W̄_l, Ŵ_l, w_l)`; absent for `l = 0`.
    w: Option<(ParamId, ParamId, ParamId)>,
    /// `(V̄_l, V̂_l, v_l)`; absent for the modified output layer.
    v: Option<(ParamId, ParamId, ParamId)>,
    b: (ParamId, ParamId),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Picnn {
    pub config: PicnnConfig,
    x_dim: usize,
    y_dim: usize,
    x_layers: Vec<XLayer>,
    y_layers: Vec<YLayer>,
}

/// Per-sample context vectors recorded on a tape (each `[batch, ·]`).
#[derive(Debug, Clone)]
pub struct PicnnContext {
    /// `[Ŵ_l u_l + w_l]_+` for `l = 1..=L`; index 0 is unused.
    pub w_gates: Vec<Option<Var>>,
    /// `V̂_l u_l + v_l` for `l = 0..=L` (None for a modified output layer).
    pub v_gates: Vec<Option<Var>>,
    /// `b_l` for `l = 0..=L`.
    pub biases: Vec<Var>,
    /// `W̄_l` as loaded on the tape; index 0 unused.
    pub w_bars: Vec<Option<Var>>,
    pub v_bars: Vec<Option<Var>>,
}

impl Picnn {
    pub fn new(
        store: &mut ParamStore,
        x_dim: usize,
        y_dim: usize,
        config: PicnnConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 {
            return Err(CroError::InvalidArgument(
                "PICNN needs at least one hidden layer of nonzero width".into(),
            ));
        }
        if config.eps_inf < 0.0 {
            return Err(CroError::InvalidArgument("eps_inf must be >= 0".into()));
        }
        let (d, depth) = (config.hidden, config.layers);
        let mut x_layers = Vec::with_capacity(depth);
        let mut u_width = x_dim;
        for l in 0..depth {
            x_layers.push(XLayer {
                r: store.add_random(format!("picnn.R{l}"), d, u_width, rng),
                r_bias: store.add(format!("picnn.r{l}"), Tensor::zeros(1, d)),
            });
            u_width = d;
        }
        let mut y_layers = Vec::with_capacity(depth + 1);
        for l in 0..=depth {
            let u_w = if l == 0 { x_dim } else { d };
            let out = if l == depth { 1 } else { d };
            let w = (l > 0).then(|| {
                let wbar = nonneg_init(store, format!("picnn.Wbar{l}"), out, d, rng);
                let what = scaled_random(store, format!("picnn.What{l}"), d, u_w, 0.1, rng);
                let wb = store.add(format!("picnn.w{l}"), Tensor::filled(1, d, 1.0));
                (wbar, what, wb)
            });
            let v = (!(l == depth && config.modified_output)).then(|| {
                let vbar = store.add_random(format!("picnn.Vbar{l}"), out, y_dim, rng);
                let vhat = scaled_random(store, format!("picnn.Vhat{l}"), y_dim, u_w, 0.1, rng);
                let vb = store.add(format!("picnn.v{l}"), Tensor::filled(1, y_dim, 1.0));
                (vbar, vhat, vb)
            });
            let bbar = scaled_random(store, format!("picnn.Bbar{l}"), out, u_w, 0.1, rng);
            let bb = store.add(format!("picnn.b{l}"), Tensor::zeros(1, out));
            y_layers.push(YLayer {
                w,
                v,
                b: (bbar, bb),
            });
        }
        Ok(Self {
            config,
            x_dim,
            y_dim,
            x_layers,
            y_layers,
        })
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn y_dim(&self) -> usize {
        self.y_dim
    }

    /// The `W̄_l` parameters (the ones that must stay entrywise nonnegative).
    pub fn nonneg_params(&self) -> Vec<ParamId> {
        self.y_layers
            .iter()
            .filter_map(|l| l.w.map(|(wbar, _, _)| wbar))
            .collect()
    }

    /// Output-layer bias `b̄_L`.
    pub fn output_bias(&self) -> ParamId {
        self.y_layers[self.config.layers].b.1
    }

    /// Clamp every `W̄_l` entry to `max(., 0)`; all other parameters untouched.
    pub fn project_nonneg(&self, store: &mut ParamStore) {
        for id in self.nonneg_params() {
            for v in store.get_mut(id).data_mut() {
                *v = v.max(0.0);
            }
        }
    }

    /// Records the x-dependent context (gates and biases) for a batch `x`.
    pub fn context(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<PicnnContext> {
        let depth = self.config.layers;
        let mut u = x;
        let mut ctx = PicnnContext {
            w_gates: vec![None; depth + 1],
            v_gates: vec![None; depth + 1],
            biases: Vec::with_capacity(depth + 1),
            w_bars: vec![None; depth + 1],
            v_bars: vec![None; depth + 1],
        };
        for (l, yl) in self.y_layers.iter().enumerate() {
            if let Some((wbar, what, wb)) = yl.w {
                let what = tape.param(store, what);
                let wb = tape.param(store, wb);
                let pre = tape.matmul_t(u, what)?;
                let pre = tape.add_row(pre, wb)?;
                ctx.w_gates[l] = Some(tape.relu(pre));
                ctx.w_bars[l] = Some(tape.param(store, wbar));
            }
            if let Some((vbar, vhat, vb)) = yl.v {
                let vhat = tape.param(store, vhat);
                let vb = tape.param(store, vb);
                let pre = tape.matmul_t(u, vhat)?;
                ctx.v_gates[l] = Some(tape.add_row(pre, vb)?);
                ctx.v_bars[l] = Some(tape.param(store, vbar));
            }
            let bbar = tape.param(store, yl.b.0);
            let bb = tape.param(store, yl.b.1);
            let pre = tape.matmul_t(u, bbar)?;
            ctx.biases.push(tape.add_row(pre, bb)?);
            if l < depth {
                let xl = &self.x_layers[l];
                let r = tape.param(store, xl.r);
                let rb = tape.param(store, xl.r_bias);
                let pre = tape.matmul_t(u, r)?;
                let pre = tape.add_row(pre, rb)?;
                u = tape.relu(pre);
            }
        }
        Ok(ctx)
    }

    /// Scores `[batch, 1]` for rows of `y` under a recorded context.
    pub fn score_with(&self, tape: &mut Tape, ctx: &PicnnContext, y: Var) -> Result<Var> {
        let depth = self.config.layers;
        let mut sigma: Option<Var> = None;
        for l in 0..=depth {
            let mut acc: Option<Var> = None;
            if let (Some(s), Some(g), Some(wbar)) = (sigma, ctx.w_gates[l], ctx.w_bars[l]) {
                let gs = tape.mul(g, s)?;
                acc = Some(tape.matmul_t(gs, wbar)?);
            }
            if let (Some(g), Some(vbar)) = (ctx.v_gates[l], ctx.v_bars[l]) {
                let gy = tape.mul(g, y)?;
                let term = tape.matmul_t(gy, vbar)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
            if l == depth && self.config.modified_output && self.config.eps_inf > 0.0 {
                let ay = tape.abs(y);
                let inf = tape.row_max(ay);
                let term = tape.scale(inf, self.config.eps_inf);
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
            let pre = match acc {
                Some(a) => tape.add(a, ctx.biases[l])?,
                None => ctx.biases[l],
            };
            if l == depth {
                return Ok(pre);
            }
            sigma = Some(tape.relu(pre));
        }
        unreachable!("loop returns at the output layer")
    }

    pub fn score_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var, y: Var) -> Result<Var> {
        let ctx = self.context(tape, store, x)?;
        self.score_with(tape, &ctx, y)
    }

    /// Materialises the x-dependent matrices for every row of `x`.
    pub fn gated(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<GatedPicnn>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let ctx = self.context(&mut tape, store, xv)?;
        let (d, n, depth) = (self.config.hidden, self.y_dim, self.config.layers);
        let mut out = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let mut w = Vec::with_capacity(depth + 1);
            let mut v = Vec::with_capacity(depth + 1);
            let mut b = Vec::with_capacity(depth + 1);
            for l in 0..=depth {
                let rows = if l == depth { 1 } else { d };
                w.push(match (ctx.w_gates[l], ctx.w_bars[l]) {
                    (Some(g), Some(wb)) => {
                        scale_columns(tape.value(wb).data(), tape.value(g).row_slice(i), rows, d)
                    }
                    _ => Vec::new(),
                });
                v.push(match (ctx.v_gates[l], ctx.v_bars[l]) {
                    (Some(g), Some(vb)) => {
                        scale_columns(tape.value(vb).data(), tape.value(g).row_slice(i), rows, n)
                    }
                    _ => vec![0.0; rows * n],
                });
                b.push(tape.value(ctx.biases[l]).row_slice(i).to_vec());
            }
            out.push(GatedPicnn {
                n,
                d,
                layers: depth,
                w,
                v,
                b,
                eps_inf: if self.config.modified_output {
                    self.config.eps_inf
                } else {
                    0.0
                },
                modified_output: self.config.modified_output,
            });
        }
        Ok(out)
    }
}

fn scale_columns(m: &[f64], gate: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = m.to_vec();
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] *= gate[c];
        }
    }
    out
}

fn nonneg_init(
    store: &mut ParamStore,
    name: String,
    rows: usize,
    cols: usize,
    rng: &mut impl Rng,
) -> ParamId {
    let std = (1.0 / cols as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("std");
    let data = (0..rows * cols).map(|_| normal.sample(rng).abs()).collect();
    store.add(name, Tensor::new(vec![rows, cols], data).expect("shape"))
}

fn scaled_random(
    store: &mut ParamStore,
    name: String,
    rows: usize,
    cols: usize,
    scale: f64,
    rng: &mut impl Rng,
) -> ParamId {
    let normal = Normal::new(0.0, scale / (cols as f64).sqrt()).expect("std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    store.add(name, Tensor::new(vec![rows, cols], data).expect("shape"))
}

/// A PICNN with the x-path already evaluated: a plain convex piecewise-linear
/// function of `y`.
///
/// `w[l]`, `v[l]`, `b[l]` hold the gated `W_l` (`[rows, d]`, empty for
/// `l = 0`), `V_l` (`[rows, n]`) and `b_l` for `l = 0..=L`, where `rows` is
/// `d` for hidden layers and 1 for the output.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedPicnn {
    pub n: usize,
    pub d: usize,
    pub layers: usize,
    pub w: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub eps_inf: f64,
    pub modified_output: bool,
}

impl GatedPicnn {
    fn rows(&self, l: usize) -> usize {
        if l == self.layers {
            1
        } else {
            self.d
        }
    }

    /// Hidden activations `σ_1..σ_L` and the score.
    pub fn forward(&self, y: &[f64]) -> (Vec<Vec<f64>>, f64) {
        let mut sigmas: Vec<Vec<f64>> = Vec::with_capacity(self.layers);
        for l in 0..=self.layers {
            let rows = self.rows(l);
            let mut pre = self.b[l].clone();
            let vl = &self.v[l];
            for (r, p) in pre.iter_mut().enumerate() {
                let vrow = &vl[r * self.n..(r + 1) * self.n];
                *p += vrow.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
            }
            if l > 0 {
                let s = &sigmas[l - 1];
                let wl = &self.w[l];
                for (r, p) in pre.iter_mut().enumerate().take(rows) {
                    let wrow = &wl[r * self.d..(r + 1) * self.d];
                    *p += wrow.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if l == self.layers {
                let mut s = pre[0];
                if self.modified_output {
                    s += self.eps_inf * y.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                }
                return (sigmas, s);
            }
            sigmas.push(pre.into_iter().map(|v| v.max(0.0)).collect());
        }
        unreachable!()
    }

    pub fn score(&self, y: &[f64]) -> f64 {
        self.forward(y).1
    }

    /// Score and a subgradient with respect to `y`.
    pub fn score_grad(&self, y: &[f64]) -> (f64, Vec<f64>) {
        let (sigmas, s) = self.forward(y);
        let n = self.n;
        let d = self.d;
        let mut gy = vec![0.0; n];
        let depth = self.layers;
        // output layer
        for (g, v) in gy.iter_mut().zip(&self.v[depth][..n]) {
            *g += v;
        }
        if self.modified_output && self.eps_inf > 0.0 {
            let (mut arg, mut best) = (0, -1.0);
            for (i, v) in y.iter().enumerate() {
                if v.abs() > best {
                    best = v.abs();
                    arg = i;
                }
            }
            gy[arg] += self.eps_inf * if y[arg] >= 0.0 { 1.0 } else { -1.0 };
        }
        let mut dsigma: Vec<f64> = self.w[depth][..d].to_vec();
        for l in (0..depth).rev() {
            // σ_{l+1} = relu(pre_l); active where σ > 0
            let dpre: Vec<f64> = dsigma
                .iter()
                .zip(&sigmas[l])
                .map(|(g, s)| if *s > 0.0 { *g } else { 0.0 })
                .collect();
            let vl = &self.v[l];
            for (r, dp) in dpre.iter().enumerate() {
                if *dp == 0.0 {
                    continue;
                }
                for (g, v) in gy.iter_mut().zip(&vl[r * n..(r + 1) * n]) {
                    *g += dp * v;
                }
            }
            if l > 0 {
                let wl = &self.w[l];
                let mut next = vec![0.0; d];
                for (r, dp) in dpre.iter().enumerate() {
                    if *dp == 0.0 {
                        continue;
                    }
                    for (nx, w) in next.iter_mut().zip(&wl[r * d..(r + 1) * d]) {
                        *nx += dp * w;
                    }
                }
                dsigma = next;
            }
        }
        (s, gy)
    }

    /// True when every gated `W_l` is entrywise nonnegative.
    pub fn gated_weights_nonneg(&self) -> bool {
        self.w.iter().all(|w| w.iter().all(|&v| v >= 0.0))
    }
}
