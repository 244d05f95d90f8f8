#![allow(dead_code)]

use cro_core::models::{GatedPicnn, Picnn, PicnnConfig};
use cro_core::optim::ParamStore;
use cro_core::problems::TaskSpec;
use cro_core::solver::{solve, ConicProgram, SolverOptions};
use cro_core::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gauss(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn rand_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| gauss(rng))
}

pub fn rand_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| gauss(rng))
}

/// Strictly convex QP that is feasible by construction (a random point
/// satisfies every constraint, with unit-scale slack on the inequalities).
pub fn rand_qp(rng: &mut impl Rng, n: usize, m_eq: usize, m_in: usize) -> ConicProgram {
    let mut prog = ConicProgram::new(&[("v", n)]);
    let m = rand_matrix(rng, n, n);
    prog.p = m.transpose() * &m + DMatrix::identity(n, n);
    prog.c = rand_vector(rng, n);
    let v0 = rand_vector(rng, n);
    if m_eq > 0 {
        let a = rand_matrix(rng, m_eq, n);
        let b = &a * &v0;
        prog.push_eq("eq", a, b);
    }
    if m_in > 0 {
        let a = rand_matrix(rng, m_in, n);
        let slack = DVector::from_fn(m_in, |_, _| rng.random_range(0.0..1.0));
        let b = &a * &v0 + slack;
        prog.push_in("in", a, b);
    }
    prog
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of a scalar function of one coordinate.
pub fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn tight() -> SolverOptions {
    SolverOptions {
        tol: 1e-10,
        max_iter: 200,
        rho: 0.0,
        ..Default::default()
    }
}

pub fn exact() -> SolverOptions {
    SolverOptions {
        tol: 1e-11,
        max_iter: 200,
        rho: 0.0,
        ..Default::default()
    }
}

/// `ℓ(v*) = wᵀ v*` for a random direction `w` on a random QP, differentiated
/// through the solution and by central differences of full re-solves:
/// relative error and the (adjoint, difference) pairs. `None` when strict
/// complementarity fails and no derivative exists.
pub fn adjoint_fd_error(seed: u64) -> Option<(f64, Vec<(f64, f64)>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..11);
    let m_eq = rng.random_range(0..n.min(3));
    let m_in = rng.random_range(0..2 * n);
    let prog = rand_qp(&mut rng, n, m_eq, m_in);
    let w = rand_vector(&mut rng, n);
    let res = solve(&prog, &exact()).unwrap();
    assert!(res.is_optimal(), "{:?}", res.status);
    // derivatives only exist under strict complementarity
    if res.s.iter().zip(&res.lam).any(|(s, l)| s.max(*l) < 1e-2) {
        return None;
    }
    let adj = res.differentiate_solution(&prog, &w).unwrap();
    let loss = |p: &ConicProgram| w.dot(&solve(p, &exact()).unwrap().v);
    let h = 1e-4;
    // (adjoint, finite difference) for every perturbed entry
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for j in 0..n {
        let fd = central(
            |x| {
                let mut p = prog.clone();
                p.c[j] = x;
                loss(&p)
            },
            prog.c[j],
            h,
        );
        pairs.push((adj.dc()[j], fd));
    }
    let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
    let fd = central(
        |x| {
            let mut p = prog.clone();
            let d = x - prog.p[(i, j)];
            p.p[(i, j)] += d;
            if i != j {
                p.p[(j, i)] += d;
            }
            loss(&p)
        },
        prog.p[(i, j)],
        h,
    );
    pairs.push((
        if i == j {
            adj.dp(i, i)
        } else {
            adj.dp(i, j) + adj.dp(j, i)
        },
        fd,
    ));
    for r in 0..m_eq {
        let fd = central(
            |x| {
                let mut p = prog.clone();
                p.b_eq[r] = x;
                loss(&p)
            },
            prog.b_eq[r],
            h,
        );
        pairs.push((adj.db_eq(r), fd));
        let j = rng.random_range(0..n);
        let fd = central(
            |x| {
                let mut p = prog.clone();
                p.a_eq[(r, j)] = x;
                loss(&p)
            },
            prog.a_eq[(r, j)],
            h,
        );
        pairs.push((adj.da_eq(r, j), fd));
    }
    for r in 0..m_in {
        let fd = central(
            |x| {
                let mut p = prog.clone();
                p.b_in[r] = x;
                loss(&p)
            },
            prog.b_in[r],
            h,
        );
        pairs.push((adj.db_in(r), fd));
        let j = rng.random_range(0..n);
        let fd = central(
            |x| {
                let mut p = prog.clone();
                p.a_in[(r, j)] = x;
                loss(&p)
            },
            prog.a_in[(r, j)],
            h,
        );
        pairs.push((adj.da_in(r, j), fd));
    }
    let diff = pairs
        .iter()
        .map(|(a, f)| (a - f).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = pairs.iter().map(|(_, f)| f * f).sum::<f64>().sqrt();
    Some((diff / norm.max(1e-6), pairs))
}

/// `max cᵀy` over the box `[lo - q, hi + q]` by enumerating its vertices.
pub fn vertex_max(lo: &[f64], hi: &[f64], q: f64, c: &[f64]) -> f64 {
    let n = lo.len();
    (0..1usize << n)
        .map(|mask| {
            (0..n)
                .map(|i| {
                    c[i] * if mask >> i & 1 == 1 {
                        hi[i] + q
                    } else {
                        lo[i] - q
                    }
                })
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Dense `Σ = L Lᵀ` from a row-major packed lower-triangular `L`.
pub fn packed_to_dense(chol: &[f64], n: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            l[(i, j)] = chol[k];
            k += 1;
        }
    }
    l
}

/// Euclidean projection onto `{(y-μ)ᵀ Σ⁻¹ (y-μ) <= q}`, by bisection on the
/// multiplier `ν` of `y = μ + (I + ν Σ⁻¹)⁻¹ (z - μ)`.
pub fn project_ellipsoid(
    z: &DVector<f64>,
    mu: &DVector<f64>,
    sinv: &DMatrix<f64>,
    q: f64,
) -> DVector<f64> {
    let n = z.len();
    let r = z - mu;
    let level = |y: &DVector<f64>| y.dot(&(sinv * y));
    if level(&r) <= q {
        return z.clone();
    }
    let at = |nu: f64| -> DVector<f64> {
        (DMatrix::identity(n, n) + sinv * nu)
            .lu()
            .solve(&r)
            .expect("positive definite")
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while level(&at(hi)) > q {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if level(&at(mid)) > q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mu + at(hi)
}

/// `max cᵀy` over an ellipsoid by projected ascent with a long step, whose
/// fixed points are exactly the maximizers.
pub fn ellipsoid_ascent(mu: &[f64], chol: &[f64], q: f64, c: &[f64]) -> (f64, DVector<f64>) {
    let n = mu.len();
    let l = packed_to_dense(chol, n);
    let sigma = &l * l.transpose();
    let sinv = sigma.clone().try_inverse().expect("positive definite");
    let muv = DVector::from_column_slice(mu);
    let cv = DVector::from_column_slice(c);
    let step = 10.0 * sigma.norm().max(1.0) / cv.norm().max(1e-12);
    let mut y = muv.clone();
    for _ in 0..20_000 {
        let next = project_ellipsoid(&(&y + &cv * step), &muv, &sinv, q);
        let moved = (&next - &y).amax();
        y = next;
        if moved < 1e-15 {
            break;
        }
    }
    (cv.dot(&y), y)
}

/// `max cᵀy` over `{score(y) <= q}` for `y ∈ R²` by a dense grid on
/// `[-bound, bound]²`, then zoomed grids around every well-separated
/// near-best grid point (a far vertex can be within grid error of the best).
pub fn grid_max_2d(
    score: &dyn Fn(&[f64]) -> f64,
    q: f64,
    c: &[f64],
    bound: f64,
) -> Option<(f64, [f64; 2])> {
    let scan = |center: [f64; 2], half: f64, pts: usize| -> Vec<(f64, [f64; 2])> {
        let h = 2.0 * half / (pts - 1) as f64;
        let mut out = Vec::new();
        for i in 0..pts {
            for j in 0..pts {
                let y = [
                    center[0] - half + i as f64 * h,
                    center[1] - half + j as f64 * h,
                ];
                if score(&y) <= q {
                    out.push((c[0] * y[0] + c[1] * y[1], y));
                }
            }
        }
        out
    };
    let pts = 801;
    let h0 = 2.0 * bound / (pts - 1) as f64;
    let mut coarse = scan([0.0, 0.0], bound, pts);
    coarse.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top = coarse.first()?.0;
    let slack = 3.0 * h0 * (c[0].abs() + c[1].abs());
    let mut starts: Vec<(f64, [f64; 2])> = Vec::new();
    for cand in coarse.iter().take_while(|p| p.0 >= top - slack) {
        let far = starts
            .iter()
            .all(|s| (s.1[0] - cand.1[0]).abs().max((s.1[1] - cand.1[1]).abs()) > 8.0 * h0);
        if far && starts.len() < 16 {
            starts.push(*cand);
        }
    }
    let mut best = starts[0];
    for start in starts {
        // halving (not jumping to a few cells) keeps a thin corner inside the window
        let (mut incumbent, mut half) = (start, 8.0 * h0);
        for _ in 0..45 {
            if let Some(b) = scan(incumbent.1, half, 41)
                .into_iter()
                .max_by(|a, b| a.0.total_cmp(&b.0))
            {
                if b.0 > incumbent.0 {
                    incumbent = b;
                }
            }
            half *= 0.5;
        }
        if incumbent.0 > best.0 {
            best = incumbent;
        }
    }
    Some(best)
}

/// Task `yᵀ F z` with `z` pinned to `z0`, so the robust value is the inner max at `c = F z0`.
pub fn pinned_task(f: DMatrix<f64>, z0: &DVector<f64>) -> TaskSpec {
    let p = f.ncols();
    TaskSpec {
        name: "pinned".into(),
        f,
        quad: DMatrix::zeros(p, p),
        lin: DVector::zeros(p),
        c0: 0.0,
        a_in: DMatrix::zeros(0, p),
        b_in: DVector::zeros(0),
        a_eq: DMatrix::identity(p, p),
        b_eq: z0.clone(),
        in_name: "none".into(),
        eq_name: "pin".into(),
    }
}

pub fn random_spd_chol(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut chol = Vec::new();
    for i in 0..n {
        for j in 0..=i {
            chol.push(if i == j {
                0.3 + gauss(rng).abs()
            } else {
                0.5 * gauss(rng)
            });
        }
    }
    chol
}

/// Random gated PICNN on `R²` (two hidden layers of width 4) and a level
/// that keeps its sublevel set nonempty.
pub fn random_picnn_set(rng: &mut ChaCha8Rng) -> (GatedPicnn, f64) {
    let cfg = PicnnConfig {
        hidden: 4,
        layers: 2,
        modified_output: true,
        eps_inf: 0.5,
    };
    let mut store = ParamStore::new();
    let net = Picnn::new(&mut store, 3, 2, cfg, rng).unwrap();
    let x = Tensor::row(&[gauss(rng), gauss(rng), gauss(rng)]);
    let g = net.gated(&store, &x).unwrap().remove(0);
    // a level strictly above the score of some point keeps the set nonempty
    let q = g.score(&[gauss(rng), gauss(rng)]) + rng.random_range(0.1..2.0);
    (g, q)
}

/// `s_i(θ) = a_iᵀθ + b_i sin(c_iᵀθ)`.
pub struct Family {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<Vec<f64>>,
}

impl Family {
    pub fn new(rng: &mut impl Rng, m: usize, p: usize) -> Self {
        let mut v = |n| (0..n).map(|_| gauss(rng)).collect::<Vec<f64>>();
        Self {
            a: (0..m).map(|_| v(p)).collect(),
            b: v(m),
            c: (0..m).map(|_| v(p)).collect(),
        }
    }

    pub fn scores(&self, th: &[f64]) -> Vec<f64> {
        (0..self.b.len())
            .map(|i| dot(&self.a[i], th) + self.b[i] * dot(&self.c[i], th).sin())
            .collect()
    }

    pub fn grads(&self, th: &[f64]) -> Vec<Vec<f64>> {
        (0..self.b.len())
            .map(|i| {
                let cs = dot(&self.c[i], th).cos();
                self.a[i]
                    .iter()
                    .zip(&self.c[i])
                    .map(|(a, c)| a + self.b[i] * cs * c)
                    .collect()
            })
            .collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
