mod common;

use common::{
    ellipsoid_ascent, gauss, grid_max_2d, pinned_task, rand_matrix, rand_vector, random_picnn_set,
    random_spd_chol, rel_err, tight, vertex_max,
};
use cro_core::models::SetGeometry;
use cro_core::problems::TaskSpec;
use cro_core::reform::{
    inner_max_oracle, picnn_dual_value, picnn_relaxed_max, recover_unrelaxed, reform, GeometryGrad,
};
use cro_core::solver::SolverOptions;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn box_robust_value_matches_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let n = rng.random_range(1..4);
        let p = rng.random_range(1..4);
        let lo: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.0..2.0)).collect();
        let half_width = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| (h - l) / 2.0)
            .fold(f64::INFINITY, f64::min);
        let q = rng.random_range(-half_width..1.0);
        let task = pinned_task(rand_matrix(&mut rng, n, p), &rand_vector(&mut rng, p));
        let geom = SetGeometry::Box {
            lo: lo.clone(),
            hi: hi.clone(),
        };
        let r = reform(&geom, q, &task).unwrap();
        let res = r.solve(&tight()).unwrap();
        let c: Vec<f64> = (&task.f * &task.b_eq).iter().copied().collect();
        let oracle = vertex_max(&lo, &hi, q, &c);
        assert!(
            (res.value - oracle).abs() < 1e-8,
            "{} vs {oracle}",
            res.value
        );
        assert!((inner_max_oracle(&geom, q, &c, 0.0) - oracle).abs() < 1e-12);
    }
}

#[test]
fn ellipsoid_robust_value_matches_projected_ascent() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..30 {
        let n = rng.random_range(1..4);
        let mu: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
        let chol = random_spd_chol(&mut rng, n);
        let q = rng.random_range(0.1..4.0);
        let task = pinned_task(rand_matrix(&mut rng, n, 2), &rand_vector(&mut rng, 2));
        let c: Vec<f64> = (&task.f * &task.b_eq).iter().copied().collect();
        let (oracle, _) = ellipsoid_ascent(&mu, &chol, q, &c);
        let geom = SetGeometry::Ellipsoid { mu, chol };
        let res = reform(&geom, q, &task).unwrap().solve(&tight()).unwrap();
        assert!(
            (res.value - oracle).abs() < 1e-6,
            "{} vs {oracle}",
            res.value
        );
        assert!((inner_max_oracle(&geom, q, &c, 0.0) - oracle).abs() < 1e-6);
    }
}

#[test]
fn picnn_dual_matches_grid_and_relaxation_recovers_a_feasible_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in 0..10 {
        let (g, q) = random_picnn_set(&mut rng);
        let c = [gauss(&mut rng), gauss(&mut rng)];
        let dual = picnn_dual_value(&g, q, &c, &tight()).unwrap();
        let (grid, at) = grid_max_2d(&|y| g.score(y), q, &c, 30.0).unwrap();
        assert!(
            at.iter().all(|v| v.abs() < 29.0),
            "set reaches the grid edge"
        );
        assert!(
            (dual - grid).abs() < 1e-3,
            "net {t}: dual {dual} vs grid {grid}"
        );

        let (relaxed, y) = picnn_relaxed_max(&g, q, &c, &tight()).unwrap();
        assert!((relaxed - dual).abs() < 1e-7);
        let (_, exact) = recover_unrelaxed(&g, &y);
        assert!(exact <= q + 1e-9, "recovered score {exact} above {q}");
        assert!((c[0] * y[0] + c[1] * y[1] - relaxed).abs() < 1e-9);
    }
}

/// Realized portfolio loss at the robust decision for one fixed outcome.
fn decision_loss(
    geom: &SetGeometry,
    q: f64,
    task: &TaskSpec,
    y: &[f64],
    opts: &SolverOptions,
) -> f64 {
    let r = reform(geom, q, task).unwrap();
    let res = r.solve(opts).unwrap();
    task.loss(y, &r.decision(&res))
}

fn pulled(
    geom: &SetGeometry,
    q: f64,
    task: &TaskSpec,
    y: &[f64],
    opts: &SolverOptions,
) -> GeometryGrad {
    let r = reform(geom, q, task).unwrap();
    let res = r.solve(opts).unwrap();
    let z = r.decision(&res);
    let gz = task.loss_grad_z(y, &z);
    let mut dl = DVector::zeros(r.program.num_vars());
    dl.rows_mut(0, gz.len()).copy_from(&gz);
    let adj = res.differentiate_solution(&r.program, &dl).unwrap();
    r.pullback(&adj, geom)
}

/// Every scalar parameter of a geometry as a mutable reference list.
fn params_mut(geom: &mut SetGeometry) -> Vec<&mut f64> {
    match geom {
        SetGeometry::Box { lo, hi } => lo.iter_mut().chain(hi.iter_mut()).collect(),
        SetGeometry::Ellipsoid { mu, chol } => mu.iter_mut().chain(chol.iter_mut()).collect(),
        SetGeometry::Picnn(g) => {
            g.w.iter_mut()
                .chain(g.v.iter_mut())
                .chain(g.b.iter_mut())
                .flat_map(|v| v.iter_mut())
                .collect()
        }
    }
}

fn flat_grad(g: &GeometryGrad) -> Vec<f64> {
    match g {
        GeometryGrad::Box { dlo, dhi, .. } => dlo.iter().chain(dhi).copied().collect(),
        GeometryGrad::Ellipsoid { dmu, dchol, .. } => dmu.iter().chain(dchol).copied().collect(),
        GeometryGrad::Picnn { dw, dv, db, .. } => {
            dw.iter().chain(dv).chain(db).flatten().copied().collect()
        }
    }
}

fn check_pullback(geom: &SetGeometry, q: f64, skip_v_out: Option<(usize, usize)>) {
    let task = TaskSpec::portfolio(2).unwrap();
    let opts = SolverOptions {
        tol: 1e-11,
        rho: 0.05,
        max_iter: 200,
        ..Default::default()
    };
    let y = [0.7, -0.3];
    let grad = pulled(geom, q, &task, &y, &opts);
    let analytic = flat_grad(&grad);
    let h = 1e-6;
    let count = params_mut(&mut geom.clone()).len();
    let mut pairs = Vec::new();
    for k in 0..count {
        if skip_v_out.is_some_and(|(a, b)| (a..b).contains(&k)) {
            continue;
        }
        let shifted = |d: f64| {
            let mut g2 = geom.clone();
            *params_mut(&mut g2)[k] += d;
            decision_loss(&g2, q, &task, &y, &opts)
        };
        pairs.push((analytic[k], (shifted(h) - shifted(-h)) / (2.0 * h)));
    }
    let fd_q = (decision_loss(geom, q + h, &task, &y, &opts)
        - decision_loss(geom, q - h, &task, &y, &opts))
        / (2.0 * h);
    pairs.push((grad.dq(), fd_q));
    let diff = pairs
        .iter()
        .map(|(a, f)| (a - f).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = pairs.iter().map(|(_, f)| f * f).sum::<f64>().sqrt();
    assert!(norm > 1e-6, "degenerate instance: zero gradient");
    assert!(
        diff / norm < 1e-4,
        "relative error {}: {pairs:?}",
        diff / norm
    );
    assert!(rel_err(grad.dq(), fd_q, 1e-3) < 1e-3);
}

#[test]
fn box_pullback_matches_finite_differences() {
    let geom = SetGeometry::Box {
        lo: vec![-0.4, -0.45],
        hi: vec![0.9, 0.2],
    };
    check_pullback(&geom, 0.3, None);
}

#[test]
fn ellipsoid_pullback_matches_finite_differences() {
    let geom = SetGeometry::Ellipsoid {
        mu: vec![0.4, 0.1],
        chol: vec![0.8, 0.3, 0.5],
    };
    check_pullback(&geom, 1.5, None);
}

#[test]
fn picnn_pullback_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (g, q) = random_picnn_set(&mut rng);
    // the modified output layer has no V_L entries in the program
    let before_v: usize = g.w.iter().map(Vec::len).sum();
    let v_out = before_v + g.v[..g.layers].iter().map(Vec::len).sum::<usize>();
    let skip = (v_out, v_out + g.v[g.layers].len());
    check_pullback(&SetGeometry::Picnn(g), q, Some(skip));
}
