mod common;

use common::{adjoint_fd_error, central, exact, rand_matrix, rand_qp, rand_vector, rel_err};
use cro_core::solver::{solve, ConicProgram, NormTerm, SolveStatus, SolverOptions};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Optimum of `min ½vᵀPv + cᵀv, A v = b` by one dense KKT solve.
fn kkt_solve(
    p: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> DVector<f64> {
    let (n, m) = (p.nrows(), a.nrows());
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(p);
    k.view_mut((n, 0), (m, n)).copy_from(a);
    k.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-c));
    rhs.rows_mut(n, m).copy_from(b);
    k.lu()
        .solve(&rhs)
        .expect("nonsingular KKT")
        .rows(0, n)
        .into_owned()
}

/// Brute-force active-set enumeration: the unique subset whose equality
/// solve is primal feasible with nonnegative multipliers.
fn active_set_oracle(prog: &ConicProgram) -> DVector<f64> {
    let (n, m) = (prog.num_vars(), prog.a_in.nrows());
    for mask in 0..1usize << m {
        let act: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
        let rows = prog.a_eq.nrows() + act.len();
        if rows > n {
            continue;
        }
        let mut a = DMatrix::zeros(rows, n);
        let mut b = DVector::zeros(rows);
        a.rows_mut(0, prog.a_eq.nrows()).copy_from(&prog.a_eq);
        b.rows_mut(0, prog.b_eq.len()).copy_from(&prog.b_eq);
        for (k, &i) in act.iter().enumerate() {
            a.row_mut(prog.a_eq.nrows() + k)
                .copy_from(&prog.a_in.row(i));
            b[prog.a_eq.nrows() + k] = prog.b_in[i];
        }
        let mut kkt = DMatrix::zeros(n + rows, n + rows);
        kkt.view_mut((0, 0), (n, n)).copy_from(&prog.p);
        kkt.view_mut((n, 0), (rows, n)).copy_from(&a);
        kkt.view_mut((0, n), (n, rows)).copy_from(&a.transpose());
        let mut rhs = DVector::zeros(n + rows);
        rhs.rows_mut(0, n).copy_from(&(-&prog.c));
        rhs.rows_mut(n, rows).copy_from(&b);
        let Some(sol) = kkt.lu().solve(&rhs) else {
            continue;
        };
        let v = sol.rows(0, n).into_owned();
        let feasible = (&prog.a_in * &v - &prog.b_in).iter().all(|r| *r <= 1e-9);
        let dual_ok = (0..act.len()).all(|k| sol[n + prog.a_eq.nrows() + k] >= -1e-9);
        if feasible && dual_ok {
            return v;
        }
    }
    panic!("no active set satisfies the KKT conditions");
}

#[test]
fn equality_qp_matches_direct_kkt_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.random_range(2..9);
        let m = rng.random_range(1..n);
        let prog = rand_qp(&mut rng, n, m, 0);
        let res = solve(&prog, &exact()).unwrap().ensure_optimal().unwrap();
        let v = kkt_solve(&prog.p, &prog.c, &prog.a_eq, &prog.b_eq);
        assert!((&res.v - &v).amax() < 1e-8, "{} vs {}", res.v, v);
    }
}

#[test]
fn inequality_qp_matches_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let prog = rand_qp(&mut rng, 3, 1, 5);
        let res = solve(&prog, &exact()).unwrap().ensure_optimal().unwrap();
        let v = active_set_oracle(&prog);
        assert!((&res.v - &v).amax() < 1e-7, "{} vs {}", res.v, v);
        assert!((res.value - prog.objective(&v)).abs() < 1e-7);
    }
}

#[test]
fn infeasible_program_is_reported() {
    let mut prog = ConicProgram::new(&[("v", 1)]);
    prog.c[0] = 1.0;
    prog.push_in(
        "lo",
        DMatrix::from_element(1, 1, -1.0),
        DVector::from_element(1, -1.0),
    );
    prog.push_in(
        "hi",
        DMatrix::from_element(1, 1, 1.0),
        DVector::from_element(1, 0.0),
    );
    let res = solve(&prog, &SolverOptions::default()).unwrap();
    assert_eq!(res.status, SolveStatus::Infeasible);
}

#[test]
fn norm_term_matches_closed_form() {
    // min cᵀv + t ||v - a|| over v_i <= 10: v = a whenever ||c|| < t, where the
    // norm is not differentiable; the smoothing error is O(sqrt(δ))
    let mut prog = ConicProgram::new(&[("v", 3)]);
    prog.c = DVector::from_vec(vec![0.2, -0.1, 0.3]);
    let a = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    prog.norm = Some(NormTerm {
        weight: 1.0,
        g: DMatrix::identity(3, 3),
        h: -&a,
    });
    prog.push_in(
        "box",
        DMatrix::identity(3, 3),
        DVector::from_element(3, 10.0),
    );
    let opts = SolverOptions {
        smoothing: 1e-12,
        tol: 1e-9,
        ..exact()
    };
    let res = solve(&prog, &opts).unwrap().ensure_optimal().unwrap();
    assert!((&res.v - &a).amax() < 1e-5, "{}", res.v);
    assert!((res.value - prog.c.dot(&a)).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kkt_adjoint_matches_finite_differences(seed in any::<u64>()) {
        if let Some((err, pairs)) = adjoint_fd_error(seed) {
            prop_assert!(err < 1e-4, "relative error {err} over {pairs:?}");
        }
    }
}

#[test]
fn norm_adjoint_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 4;
    let mut prog = rand_qp(&mut rng, n, 1, 3);
    prog.norm = Some(NormTerm {
        weight: 0.7,
        g: rand_matrix(&mut rng, 3, n),
        h: rand_vector(&mut rng, 3),
    });
    let opts = SolverOptions {
        smoothing: 1e-3,
        ..exact()
    };
    let w = rand_vector(&mut rng, n);
    let res = solve(&prog, &opts).unwrap().ensure_optimal().unwrap();
    let adj = res.differentiate_solution(&prog, &w).unwrap();
    let ng = adj.norm.as_ref().unwrap();
    let loss = |p: &ConicProgram| w.dot(&solve(p, &opts).unwrap().v);
    let nt = prog.norm.as_ref().unwrap();
    let fd = central(
        |x| {
            let mut p = prog.clone();
            p.norm.as_mut().unwrap().weight = x;
            loss(&p)
        },
        nt.weight,
        1e-6,
    );
    assert!(rel_err(ng.dt, fd, 1e-3) < 1e-4, "t: {} vs {fd}", ng.dt);
    for k in 0..3 {
        let fd = central(
            |x| {
                let mut p = prog.clone();
                p.norm.as_mut().unwrap().h[k] = x;
                loss(&p)
            },
            nt.h[k],
            1e-6,
        );
        assert!(
            rel_err(ng.dh[k], fd, 1e-3) < 1e-4,
            "h[{k}]: {} vs {fd}",
            ng.dh[k]
        );
        let fd = central(
            |x| {
                let mut p = prog.clone();
                p.norm.as_mut().unwrap().g[(k, 1)] = x;
                loss(&p)
            },
            nt.g[(k, 1)],
            1e-6,
        );
        assert!(
            rel_err(ng.dg[(k, 1)], fd, 1e-3) < 1e-4,
            "G[{k},1]: {} vs {fd}",
            ng.dg[(k, 1)]
        );
    }
}
