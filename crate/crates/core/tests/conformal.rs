mod common;

use common::{gauss, Family};
use cro_core::conformal::{calibrate_scores, ensure_nonempty, min_score, quantile_gradient, rank};
use cro_core::models::GatedPicnn;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn threshold_is_the_conformal_order_statistic(
        scores in prop::collection::vec(-50.0f64..50.0, 1..200),
        alpha in 0.001f64..0.999,
    ) {
        let m = scores.len();
        let rec = calibrate_scores(&scores, alpha).unwrap();
        // smallest k with k >= (m + 1)(1 - alpha), by linear search
        let k = (1..=m + 1).find(|&k| k as f64 >= (m as f64 + 1.0) * (1.0 - alpha) - 1e-9).unwrap();
        prop_assert_eq!(rec.k, k);
        if k == m + 1 {
            prop_assert!(rec.q.is_infinite() && rec.grad_index.is_none());
            prop_assert!(rec.finite_q().is_err());
        } else {
            let at_most = scores.iter().filter(|s| **s <= rec.q).count();
            let below = scores.iter().filter(|s| **s < rec.q).count();
            prop_assert!(at_most >= k && below < k, "k {} at_most {} below {}", k, at_most, below);
            prop_assert_eq!(scores[rec.grad_index.unwrap()], rec.q);
        }
        // a larger risk level never raises the threshold
        let looser = calibrate_scores(&scores, (alpha + 0.1).min(0.999)).unwrap();
        prop_assert!(looser.q <= rec.q);
    }
}

#[test]
fn rank_handles_exact_products() {
    assert_eq!(rank(9, 0.9), 9);
    assert_eq!(rank(99, 0.9), 90);
    assert_eq!(rank(400, 0.9), 361);
    assert_eq!(rank(5, 0.95), 6);
}

#[test]
fn exchangeable_scores_are_covered() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (m, trials, alpha) = (50, 4000, 0.2);
    let mut hits = 0;
    for _ in 0..trials {
        let cal: Vec<f64> = (0..m).map(|_| gauss(&mut rng)).collect();
        let q = calibrate_scores(&cal, alpha).unwrap().q;
        hits += usize::from(gauss(&mut rng) <= q);
    }
    let cov = hits as f64 / trials as f64;
    let se = (0.8 * 0.2 / trials as f64).sqrt();
    let upper = 1.0 - alpha + 1.0 / (m as f64 + 1.0);
    assert!(
        cov >= 1.0 - alpha - 4.0 * se && cov <= upper + 4.0 * se,
        "coverage {cov}"
    );
}

#[test]
fn quantile_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    for _ in 0..100 {
        let (m, p) = (rng.random_range(5..60), rng.random_range(1..6));
        let fam = Family::new(&mut rng, m, p);
        let th: Vec<f64> = (0..p).map(|_| gauss(&mut rng)).collect();
        let alpha = rng.random_range(0.05..0.5);
        let rec = calibrate_scores(&fam.scores(&th), alpha).unwrap();
        if !rec.is_finite() {
            continue;
        }
        let g = quantile_gradient(&rec, &fam.grads(&th));
        let h = 1e-6;
        for j in 0..p {
            let shifted = |d: f64| {
                let mut t = th.clone();
                t[j] += d;
                calibrate_scores(&fam.scores(&t), alpha).unwrap()
            };
            let (up, down) = (shifted(h), shifted(-h));
            // only where the selected index is locally constant
            if up.grad_index != rec.grad_index || down.grad_index != rec.grad_index {
                continue;
            }
            let fd = (up.q - down.q) / (2.0 * h);
            assert!(
                (g[j] - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                "{} vs {fd}",
                g[j]
            );
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn quantile_gradient_vanishes_on_the_infinite_branch() {
    let fam = Family::new(&mut ChaCha8Rng::seed_from_u64(2), 9, 3);
    let th = [0.3, -0.1, 0.7];
    // α = 0.09 < 1/(M+1) = 0.1
    let rec = calibrate_scores(&fam.scores(&th), 0.09).unwrap();
    assert!(rec.q.is_infinite());
    assert_eq!(quantile_gradient(&rec, &fam.grads(&th)), vec![0.0; 3]);
}

/// Random one-hidden-layer gated PICNN on `R²` with nonnegative `W` and the
/// `ε ||y||_∞` output term, which makes every sublevel set bounded.
fn random_gated(rng: &mut impl Rng) -> GatedPicnn {
    let (n, d) = (2, 4);
    let mut v = |k: usize| (0..k).map(|_| gauss(rng)).collect::<Vec<f64>>();
    let v0 = v(d * n);
    let b0 = v(d);
    let w1: Vec<f64> = v(d).into_iter().map(f64::abs).collect();
    let b1 = v(1);
    GatedPicnn {
        n,
        d,
        layers: 1,
        w: vec![Vec::new(), w1],
        v: vec![v0, vec![0.0; n]],
        b: vec![b0, b1],
        eps_inf: 0.5,
        modified_output: true,
    }
}

fn grid_min(g: &GatedPicnn) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..=400 {
        for j in 0..=400 {
            let y = [-10.0 + 0.05 * i as f64, -10.0 + 0.05 * j as f64];
            best = best.min(g.score(&y));
        }
    }
    best
}

#[test]
fn minimal_score_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in 0..20 {
        let g = random_gated(&mut rng);
        let (found, y) = min_score(&g, t);
        assert!((g.score(&y) - found).abs() < 1e-12);
        let grid = grid_min(&g);
        // the grid is only 0.05-accurate; the score is Lipschitz with a small constant
        assert!(
            found <= grid + 1e-3,
            "net {t}: descent {found} vs grid {grid}"
        );
    }
}

#[test]
fn empty_sets_are_lifted_to_the_minimal_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for t in 0..10 {
        let g = random_gated(&mut rng);
        let (smin, _) = min_score(&g, t);
        let out = ensure_nonempty(&g, smin - 1.0, t);
        assert!(out.raised && out.q >= smin && out.q <= smin + 1e-6);
        let fine = ensure_nonempty(&g, smin + 1.0, t);
        assert!(!fine.raised && fine.q == smin + 1.0);
    }
}
