mod common;

use common::{fd_gradient, random, relative_error};
use gdt_core::gdt::{
    check_theory, default_step_size, initialize, penalty_grad, penalty_value, solve, step, FactoredEval,
    SolverState, TheoryDiagnostics,
};
use gdt_core::linalg::{hard_threshold_rows, FactorPair};
use gdt_core::mtl::{lasso_init, re_constants, reduced_rank_regression, ReMode};
use gdt_core::{GdtConfig, LassoConfig, Mat, MtlObjective, Objective};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn singular_values(m: &Mat) -> Vec<f64> {
    let mut s: Vec<f64> = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
        .singular_values()
        .iter()
        .copied()
        .collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

fn cfg(rank: usize, s1: usize, s2: usize) -> GdtConfig {
    GdtConfig {
        rank,
        s1,
        s2,
        ..GdtConfig::default()
    }
}

/// `Θ* = U* V*ᵀ` with orthonormal column blocks on the first `s` rows, so all
/// nonzero singular values equal `scale`.
fn well_conditioned_truth(p: usize, k: usize, r: usize, s: usize, scale: f64, seed: u64) -> Mat {
    let qr = |rows: usize, seed: u64| {
        let q = DMatrix::from_row_slice(rows, r, random(rows, r, seed).as_slice()).qr().q();
        Mat::from_fn(rows, r, |i, j| q[(i, j)])
    };
    let (a, b) = (qr(s, seed), qr(s, seed + 1));
    let u = Mat::from_fn(p, r, |i, j| if i < s { a[(i, j)] * scale.sqrt() } else { 0.0 });
    let v = Mat::from_fn(k, r, |i, j| if i < s { b[(i, j)] * scale.sqrt() } else { 0.0 });
    u.matmul_t(&v)
}

#[test]
fn penalty_matches_scalar_loop() {
    for seed in 0..10 {
        let (u, v) = (random(3, 2, seed), random(4, 2, seed + 100));
        let mut total = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                let uu: f64 = (0..3).map(|i| u[(i, a)] * u[(i, b)]).sum();
                let vv: f64 = (0..4).map(|i| v[(i, a)] * v[(i, b)]).sum();
                total += (uu - vv) * (uu - vv);
            }
        }
        let pair = FactorPair::new(u, v).unwrap();
        assert!((penalty_value(&pair) - 0.25 * total).abs() < 1e-12 * (1.0 + total));
    }
}

#[test]
fn penalty_scalar_example() {
    let pair = FactorPair::new(Mat::from_rows(&[[2.0]]).unwrap(), Mat::from_rows(&[[0.0]]).unwrap()).unwrap();
    assert_eq!(penalty_value(&pair), 4.0);
    let (gu, gv) = penalty_grad(&pair);
    assert_eq!((gu[(0, 0)], gv[(0, 0)]), (8.0, 0.0));
}

#[test]
fn penalty_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let (u, v) = (random(5, 3, seed), random(4, 3, seed + 50));
        let pair = FactorPair::new(u.clone(), v.clone()).unwrap();
        let (gu, gv) = penalty_grad(&pair);
        let fd_u = fd_gradient(|x| penalty_value(&FactorPair::new(x.clone(), v.clone()).unwrap()), &u, 1e-5);
        let fd_v = fd_gradient(|x| penalty_value(&FactorPair::new(u.clone(), x.clone()).unwrap()), &v, 1e-5);
        assert!(relative_error(&gu, &fd_u) < 1e-6, "seed {seed}");
        assert!(relative_error(&gv, &fd_v) < 1e-6, "seed {seed}");
    }
}

#[test]
fn combined_factor_gradient_matches_finite_differences() {
    let obj = MtlObjective::new(random(12, 5, 1), random(12, 4, 2)).unwrap();
    for seed in 0..20 {
        let (u, v) = (random(5, 2, seed), random(4, 2, seed + 7));
        let pair = FactorPair::new(u.clone(), v.clone()).unwrap();
        let FactoredEval { grad_u, grad_v, .. } = obj.factored(&pair);
        let (pu, pv) = penalty_grad(&pair);
        let total = |u: &Mat, v: &Mat| {
            let p = FactorPair::new(u.clone(), v.clone()).unwrap();
            obj.value(&p.product()) + penalty_value(&p)
        };
        let fd_u = fd_gradient(|x| total(x, &v), &u, 1e-5);
        let fd_v = fd_gradient(|x| total(&u, x), &v, 1e-5);
        assert!(relative_error(&grad_u.add(&pu), &fd_u) < 1e-5, "seed {seed}");
        assert!(relative_error(&grad_v.add(&pv), &fd_v) < 1e-5, "seed {seed}");
    }
}

#[test]
fn initialize_exact_sparse_low_rank() {
    let truth = well_conditioned_truth(8, 6, 2, 3, 2.0, 4).add(&{
        // make singular values distinct
        let mut t = Mat::zeros(8, 6);
        t[(0, 0)] = 0.5;
        t
    });
    let pair = initialize(&truth, &cfg(3, 3, 3)).unwrap();
    assert!(relative_error(&pair.product(), &truth) < 1e-9);
    let (su, sv) = (singular_values(&pair.u), singular_values(&pair.v));
    for (a, b) in su.iter().zip(&sv) {
        assert!((a - b).abs() < 1e-9);
    }
    let zero = initialize(&Mat::zeros(4, 3), &cfg(2, 2, 2)).unwrap();
    assert_eq!(zero.u.max_abs() + zero.v.max_abs(), 0.0);
}

#[test]
fn initialize_factors_carry_square_root_singular_values() {
    let theta = random(7, 5, 21);
    let s = singular_values(&theta);
    let full = initialize(&theta, &cfg(2, 7, 5)).unwrap();
    for (i, (a, b)) in singular_values(&full.u).iter().zip(singular_values(&full.v)).enumerate() {
        assert!((a - s[i].sqrt()).abs() < 1e-8 && (b - s[i].sqrt()).abs() < 1e-8);
    }
    let thresholded = initialize(&theta, &cfg(2, 3, 3)).unwrap();
    assert_eq!(thresholded.u, hard_threshold_rows(&full.u, 3));
    assert_eq!(thresholded.v, hard_threshold_rows(&full.v, 3));
}

#[test]
fn stationary_point_is_fixed() {
    let x = random(20, 6, 3);
    let truth = well_conditioned_truth(6, 5, 2, 3, 1.5, 8);
    let obj = MtlObjective::new(x.clone(), x.matmul(&truth)).unwrap();
    let c = cfg(2, 3, 3);
    let state = SolverState::new(initialize(&truth, &c).unwrap(), &obj);
    let next = step(&state, &obj, &c, 0.05).unwrap();
    assert!(relative_error(&next.iterate.product(), &truth) < 1e-9);
    assert_eq!(next.iteration, 1);
}

#[test]
fn default_step_size_formula_on_design() {
    let x = random(60, 10, 5);
    let (mu, l) = re_constants(&x, 3, ReMode::Exhaustive).unwrap();
    let pair = FactorPair::new(random(10, 2, 6), random(4, 2, 7)).unwrap();
    let eta = default_step_size(&pair, mu, l).unwrap();
    let z = singular_values(&pair.stacked())[0];
    let expected = 1.0 / (16.0 * z * z) * (1.0 / (2.0 * (mu + l))).min(1.0);
    assert!((eta - expected).abs() < 1e-9 * expected);

    let theta = random(10, 4, 8);
    let sigma_r = singular_values(&theta)[1];
    let diag = TheoryDiagnostics::new(mu, l, sigma_r, 2.0, z);
    let report = check_theory(&diag, eta);
    let mu_min = 0.125 * (mu * l / (mu + l)).min(1.0);
    let beta = (1.0 + 2.0) * (1.0 - eta * 0.4 * mu_min * sigma_r);
    assert!((report.beta - beta).abs() < 1e-12);
    assert!(!report.beta_ok && report.step_ok);
}

#[test]
fn starting_at_truth_stays_there() {
    let x = random(40, 12, 9);
    let truth = well_conditioned_truth(12, 8, 2, 4, 3.0, 10);
    let obj = MtlObjective::new(x.clone(), x.matmul(&truth)).unwrap();
    let report = solve(&obj, &truth, &cfg(2, 4, 4), Some(&truth)).unwrap();
    let scale = truth.frob_norm();
    for rec in &report.trace {
        assert!(rec.theta_error.unwrap() / scale < 1e-9);
    }
}

#[test]
fn full_budgets_reach_reduced_rank_optimum() {
    let x = random(60, 8, 12);
    let truth = random(8, 2, 13).matmul_t(&random(6, 2, 14));
    let y = x.matmul(&truth).add(&random(60, 6, 15).scale(0.5));
    let obj = MtlObjective::new(x.clone(), y.clone()).unwrap();
    let oracle = reduced_rank_regression(&x, &y, 2).unwrap();
    let theta0 = lasso_init(&x, &y, &LassoConfig::default()).unwrap();
    let c = GdtConfig {
        max_iters: 3000,
        ..cfg(2, 8, 6)
    };
    let report = solve(&obj, &theta0, &c, None).unwrap();
    let gap = obj.value(&report.theta_hat) - obj.value(&oracle);
    assert!(gap.abs() < 1e-8, "gap {gap}");
}

#[test]
fn noiseless_contraction_and_balance() {
    // Budgets twice the true sparsity; the automatic step.
    let (n, p, k, r, s) = (120, 30, 20, 2, 4);
    let x = random(n, p, 31);
    let truth = well_conditioned_truth(p, k, r, s, 4.0, 32);
    let obj = MtlObjective::new(x.clone(), x.matmul(&truth)).unwrap();
    let theta0 = lasso_init(&x, obj.y(), &LassoConfig::default()).unwrap();
    let c = GdtConfig {
        max_iters: 2000,
        ..cfg(r, 2 * s, 2 * s)
    };
    let report = solve(&obj, &theta0, &c, Some(&truth)).unwrap();
    let d: Vec<f64> = report.trace.iter().map(|t| t.distance.unwrap()).collect();
    for t in 5..d.len() - 1 {
        if d[t] < 1e-10 {
            break;
        }
        assert!(d[t + 1] <= 0.99 * d[t], "iteration {t}: {} -> {}", d[t], d[t + 1]);
    }
    assert!(*d.last().unwrap() < 1e-10);
    let f = &report.factors;
    let imbalance = f.u.t_matmul(&f.u).sub(&f.v.t_matmul(&f.v)).frob_norm() / f.u.t_matmul(&f.u).frob_norm();
    assert!(imbalance <= 1e-3, "{imbalance}");
}

#[test]
fn repeated_solves_are_identical() {
    let x = random(30, 10, 41);
    let y = x.matmul(&well_conditioned_truth(10, 6, 2, 3, 1.0, 42)).add(&random(30, 6, 43).scale(0.1));
    let obj = MtlObjective::new(x.clone(), y.clone()).unwrap();
    let theta0 = lasso_init(&x, &y, &LassoConfig::default()).unwrap();
    let a = solve(&obj, &theta0, &cfg(2, 4, 4), None).unwrap();
    let b = solve(&obj, &theta0, &cfg(2, 4, 4), None).unwrap();
    assert_eq!(a.theta_hat, b.theta_hat);
    assert_eq!(a.trace, b.trace);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_iterate_respects_budgets(
        seed in any::<u64>(), s1 in 1usize..6, s2 in 1usize..5, r in 1usize..3
    ) {
        let x = random(25, 8, seed);
        let y = random(25, 6, seed ^ 1);
        let obj = MtlObjective::new(x.clone(), y.clone()).unwrap();
        let theta0 = lasso_init(&x, &y, &LassoConfig::default()).unwrap();
        let c = GdtConfig { max_iters: 30, ..cfg(r, s1, s2) };
        if let Ok(report) = solve(&obj, &theta0, &c, None) {
            prop_assert_eq!(report.trace.len(), report.iterations_run + 1);
            for rec in &report.trace {
                prop_assert!(rec.row_support.len() <= s1 && rec.col_support.len() <= s2);
            }
            prop_assert!(report.factors.u.nonzero_rows() <= s1 && report.factors.v.nonzero_rows() <= s2);
        }
    }

    #[test]
    fn mtl_gradient_conformance(seed in any::<u64>()) {
        let obj = MtlObjective::new(random(10, 6, seed), random(10, 3, seed ^ 2)).unwrap();
        let theta = random(6, 3, seed ^ 3);
        let fd = fd_gradient(|t| obj.value(t), &theta, 1e-5);
        prop_assert!(relative_error(&obj.grad(&theta), &fd) < 1e-6);
    }
}
