mod common;

use common::{fd_gradient, random, relative_error};
use gdt_core::mtl::{
    lambda_max, lasso_fit, lasso_init, mtl_value_grad, re_constants, reduced_rank_regression, ReMode,
};
use gdt_core::{LassoConfig, Mat, MtlObjective, Objective};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn na(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// `n × p` design with `XᵀX / n = I`.
fn orthogonal_design(n: usize, p: usize, seed: u64) -> Mat {
    let q = na(&random(n, p, seed)).qr().q();
    Mat::from_fn(n, p, |i, j| q[(i, j)] * (n as f64).sqrt())
}

fn lasso(lambda: f64) -> LassoConfig {
    LassoConfig {
        lambda: Some(lambda),
        ..LassoConfig::default()
    }
}

#[test]
fn value_and_gradient_known_cases() {
    let x = random(10, 6, 1);
    let theta = random(6, 3, 2);
    let (v, g) = mtl_value_grad(&x, &x.matmul(&theta), &theta).unwrap();
    assert!(v.abs() < 1e-24 && g.max_abs() < 1e-12);

    let n = 5;
    let theta = random(n, 2, 3);
    let (v, g) = mtl_value_grad(&Mat::identity(n), &Mat::zeros(n, 2), &theta).unwrap();
    assert!((v - theta.frob_norm_sq() / (2.0 * n as f64)).abs() < 1e-14);
    assert!(g.sub(&theta.scale(1.0 / n as f64)).max_abs() < 1e-15);

    let y = random(10, 3, 4);
    let theta = random(6, 3, 5);
    let (_, g) = mtl_value_grad(&x, &y, &theta).unwrap();
    let obj = MtlObjective::new(x.clone(), y.clone()).unwrap();
    let fd = fd_gradient(|t| obj.value(t), &theta, 1e-5);
    assert!(relative_error(&g, &fd) < 1e-6);
}

#[test]
fn gram_shortcut_matches_residual_evaluation() {
    // n ≥ 4p takes the Gram path
    let x = random(80, 5, 6);
    let y = random(80, 3, 7);
    let theta = random(5, 3, 8);
    let obj = MtlObjective::new(x.clone(), y.clone()).unwrap();
    let (v, g) = mtl_value_grad(&x, &y, &theta).unwrap();
    assert!((obj.value(&theta) - v).abs() < 1e-12 * v);
    assert!(relative_error(&obj.grad(&theta), &g) < 1e-12);
}

#[test]
fn lasso_zero_above_lambda_max() {
    let x = random(30, 8, 9);
    let y = random(30, 4, 10);
    let fit = lasso_fit(&x, &y, &lasso(lambda_max(&x, &y) * 1.0001)).unwrap();
    assert_eq!(fit.theta.max_abs(), 0.0);
}

#[test]
fn lasso_tiny_lambda_approaches_least_squares() {
    let x = random(6, 6, 11).add(&Mat::identity(6).scale(4.0));
    let truth = random(6, 2, 12);
    let y = x.matmul(&truth);
    let cfg = LassoConfig {
        lambda: Some(1e-9),
        tol: 1e-14,
        max_iters: 20_000,
        ..LassoConfig::default()
    };
    let theta = lasso_init(&x, &y, &cfg).unwrap();
    assert!(theta.sub(&truth).max_abs() < 1e-6);
}

#[test]
fn lasso_univariate_closed_form() {
    let x = Mat::from_rows(&[[1.0], [2.0], [-1.0], [0.5]]).unwrap();
    let y = Mat::from_rows(&[[2.0], [3.5], [-0.5], [1.0]]).unwrap();
    let n = 4.0;
    let a: f64 = (1.0 + 4.0 + 1.0 + 0.25) / n;
    let z: f64 = (2.0 + 7.0 + 0.5 + 0.5) / n;
    for lambda in [0.05, 0.5, 1.5, 2.6] {
        let expected = z.signum() * (z.abs() - lambda).max(0.0) / a;
        let theta = lasso_init(&x, &y, &lasso(lambda)).unwrap();
        assert!((theta[(0, 0)] - expected).abs() < 1e-6, "lambda {lambda}");
    }
}

#[test]
fn reduced_rank_oracle_is_rank_r_least_squares() {
    let x = random(40, 6, 13);
    let y = random(40, 5, 14);
    let theta = reduced_rank_regression(&x, &y, 2).unwrap();
    let s = na(&theta).singular_values();
    assert_eq!(s.iter().filter(|&&v| v > 1e-10).count(), 2);
    // no random rank-2 perturbation improves the fit
    let obj = MtlObjective::new(x, y).unwrap();
    for seed in 0..20 {
        let other = theta.add(&random(6, 1, seed).matmul_t(&random(5, 1, seed + 99)).scale(1e-3));
        let o = na(&other).svd(true, true);
        let mut sv = o.singular_values.clone();
        for i in 2..sv.len() {
            sv[i] = 0.0;
        }
        let trunc = o.u.unwrap() * DMatrix::from_diagonal(&sv) * o.v_t.unwrap();
        let trunc = Mat::from_fn(6, 5, |i, j| trunc[(i, j)]);
        assert!(obj.value(&trunc) >= obj.value(&theta) - 1e-12);
    }
}

#[test]
fn re_exhaustive_matches_eigen_scan() {
    let x = random(50, 8, 15);
    let (lo, hi) = re_constants(&x, 3, ReMode::Exhaustive).unwrap();
    let gram = na(&x).transpose() * na(&x) / 50.0;
    let (mut olo, mut ohi) = (f64::INFINITY, 0.0f64);
    for a in 0..8 {
        for b in a + 1..8 {
            for c in b + 1..8 {
                let idx = [a, b, c];
                let sub = DMatrix::from_fn(3, 3, |i, j| gram[(idx[i], idx[j])]);
                let eig = sub.symmetric_eigenvalues();
                olo = olo.min(eig.min());
                ohi = ohi.max(eig.max());
            }
        }
    }
    assert!((lo - olo).abs() < 1e-10 && (hi - ohi).abs() < 1e-10);

    let scaled = Mat::identity(6).scale(6f64.sqrt());
    let (lo, hi) = re_constants(&scaled, 2, ReMode::Exhaustive).unwrap();
    assert!((lo - 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
}

#[test]
fn re_monte_carlo_lies_within_exhaustive_bounds() {
    let x = random(40, 7, 16);
    let (lo, hi) = re_constants(&x, 2, ReMode::Exhaustive).unwrap();
    let (mlo, mhi) = re_constants(&x, 2, ReMode::MonteCarlo { trials: 500, seed: 1 }).unwrap();
    assert!(lo <= mlo + 1e-12 && mhi <= hi + 1e-12 && mlo <= mhi);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn orthogonal_design_lasso_is_soft_thresholding(
        seed in any::<u64>(), lambda in 0.01f64..1.0
    ) {
        let x = orthogonal_design(20, 5, seed);
        let y = random(20, 3, seed ^ 5);
        let theta = lasso_init(&x, &y, &lasso(lambda)).unwrap();
        let z = x.t_matmul(&y).scale(1.0 / 20.0);
        for i in 0..5 {
            for j in 0..3 {
                let v: f64 = z[(i, j)];
                let expected = v.signum() * (v.abs() - lambda).max(0.0);
                prop_assert!((theta[(i, j)] - expected).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn lasso_objective_monotone_and_below_zero_start(
        seed in any::<u64>(), accel in any::<bool>(), frac in 0.01f64..0.9
    ) {
        let x = random(25, 12, seed);
        let y = random(25, 4, seed ^ 9);
        let cfg = LassoConfig {
            lambda: Some(frac * lambda_max(&x, &y)),
            acceleration: accel,
            ..LassoConfig::default()
        };
        let fit = lasso_fit(&x, &y, &cfg).unwrap();
        prop_assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(*fit.objective_trace.last().unwrap() <= fit.objective_trace[0]);
    }

    #[test]
    fn re_bounds_ordered_and_upper_monotone(seed in any::<u64>()) {
        let x = random(20, 7, seed);
        let mut prev_hi = 0.0;
        for s in 1..=4 {
            let (lo, hi) = re_constants(&x, s, ReMode::Exhaustive).unwrap();
            prop_assert!(0.0 <= lo && lo <= hi);
            prop_assert!(hi >= prev_hi - 1e-12);
            prev_hi = hi;
        }
    }
}
