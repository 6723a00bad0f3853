//! Multi-task regression `Y = XΘ + E` with the least-squares loss
//! `f(Θ) = (1/2n)‖Y − XΘ‖²_F`, an ℓ₁ (lasso) initializer, and
//! restricted-eigenvalue diagnostics for the design.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GdtError, Result};
use crate::gdt::{FactoredEval, Objective};
use crate::linalg::{
    solve_spd, spectral_norm, symmetric_eigenvalues, truncated_svd, FactorPair, DEFAULT_SVD_TOL,
};
use crate::matrix::Mat;

/// Use the precomputed Gram matrix once `n` is this many times `p`.
const GRAM_RATIO: usize = 4;

/// Least-squares multi-task objective over `p × k` coefficient matrices.
#[derive(Debug, Clone)]
pub struct MtlObjective {
    x: Mat,
    y: Mat,
    /// `XᵀX / n`, kept only when `n` is large relative to `p`.
    gram: Option<Mat>,
    /// `XᵀY / n`.
    xty: Mat,
}

impl MtlObjective {
    pub fn new(x: Mat, y: Mat) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(GdtError::DimensionMismatch {
                context: "MtlObjective: X and Y rows",
                expected: (x.rows(), y.cols()),
                got: y.shape(),
            });
        }
        if x.rows() == 0 {
            return Err(GdtError::InvalidConfig("design has no rows".into()));
        }
        let n = x.rows() as f64;
        let xty = x.t_matmul(&y).scale(1.0 / n);
        let gram = (x.rows() >= GRAM_RATIO * x.cols()).then(|| x.t_matmul(&x).scale(1.0 / n));
        Ok(MtlObjective {
            x,
            y,
            gram,
            xty,
        })
    }

    pub fn x(&self) -> &Mat {
        &self.x
    }

    pub fn y(&self) -> &Mat {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    /// `XᵀY / n`.
    pub fn xty(&self) -> &Mat {
        &self.xty
    }

    /// Residual-based evaluation, exact regardless of the Gram shortcut.
    pub fn residual_value(&self, theta: &Mat) -> f64 {
        let mut r = self.x.matmul(theta);
        r.axpy(-1.0, &self.y);
        r.frob_norm_sq() / (2.0 * self.n() as f64)
    }
}

impl Objective for MtlObjective {
    fn dims(&self) -> (usize, usize) {
        (self.x.cols(), self.y.cols())
    }

    fn value(&self, theta: &Mat) -> f64 {
        self.residual_value(theta)
    }

    fn grad(&self, theta: &Mat) -> Mat {
        match &self.gram {
            Some(g) => {
                let mut out = g.matmul(theta);
                out.axpy(-1.0, &self.xty);
                out
            }
            None => {
                let mut r = self.x.matmul(theta);
                r.axpy(-1.0, &self.y);
                self.x.t_matmul(&r).scale(1.0 / self.n() as f64)
            }
        }
    }

    fn factored(&self, pair: &FactorPair) -> FactoredEval {
        let (u, v) = (&pair.u, &pair.v);
        match &self.gram {
            Some(g) => {
                // ∇f = G U Vᵀ − B with G = XᵀX/n, B = XᵀY/n. The value comes from
                // the residual: the Gram expansion cancels to rounding noise near
                // an exact fit, which would mislead the step-size search.
                let gu = g.matmul(u);
                let utgu = u.t_matmul(&gu);
                let vtv = v.t_matmul(v);
                let bv = self.xty.matmul(v);
                let btu = self.xty.t_matmul(u);
                let mut r = self.x.matmul(u).matmul_t(v);
                r.axpy(-1.0, &self.y);
                let value = r.frob_norm_sq() / (2.0 * self.n() as f64);
                let mut grad_u = gu.matmul(&vtv);
                grad_u.axpy(-1.0, &bv);
                let mut grad_v = v.matmul(&utgu);
                grad_v.axpy(-1.0, &btu);
                FactoredEval {
                    value,
                    grad_u,
                    grad_v,
                }
            }
            None => {
                let inv_n = 1.0 / self.n() as f64;
                let xu = self.x.matmul(u);
                let mut r = xu.matmul_t(v);
                r.axpy(-1.0, &self.y);
                let value = 0.5 * inv_n * r.frob_norm_sq();
                let grad_u = self.x.t_matmul(&r.matmul(v)).scale(inv_n);
                let grad_v = r.t_matmul(&xu).scale(inv_n);
                FactoredEval {
                    value,
                    grad_u,
                    grad_v,
                }
            }
        }
    }
}

/// Least-squares loss and gradient from a single residual pass.
pub fn mtl_value_grad(x: &Mat, y: &Mat, theta: &Mat) -> Result<(f64, Mat)> {
    let (n, p) = x.shape();
    y.expect_shape("mtl_value_grad: Y", (n, y.cols()))?;
    theta.expect_shape("mtl_value_grad: theta", (p, y.cols()))?;
    if n == 0 {
        return Err(GdtError::InvalidConfig("design has no rows".into()));
    }
    let mut r = x.matmul(theta);
    r.axpy(-1.0, y);
    let n = n as f64;
    Ok((r.frob_norm_sq() / (2.0 * n), x.t_matmul(&r).scale(1.0 / n)))
}

/// Global minimizer of `f` over rank-`r` matrices (reduced-rank regression):
/// the least-squares fit projected onto the top `r` right singular vectors of
/// its fitted values. Requires `XᵀX` to be nonsingular.
pub fn reduced_rank_regression(x: &Mat, y: &Mat, r: usize) -> Result<Mat> {
    if x.rows() != y.rows() {
        return Err(GdtError::DimensionMismatch {
            context: "reduced_rank_regression: X and Y rows",
            expected: (x.rows(), y.cols()),
            got: y.shape(),
        });
    }
    let ls = solve_spd(&x.t_matmul(x), &x.t_matmul(y))?;
    let fitted = x.matmul(&ls);
    let svd = truncated_svd(&fitted, r, DEFAULT_SVD_TOL)?;
    Ok(ls.matmul(&svd.right).matmul_t(&svd.right))
}

/// Settings for the ℓ₁-penalized initializer. `lambda = None` selects it automatically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoConfig {
    pub lambda: Option<f64>,
    pub max_iters: usize,
    pub tol: f64,
    /// Monotone FISTA instead of plain ISTA.
    pub acceleration: bool,
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig {
            lambda: None,
            max_iters: 1000,
            tol: 1e-6,
            acceleration: true,
        }
    }
}

impl LassoConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda {
            if !(l > 0.0) || !l.is_finite() {
                return Err(GdtError::InvalidConfig(format!(
                    "lasso lambda must be positive, got {l}"
                )));
            }
        }
        if self.max_iters == 0 {
            return Err(GdtError::InvalidConfig("lasso max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(GdtError::InvalidConfig(format!(
                "lasso tol must be positive, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LassoFit {
    pub theta: Mat,
    pub lambda: f64,
    pub iterations: usize,
    /// Penalized objective, starting with its value at `Θ = 0`.
    pub objective_trace: Vec<f64>,
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Noise scale estimate: normalized median absolute deviation of the residuals
/// left after regressing each response on its single most correlated predictor.
pub fn residual_scale(x: &Mat, y: &Mat) -> f64 {
    let (n, p) = x.shape();
    let xty = x.t_matmul(y);
    let col_sq: Vec<f64> = x.col_norms().iter().map(|c| c * c).collect();
    let mut residuals = Vec::with_capacity(n * y.cols());
    for j in 0..y.cols() {
        let best = (0..p)
            .filter(|&i| col_sq[i] > 0.0)
            .max_by(|&a, &b| {
                (xty[(a, j)].abs() / col_sq[a].sqrt()).total_cmp(&(xty[(b, j)].abs() / col_sq[b].sqrt()))
            });
        let coef = best.map_or(0.0, |i| xty[(i, j)] / col_sq[i]);
        for row in 0..n {
            let fit = best.map_or(0.0, |i| coef * x[(row, i)]);
            residuals.push(y[(row, j)] - fit);
        }
    }
    let center = median(&mut residuals.clone());
    let mut dev: Vec<f64> = residuals.iter().map(|r| (r - center).abs()).collect();
    1.4826 * median(&mut dev)
}

/// Fraction of [`lambda_max`] below which the automatic choice never goes.
pub const AUTO_LAMBDA_FLOOR: f64 = 1e-3;

/// Smallest `λ` whose lasso solution is zero: `max |XᵀY| / n`.
pub fn lambda_max(x: &Mat, y: &Mat) -> f64 {
    x.t_matmul(y).max_abs() / x.rows() as f64
}

/// `λ = σ̂ · √(2 log(pk) / n)` with `σ̂` from [`residual_scale`], floored at
/// `AUTO_LAMBDA_FLOOR · λ_max` (the scale estimate is zero on noiseless data).
pub fn auto_lambda(x: &Mat, y: &Mat) -> f64 {
    let (n, p) = x.shape();
    let k = y.cols();
    let pk = ((p * k) as f64).max(2.0);
    let rule = residual_scale(x, y) * (2.0 * pk.ln() / n as f64).sqrt();
    rule.max(AUTO_LAMBDA_FLOOR * lambda_max(x, y))
}

/// Approximate lasso solution used as the starting point `Θ⁰`.
pub fn lasso_init(x: &Mat, y: &Mat, cfg: &LassoConfig) -> Result<Mat> {
    Ok(lasso_fit(x, y, cfg)?.theta)
}

pub fn lasso_fit(x: &Mat, y: &Mat, cfg: &LassoConfig) -> Result<LassoFit> {
    cfg.validate()?;
    let obj = MtlObjective::new(x.clone(), y.clone())?;
    let lambda = cfg.lambda.unwrap_or_else(|| auto_lambda(x, y));
    if !(lambda > 0.0) {
        return Err(GdtError::InvalidConfig(format!(
            "automatic lambda is not positive ({lambda}); responses may be constant"
        )));
    }
    let start = Mat::zeros(x.cols(), y.cols());
    Ok(lasso_from(&obj, start, lambda, cfg))
}

/// Proximal gradient on `f(Θ) + λ‖Θ‖₁` from `start`, with backtracking on the
/// Lipschitz estimate. The returned objective trace is nonincreasing.
pub fn lasso_from(obj: &MtlObjective, start: Mat, lambda: f64, cfg: &LassoConfig) -> LassoFit {
    let n = obj.n() as f64;
    let mut lip = spectral_norm(obj.x(), 1e-8).powi(2) / n;
    let penalized = |theta: &Mat, smooth: f64| smooth + lambda * l1(theta);

    let mut x_cur = start;
    let mut f_cur = penalized(&x_cur, obj.value(&x_cur));
    let mut trace = vec![f_cur];
    if lip == 0.0 {
        return LassoFit {
            theta: x_cur,
            lambda,
            iterations: 0,
            objective_trace: trace,
        };
    }
    let mut y_k = x_cur.clone();
    let mut t = 1.0f64;
    let mut iterations = 0;
    for it in 1..=cfg.max_iters {
        iterations = it;
        let fy = obj.value(&y_k);
        let gy = obj.grad(&y_k);
        let (z, fz_smooth) = loop {
            let step = 1.0 / lip;
            let z = Mat::from_fn(y_k.rows(), y_k.cols(), |i, j| {
                soft_threshold(y_k[(i, j)] - step * gy[(i, j)], lambda * step)
            });
            let fz = obj.value(&z);
            let d = z.sub(&y_k);
            let model = fy + gy.inner(&d) + 0.5 * lip * d.frob_norm_sq();
            if fz <= model + 1e-12 * fy.abs().max(1.0) {
                break (z, fz);
            }
            lip *= 2.0;
        };
        let f_z = penalized(&z, fz_smooth);
        let accepted = f_z <= f_cur;
        let (x_next, f_next) = if accepted { (z.clone(), f_z) } else { (x_cur.clone(), f_cur) };
        if cfg.acceleration {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let mut y_next = x_next.clone();
            y_next.axpy(t / t_next, &z.sub(&x_next));
            y_next.axpy((t - 1.0) / t_next, &x_next.sub(&x_cur));
            y_k = y_next;
            t = t_next;
        } else {
            y_k = x_next.clone();
        }
        let rel_change = (f_cur - f_next).abs() / f_cur.abs().max(f64::MIN_POSITIVE);
        x_cur = x_next;
        f_cur = f_next;
        trace.push(f_cur);
        if accepted && rel_change < cfg.tol {
            break;
        }
    }
    LassoFit {
        theta: x_cur,
        lambda,
        iterations,
        objective_trace: trace,
    }
}

fn l1(m: &Mat) -> f64 {
    m.as_slice().iter().map(|x| x.abs()).sum()
}

/// How [`re_constants`] explores sparse directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReMode {
    /// Random `s`-sparse unit vectors.
    MonteCarlo { trials: usize, seed: u64 },
    /// Extreme eigenvalues of `(XᵀX)_SS / n` over every support of size `s`.
    Exhaustive,
}

/// Largest number of supports the exhaustive mode will enumerate.
pub const MAX_EXHAUSTIVE_SUPPORTS: u64 = 2_000_000;

/// Restricted eigenvalue bounds `(κ̲(s), κ̄(s))` of `‖Xθ‖²/n` over `s`-sparse unit `θ`.
pub fn re_constants(x: &Mat, s: usize, mode: ReMode) -> Result<(f64, f64)> {
    let (n, p) = x.shape();
    if s == 0 || s > p {
        return Err(GdtError::InvalidConfig(format!("sparsity {s} outside 1..={p}")));
    }
    match mode {
        ReMode::MonteCarlo { trials, seed } => {
            if trials == 0 {
                return Err(GdtError::InvalidConfig("trials must be at least 1".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut lo = f64::INFINITY;
            let mut hi = 0.0f64;
            for _ in 0..trials {
                let support = sample(&mut rng, p, s).into_vec();
                let coef = Mat::random_normal(s, 1, &mut rng);
                let norm = coef.frob_norm();
                let mut xt = vec![0.0; n];
                for (c, &j) in support.iter().enumerate() {
                    let w = coef[(c, 0)] / norm;
                    for (acc, row) in xt.iter_mut().zip(0..n) {
                        *acc += w * x[(row, j)];
                    }
                }
                let ratio = xt.iter().map(|v| v * v).sum::<f64>() / n as f64;
                lo = lo.min(ratio);
                hi = hi.max(ratio);
            }
            Ok((lo, hi))
        }
        ReMode::Exhaustive => {
            let count = binomial(p as u64, s as u64);
            if count > MAX_EXHAUSTIVE_SUPPORTS {
                return Err(GdtError::InvalidConfig(format!(
                    "exhaustive RE scan over C({p},{s}) = {count} supports is too large"
                )));
            }
            let gram = x.t_matmul(x).scale(1.0 / n as f64);
            let mut lo = f64::INFINITY;
            let mut hi = 0.0f64;
            for_each_subset(p, s, |support| {
                let sub = Mat::from_fn(s, s, |a, b| gram[(support[a], support[b])]);
                let eig = symmetric_eigenvalues(&sub);
                lo = lo.min(eig[0].max(0.0));
                hi = hi.max(eig[s - 1]);
            });
            Ok((lo, hi))
        }
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Calls `f` on every increasing `s`-subset of `0..p` in lexicographic order.
pub fn for_each_subset(p: usize, s: usize, mut f: impl FnMut(&[usize])) {
    if s > p {
        return;
    }
    let mut idx: Vec<usize> = (0..s).collect();
    loop {
        f(&idx);
        let mut i = s;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + p - s {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..s {
            idx[j] = idx[j - 1] + 1;
        }
    }
}
