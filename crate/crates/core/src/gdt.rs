//! Factorized gradient descent with row-wise hard thresholding.
//!
//! The iterate is a [`FactorPair`] `(U, V)` with `Θ = U Vᵀ`. Each step takes a
//! simultaneous gradient step on `f(U Vᵀ) + g(U, V)`, where `g` is the balance
//! penalty `¼‖UᵀU − VᵀV‖²_F`, and then keeps the `s1` largest rows of `U` and
//! the `s2` largest rows of `V`.

use serde::{Deserialize, Serialize};

use crate::error::{GdtError, Result};
use crate::linalg::{
    balanced_factors, hard_threshold_rows, spectral_norm, subspace_distance, FactorPair,
    DEFAULT_SVD_TOL,
};
use crate::matrix::Mat;

/// A smooth loss `f(Θ)` over `m1 × m2` matrices.
///
/// Implementations must be safe to evaluate concurrently from several threads.
pub trait Objective: Sync {
    /// `(m1, m2)`.
    fn dims(&self) -> (usize, usize);

    fn value(&self, theta: &Mat) -> f64;

    /// Gradient of [`Objective::value`], shape `m1 × m2`.
    fn grad(&self, theta: &Mat) -> Mat;

    /// Value and factor gradients `(∇f·V, ∇fᵀ·U)` at `Θ = U Vᵀ`.
    ///
    /// Override when the factored form is cheaper than materializing `Θ`.
    fn factored(&self, pair: &FactorPair) -> FactoredEval {
        let theta = pair.product();
        let g = self.grad(&theta);
        FactoredEval {
            value: self.value(&theta),
            grad_u: g.matmul(&pair.v),
            grad_v: g.t_matmul(&pair.u),
        }
    }
}

/// Loss value and its gradients with respect to the two factors.
#[derive(Debug, Clone)]
pub struct FactoredEval {
    pub value: f64,
    pub grad_u: Mat,
    pub grad_v: Mat,
}

/// Solver settings. `rank`, `s1` and `s2` default to 0 ("unset") and must be
/// given before solving. `eta = None` selects `kappa / ‖Z₀‖₂²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GdtConfig {
    pub rank: usize,
    /// Row budget for `U`.
    pub s1: usize,
    /// Row budget for `V`.
    pub s2: usize,
    pub eta: Option<f64>,
    pub kappa: f64,
    /// Halve the step while the objective fails to decrease sufficiently (at
    /// most 20 times per step, restarting from the base step each iteration).
    pub backtracking: bool,
    pub max_iters: usize,
    /// Stop once `‖Θᵗ − Θᵗ⁻¹‖_F / ‖Θᵗ⁻¹‖_F` drops below this; 0 disables.
    pub rel_tol: f64,
    pub seed: u64,
    pub svd_tol: f64,
}

impl Default for GdtConfig {
    fn default() -> Self {
        GdtConfig {
            rank: 0,
            s1: 0,
            s2: 0,
            eta: None,
            kappa: DEFAULT_KAPPA,
            backtracking: true,
            max_iters: 500,
            rel_tol: 0.0,
            seed: 0,
            svd_tol: DEFAULT_SVD_TOL,
        }
    }
}

/// Default numerator of the automatic step size `kappa / ‖Z₀‖₂²`.
pub const DEFAULT_KAPPA: f64 = 1.0;
const MAX_HALVINGS: usize = 20;
const ARMIJO: f64 = 1e-4;
const DIVERGENCE_FACTOR: f64 = 10.0;

impl GdtConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GdtError::InvalidConfig(msg));
        if self.rank == 0 {
            return bad("rank must be set to at least 1".into());
        }
        if self.s1 == 0 || self.s2 == 0 {
            return bad(format!("row budgets must be at least 1 (s1={}, s2={})", self.s1, self.s2));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if let Some(eta) = self.eta {
            if !(eta >= 0.0) || !eta.is_finite() {
                return bad(format!("eta must be finite and nonnegative, got {eta}"));
            }
        }
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return bad(format!("kappa must be positive, got {}", self.kappa));
        }
        if !(self.rel_tol >= 0.0) {
            return bad(format!("rel_tol must be nonnegative, got {}", self.rel_tol));
        }
        if !(self.svd_tol > 0.0) {
            return bad(format!("svd_tol must be positive, got {}", self.svd_tol));
        }
        if self.s1 < self.rank || self.s2 < self.rank {
            log::warn!(
                "row budgets (s1={}, s2={}) below rank {}: the estimate has rank at most {}",
                self.s1,
                self.s2,
                self.rank,
                self.s1.min(self.s2)
            );
        }
        Ok(())
    }
}

/// The solver's state between steps.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub iterate: FactorPair,
    pub iteration: usize,
    /// `f(U Vᵀ)`.
    pub objective_value: f64,
    /// `g(U, V)`.
    pub penalty_value: f64,
}

impl SolverState {
    pub fn new<O: Objective + ?Sized>(iterate: FactorPair, obj: &O) -> Self {
        let objective_value = obj.factored(&iterate).value;
        let penalty_value = penalty_value(&iterate);
        SolverState {
            iterate,
            iteration: 0,
            objective_value,
            penalty_value,
        }
    }

    pub fn total(&self) -> f64 {
        self.objective_value + self.penalty_value
    }
}

/// One entry of the per-iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub objective: f64,
    pub penalty: f64,
    pub eta: f64,
    /// `‖Θᵗ − Θ*‖_F` when the truth is known.
    pub theta_error: Option<f64>,
    /// Subspace distance to the balanced factorization of the truth.
    pub distance: Option<f64>,
    /// Nonzero rows of `U`.
    pub row_support: Vec<usize>,
    /// Nonzero rows of `V`.
    pub col_support: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIters,
    Tolerance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub theta_hat: Mat,
    pub factors: FactorPair,
    /// Initial point followed by one record per iteration.
    pub trace: Vec<TraceRecord>,
    pub iterations_run: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
    /// Step size in effect at the start of the run.
    pub initial_eta: f64,
}

impl SolveReport {
    pub fn final_record(&self) -> &TraceRecord {
        self.trace.last().expect("trace always holds the initial point")
    }
}

/// Balance penalty `¼‖UᵀU − VᵀV‖²_F`.
pub fn penalty_value(p: &FactorPair) -> f64 {
    0.25 * gram_difference(p).frob_norm_sq()
}

/// `(∇_U g, ∇_V g) = (U(UᵀU − VᵀV), V(VᵀV − UᵀU))`.
pub fn penalty_grad(p: &FactorPair) -> (Mat, Mat) {
    let d = gram_difference(p);
    let gu = p.u.matmul(&d);
    let mut gv = p.v.matmul(&d);
    gv.scale_mut(-1.0);
    (gu, gv)
}

fn gram_difference(p: &FactorPair) -> Mat {
    let mut d = p.u.t_matmul(&p.u);
    d.axpy(-1.0, &p.v.t_matmul(&p.v));
    d
}

/// Balanced rank-`r` factorization of `theta0`, hard-thresholded to the budgets.
pub fn initialize(theta0: &Mat, cfg: &GdtConfig) -> Result<FactorPair> {
    let (m1, m2) = theta0.shape();
    if cfg.rank > m1.min(m2) {
        return Err(GdtError::InvalidConfig(format!(
            "rank {} exceeds min dimension of a {m1}x{m2} problem",
            cfg.rank
        )));
    }
    let balanced = balanced_factors(theta0, cfg.rank, cfg.svd_tol)?;
    Ok(FactorPair {
        u: hard_threshold_rows(&balanced.u, cfg.s1),
        v: hard_threshold_rows(&balanced.v, cfg.s2),
    })
}

/// Step size bound `(1 / (16‖Z₀‖₂²)) · min{1 / (2(μ + L)), 1}`.
pub fn default_step_size(z0: &FactorPair, mu: f64, l: f64) -> Result<f64> {
    if mu > l {
        return Err(GdtError::InvalidConfig(format!(
            "strong convexity constant {mu} exceeds smoothness constant {l}"
        )));
    }
    let norm = spectral_norm(&z0.stacked(), 1e-10);
    if norm == 0.0 {
        return Err(GdtError::DegenerateInit(
            "initial factors are zero; step size undefined".into(),
        ));
    }
    Ok(step_size_bound(norm, mu, l))
}

pub(crate) fn step_size_bound(z0_norm: f64, mu: f64, l: f64) -> f64 {
    (1.0 / (16.0 * z0_norm * z0_norm)) * (1.0 / (2.0 * (mu + l))).min(1.0)
}

/// Automatic step size `kappa / ‖Z₀‖₂²`.
pub fn auto_step_size(z0: &FactorPair, kappa: f64) -> Result<f64> {
    let norm = spectral_norm(&z0.stacked(), 1e-10);
    if norm == 0.0 {
        return Err(GdtError::DegenerateInit(
            "initial factors are zero; cannot derive a step size from them".into(),
        ));
    }
    Ok(kappa / (norm * norm))
}

fn take_step(
    pair: &FactorPair,
    eval: &FactoredEval,
    eta: f64,
    s1: usize,
    s2: usize,
) -> FactorPair {
    let (pu, pv) = penalty_grad(pair);
    let mut u = pair.u.clone();
    u.axpy(-eta, &eval.grad_u);
    u.axpy(-eta, &pu);
    let mut v = pair.v.clone();
    v.axpy(-eta, &eval.grad_v);
    v.axpy(-eta, &pv);
    FactorPair {
        u: hard_threshold_rows(&u, s1),
        v: hard_threshold_rows(&v, s2),
    }
}

fn check_finite(eval: &FactoredEval, iteration: usize) -> Result<()> {
    if eval.value.is_finite() && eval.grad_u.is_finite() && eval.grad_v.is_finite() {
        Ok(())
    } else {
        Err(GdtError::NonFiniteGradient { iteration })
    }
}

/// One simultaneous update with step size `eta`: both half-steps use `(Uᵗ, Vᵗ)`.
pub fn step<O: Objective + ?Sized>(
    state: &SolverState,
    obj: &O,
    cfg: &GdtConfig,
    eta: f64,
) -> Result<SolverState> {
    let eval = obj.factored(&state.iterate);
    check_finite(&eval, state.iteration)?;
    let next = take_step(&state.iterate, &eval, eta, cfg.s1, cfg.s2);
    let mut out = SolverState::new(next, obj);
    out.iteration = state.iteration + 1;
    Ok(out)
}

fn check_dims<O: Objective + ?Sized>(obj: &O, theta0: &Mat, truth: Option<&Mat>) -> Result<()> {
    theta0.expect_shape("solve: theta0", obj.dims())?;
    if let Some(t) = truth {
        t.expect_shape("solve: truth", obj.dims())?;
    }
    Ok(())
}

/// Runs initialization followed by up to `max_iters` steps.
pub fn solve<O: Objective + ?Sized>(
    obj: &O,
    theta0: &Mat,
    cfg: &GdtConfig,
    truth: Option<&Mat>,
) -> Result<SolveReport> {
    cfg.validate()?;
    check_dims(obj, theta0, truth)?;
    let init = initialize(theta0, cfg)?;
    solve_from(obj, init, cfg, truth)
}

/// Like [`solve`] but starting from given factors (no SVD initialization).
pub fn solve_from<O: Objective + ?Sized>(
    obj: &O,
    init: FactorPair,
    cfg: &GdtConfig,
    truth: Option<&Mat>,
) -> Result<SolveReport> {
    cfg.validate()?;
    init.u.expect_shape("solve: U", (obj.dims().0, cfg.rank))?;
    init.v.expect_shape("solve: V", (obj.dims().1, cfg.rank))?;
    if let Some(t) = truth {
        t.expect_shape("solve: truth", obj.dims())?;
    }
    let init = FactorPair {
        u: hard_threshold_rows(&init.u, cfg.s1),
        v: hard_threshold_rows(&init.v, cfg.s2),
    };

    let truth_factors = match truth {
        Some(t) => Some(balanced_factors(t, cfg.rank, cfg.svd_tol)?),
        None => None,
    };
    let record = |pair: &FactorPair, theta: &Mat, iteration, objective, penalty, eta| -> Result<TraceRecord> {
        let (theta_error, distance) = match (truth, &truth_factors) {
            (Some(t), Some(zs)) => (
                Some(theta.sub(t).frob_norm()),
                Some(subspace_distance(pair, zs)?),
            ),
            _ => (None, None),
        };
        Ok(TraceRecord {
            iteration,
            objective,
            penalty,
            eta,
            theta_error,
            distance,
            row_support: nonzero_rows(&pair.u),
            col_support: nonzero_rows(&pair.v),
        })
    };

    let initial_eta = match cfg.eta {
        Some(eta) => eta,
        None => auto_step_size(&init, cfg.kappa)?,
    };
    let backtrack = cfg.backtracking && cfg.eta.is_none();

    let mut pair = init;
    let mut eval = obj.factored(&pair);
    check_finite(&eval, 0)?;
    let mut penalty = penalty_value(&pair);
    let mut theta = pair.product();
    let initial_total = eval.value + penalty;
    let mut trace = vec![record(&pair, &theta, 0, eval.value, penalty, initial_eta)?];
    let mut stop_reason = StopReason::MaxIters;
    let mut iterations_run = 0;

    for t in 1..=cfg.max_iters {
        let total = eval.value + penalty;
        // sufficient decrease for a projected step
        let descends = |value: f64, next: &FactorPair, eta: f64| {
            let moved = next.u.sub(&pair.u).frob_norm_sq() + next.v.sub(&pair.v).frob_norm_sq();
            // a few ulps of slack: at a stationary point every trial would otherwise fail
            value <= total - ARMIJO / eta * moved + 8.0 * f64::EPSILON * total.abs()
        };
        // every iteration starts from the base step; halvings do not carry over
        let mut eta = initial_eta;
        let mut candidate = take_step(&pair, &eval, eta, cfg.s1, cfg.s2);
        let mut cand_eval = obj.factored(&candidate);
        let mut cand_pen = penalty_value(&candidate);
        if backtrack && !descends(cand_eval.value + cand_pen, &candidate, eta) {
            let mut trial_eta = eta;
            for _ in 0..MAX_HALVINGS {
                trial_eta *= 0.5;
                let trial = take_step(&pair, &eval, trial_eta, cfg.s1, cfg.s2);
                let trial_eval = obj.factored(&trial);
                let trial_pen = penalty_value(&trial);
                if descends(trial_eval.value + trial_pen, &trial, trial_eta) {
                    (eta, candidate, cand_eval, cand_pen) = (trial_eta, trial, trial_eval, trial_pen);
                    break;
                }
            }
            // no descent at any trial step means rounding-level noise near a
            // stationary point; the base step is kept
        }
        check_finite(&cand_eval, t)?;
        let new_total = cand_eval.value + cand_pen;
        if new_total > DIVERGENCE_FACTOR * initial_total.max(1e-12) {
            return Err(GdtError::Diverged {
                iteration: t,
                objective: new_total,
                initial: initial_total,
            });
        }
        let new_theta = candidate.product();
        let change = new_theta.sub(&theta).frob_norm() / theta.frob_norm().max(f64::MIN_POSITIVE);

        pair = candidate;
        eval = cand_eval;
        penalty = cand_pen;
        theta = new_theta;
        iterations_run = t;
        trace.push(record(&pair, &theta, t, eval.value, penalty, eta)?);

        if cfg.rel_tol > 0.0 && change < cfg.rel_tol {
            stop_reason = StopReason::Tolerance;
            break;
        }
    }

    Ok(SolveReport {
        theta_hat: theta,
        factors: pair,
        trace,
        iterations_run,
        converged: stop_reason == StopReason::Tolerance,
        stop_reason,
        initial_eta,
    })
}

fn nonzero_rows(m: &Mat) -> Vec<usize> {
    (0..m.rows())
        .filter(|&i| m.row(i).iter().any(|&x| x != 0.0))
        .collect()
}

/// Constants from the convergence analysis, for advisory checks of a configuration.
///
/// The statistical error term of the analysis is a supremum over a
/// combinatorial set and is not computed here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryDiagnostics {
    /// Restricted strong convexity constant.
    pub mu: f64,
    /// Restricted smoothness constant.
    pub l: f64,
    /// Smallest nonzero singular value of the target.
    pub sigma_r_theta: f64,
    /// `⅛ · min{1, μL/(μ+L)}`.
    pub mu_min: f64,
    /// `⅘ · mu_min · σ_r · min{1/(μ+L), 2}`.
    pub i0: f64,
    /// `1 + 2/√(c − 1)`.
    pub xi_sq: f64,
    /// Overselection factor `s = c · s*`.
    pub c: f64,
    /// `‖Z₀‖₂` of the initial stacked factors.
    pub z0_norm: f64,
}

impl TheoryDiagnostics {
    pub fn new(mu: f64, l: f64, sigma_r_theta: f64, c: f64, z0_norm: f64) -> Self {
        let harmonic = if mu + l > 0.0 { mu * l / (mu + l) } else { 0.0 };
        let mu_min = 0.125 * harmonic.min(1.0);
        let i0 = 0.8 * mu_min * sigma_r_theta * (1.0 / (mu + l)).min(2.0);
        let xi_sq = if c > 1.0 {
            1.0 + 2.0 / (c - 1.0).sqrt()
        } else {
            f64::INFINITY
        };
        TheoryDiagnostics {
            mu,
            l,
            sigma_r_theta,
            mu_min,
            i0,
            xi_sq,
            c,
            z0_norm,
        }
    }

    /// Radius of the ball around the target the initial estimate must fall in.
    pub fn init_radius(&self) -> f64 {
        0.2 * self
            .sigma_r_theta
            .min(self.i0 / self.xi_sq.sqrt() * self.sigma_r_theta.sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub eta: f64,
    /// Contraction factor `ξ²(1 − η·⅖·mu_min·σ_r)`.
    pub beta: f64,
    pub beta_ok: bool,
    pub step_bound: f64,
    pub step_ok: bool,
    pub init_radius: f64,
}

/// Evaluates the contraction factor and step-size condition for `eta`. Advisory only.
pub fn check_theory(diag: &TheoryDiagnostics, eta: f64) -> TheoryReport {
    let beta = diag.xi_sq * (1.0 - eta * 0.4 * diag.mu_min * diag.sigma_r_theta);
    let step_bound = if diag.z0_norm > 0.0 {
        step_size_bound(diag.z0_norm, diag.mu, diag.l)
    } else {
        f64::INFINITY
    };
    TheoryReport {
        eta,
        beta,
        beta_ok: beta < 1.0,
        step_bound,
        step_ok: eta <= step_bound,
        init_radius: diag.init_radius(),
    }
}
