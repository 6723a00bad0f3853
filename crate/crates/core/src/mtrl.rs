//! Multi-task fitted Q-iteration on finite MDPs, with GDT as the regression
//! step, plus exact value iteration as a reference.
//!
//! State-action pairs are indexed row-major: `(s, a)` is row `s * n_actions + a`.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GdtError, Result};
use crate::gdt::{solve, GdtConfig};
use crate::io::write_text;
use crate::matrix::Mat;
use crate::mtl::{lambda_max, lasso_init, LassoConfig, MtlObjective, AUTO_LAMBDA_FLOOR};

const STOCHASTIC_TOL: f64 = 1e-12;

/// A finite MDP with deterministic rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transitions[a][s][s']` = P(s' | s, a).
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[s][a]`, within `[0, 1]`.
    pub rewards: Vec<Vec<f64>>,
    pub gamma: f64,
}

impl MdpSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GdtError::InvalidConfig(msg));
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return bad("MDP needs at least one state and one action".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if self.transitions.len() != na {
            return bad(format!(
                "expected {na} transition matrices, found {}",
                self.transitions.len()
            ));
        }
        for (a, p) in self.transitions.iter().enumerate() {
            if p.len() != ns {
                return bad(format!("transitions[{a}] has {} rows, expected {ns}", p.len()));
            }
            for (s, row) in p.iter().enumerate() {
                if row.len() != ns {
                    return bad(format!(
                        "transitions[{a}][{s}] has {} entries, expected {ns}",
                        row.len()
                    ));
                }
                if row.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                    return bad(format!("transitions[{a}][{s}] has a negative or non-finite entry"));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return bad(format!("transitions[{a}][{s}] sums to {sum}, not 1"));
                }
            }
        }
        if self.rewards.len() != ns || self.rewards.iter().any(|r| r.len() != na) {
            return bad(format!("rewards must be {ns} rows of {na} entries"));
        }
        if self.rewards.iter().flatten().any(|&r| !(0.0..=1.0).contains(&r)) {
            return bad("rewards must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mdp: MdpSpec = serde_json::from_str(text)?;
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| GdtError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Uniform random rewards and transition rows drawn from a flat Dirichlet.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> Self {
        let transitions = (0..n_actions)
            .map(|_| {
                (0..n_states)
                    .map(|_| {
                        let w: Vec<f64> = (0..n_states)
                            .map(|_| -(1.0 - rng.random::<f64>()).ln())
                            .collect();
                        let total: f64 = w.iter().sum();
                        w.iter().map(|x| x / total).collect()
                    })
                    .collect()
            })
            .collect();
        let rewards = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.random::<f64>()).collect())
            .collect();
        MdpSpec {
            n_states,
            n_actions,
            transitions,
            rewards,
            gamma,
        }
    }

    /// `(TQ)(s,a) = R(s,a) + γ Σ_{s'} P_a(s,s') max_{a'} Q(s',a')` for a single column `q`.
    pub fn bellman(&self, q: &[f64]) -> Vec<f64> {
        let v = state_values(q, self.n_states, self.n_actions);
        let mut out = vec![0.0; self.n_states * self.n_actions];
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let next: f64 = self.transitions[a][s].iter().zip(&v).map(|(p, v)| p * v).sum();
                out[s * self.n_actions + a] = self.rewards[s][a] + self.gamma * next;
            }
        }
        out
    }

    fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let row = &self.transitions[a][s];
        let mut acc = 0.0;
        for (next, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return next;
            }
        }
        // rounding: fall back to the last state with positive probability
        row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

fn state_values(q: &[f64], n_states: usize, n_actions: usize) -> Vec<f64> {
    (0..n_states)
        .map(|s| q[s * n_actions..(s + 1) * n_actions].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// State features, extended to state-action features by block placement.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub phi_state: Mat,
}

impl FeatureMap {
    pub fn new(phi_state: Mat) -> Self {
        FeatureMap { phi_state }
    }

    pub fn one_hot(n_states: usize) -> Self {
        FeatureMap::new(Mat::identity(n_states))
    }

    pub fn state_dim(&self) -> usize {
        self.phi_state.cols()
    }

    /// `φ(s, a)`: `φ_state(s)` in block `a`, zeros elsewhere.
    pub fn phi(&self, s: usize, a: usize, n_actions: usize) -> Vec<f64> {
        let ps = self.state_dim();
        let mut out = vec![0.0; n_actions * ps];
        out[a * ps..(a + 1) * ps].copy_from_slice(self.phi_state.row(s));
        out
    }
}

/// The `(n_states · n_actions) × (n_actions · p_s)` design whose row `(s, a)` is `φ(s, a)`.
pub fn feature_matrix(fm: &FeatureMap, n_actions: usize) -> Mat {
    let ns = fm.phi_state.rows();
    let mut out = Mat::zeros(ns * n_actions, n_actions * fm.state_dim());
    for s in 0..ns {
        for a in 0..n_actions {
            out.row_mut(s * n_actions + a).copy_from_slice(&fm.phi(s, a, n_actions));
        }
    }
    out
}

/// State-action values, one column per task.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub values: Mat,
    pub n_actions: usize,
}

impl QTable {
    pub fn n_states(&self) -> usize {
        self.values.rows() / self.n_actions
    }

    /// Greedy action per task and state, ties to the lowest action index.
    pub fn greedy(&self) -> Vec<Vec<usize>> {
        (0..self.values.cols())
            .map(|task| {
                (0..self.n_states())
                    .map(|s| {
                        let mut best = 0;
                        for a in 1..self.n_actions {
                            if self.values[(s * self.n_actions + a, task)]
                                > self.values[(s * self.n_actions + best, task)]
                            {
                                best = a;
                            }
                        }
                        best
                    })
                    .collect()
            })
            .collect()
    }
}

/// Exact value iteration until successive iterates differ by at most `tol` in sup norm.
pub fn value_iteration(mdp: &MdpSpec, tol: f64) -> Result<QTable> {
    mdp.validate()?;
    if !(tol > 0.0) {
        return Err(GdtError::InvalidConfig(format!("tol must be positive, got {tol}")));
    }
    let mut q = vec![0.0; mdp.n_states * mdp.n_actions];
    loop {
        let next = mdp.bellman(&q);
        let diff = next.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        q = next;
        if diff * mdp.gamma <= tol {
            break;
        }
    }
    let rows = q.len();
    Ok(QTable {
        values: Mat::new(rows, 1, q)?,
        n_actions: mdp.n_actions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SampleMode {
    /// Expected backups using the full transition kernel.
    Exact,
    /// Sampled next states, averaged over `repeats` draws per pair.
    Generative { repeats: usize },
}

fn check_tasks(mdps: &[MdpSpec], fm: &FeatureMap) -> Result<()> {
    let first = mdps
        .first()
        .ok_or_else(|| GdtError::InvalidConfig("at least one task is required".into()))?;
    for (i, m) in mdps.iter().enumerate() {
        m.validate()?;
        if m.n_states != first.n_states || m.n_actions != first.n_actions {
            return Err(GdtError::InvalidConfig(format!(
                "task {i} has {}x{} states/actions, task 0 has {}x{}",
                m.n_states, m.n_actions, first.n_states, first.n_actions
            )));
        }
    }
    if fm.phi_state.rows() != first.n_states {
        return Err(GdtError::DimensionMismatch {
            context: "feature map rows vs states",
            expected: (first.n_states, fm.state_dim()),
            got: fm.phi_state.shape(),
        });
    }
    Ok(())
}

/// Regression targets `r + γ max_{a'} φ(s',a')ᵀθ_prev[:, task]` for every
/// state-action pair (rows) and task (columns).
pub fn bellman_targets(
    mdps: &[MdpSpec],
    fm: &FeatureMap,
    theta_prev: &Mat,
    mode: SampleMode,
    seed: u64,
) -> Result<Mat> {
    check_tasks(mdps, fm)?;
    let (ns, na) = (mdps[0].n_states, mdps[0].n_actions);
    theta_prev.expect_shape("bellman_targets: theta_prev", (na * fm.state_dim(), mdps.len()))?;
    if let SampleMode::Generative { repeats: 0 } = mode {
        return Err(GdtError::InvalidConfig("repeats must be at least 1".into()));
    }
    let q_prev = feature_matrix(fm, na).matmul(theta_prev);
    let columns: Vec<Vec<f64>> = mdps
        .par_iter()
        .enumerate()
        .map(|(task, mdp)| {
            let q = q_prev.column(task);
            match mode {
                SampleMode::Exact => mdp.bellman(&q),
                SampleMode::Generative { repeats } => {
                    let v = state_values(&q, ns, na);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(task as u64);
                    let mut out = vec![0.0; ns * na];
                    for s in 0..ns {
                        for a in 0..na {
                            let total: f64 = (0..repeats)
                                .map(|_| mdp.rewards[s][a] + mdp.gamma * v[mdp.sample_next(s, a, &mut rng)])
                                .sum();
                            out[s * na + a] = total / repeats as f64;
                        }
                    }
                    out
                }
            }
        })
        .collect();
    let mut y = Mat::zeros(ns * na, mdps.len());
    for (task, col) in columns.iter().enumerate() {
        y.set_column(task, col);
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FqiConfig {
    pub outer_iters: usize,
    pub mode: SampleMode,
    pub seed: u64,
    /// Number of design states sampled (shared across tasks); `None` uses all.
    pub design_states: Option<usize>,
    pub gdt: GdtConfig,
    pub lasso: LassoConfig,
}

impl Default for FqiConfig {
    fn default() -> Self {
        FqiConfig {
            outer_iters: 100,
            mode: SampleMode::Exact,
            seed: 0,
            design_states: None,
            gdt: GdtConfig::default(),
            lasso: LassoConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FqiResult {
    pub theta: Mat,
    pub q: QTable,
    /// `policies[task][state]`.
    pub policies: Vec<Vec<usize>>,
    /// Sup-norm change of the Q estimates at each outer iteration.
    pub q_changes: Vec<f64>,
}

/// Fitted Q-iteration: starting from `Θ⁰ = 0`, regress Bellman targets on the
/// state-action features with GDT at every outer step.
///
/// Each inner solve starts from a lasso fit. Backup targets carry little noise,
/// so an unset lasso `lambda` means `AUTO_LAMBDA_FLOOR · λ_max` here.
pub fn fqi_gdt(mdps: &[MdpSpec], fm: &FeatureMap, cfg: &FqiConfig) -> Result<FqiResult> {
    check_tasks(mdps, fm)?;
    cfg.gdt.validate()?;
    cfg.lasso.validate()?;
    if cfg.outer_iters == 0 {
        return Err(GdtError::InvalidConfig("outer_iters must be at least 1".into()));
    }
    let (ns, na) = (mdps[0].n_states, mdps[0].n_actions);
    let phi = feature_matrix(fm, na);
    let design_rows: Vec<usize> = match cfg.design_states {
        None => (0..ns * na).collect(),
        Some(m) if m == 0 || m > ns => {
            return Err(GdtError::InvalidConfig(format!(
                "design_states must be in 1..={ns}, got {m}"
            )))
        }
        Some(m) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut states = sample(&mut rng, ns, m).into_vec();
            states.sort_unstable();
            states.iter().flat_map(|&s| (0..na).map(move |a| s * na + a)).collect()
        }
    };
    let select = |m: &Mat| Mat::from_fn(design_rows.len(), m.cols(), |i, j| m[(design_rows[i], j)]);
    let x = select(&phi);

    let mut theta = Mat::zeros(phi.cols(), mdps.len());
    let mut q = phi.matmul(&theta);
    let mut q_changes = Vec::with_capacity(cfg.outer_iters);
    for t in 0..cfg.outer_iters {
        let targets = bellman_targets(mdps, fm, &theta, cfg.mode, cfg.seed.wrapping_add(t as u64))?;
        let y = select(&targets);
        let lmax = lambda_max(&x, &y);
        let theta0 = if lmax > 0.0 {
            let lasso = LassoConfig {
                lambda: Some(cfg.lasso.lambda.unwrap_or(AUTO_LAMBDA_FLOOR * lmax)),
                ..cfg.lasso.clone()
            };
            lasso_init(&x, &y, &lasso)?
        } else {
            Mat::zeros(theta.rows(), theta.cols())
        };
        theta = if theta0.frob_norm() > 0.0 {
            let obj = MtlObjective::new(x.clone(), y)?;
            solve(&obj, &theta0, &cfg.gdt, None)?.theta_hat
        } else {
            theta0
        };
        let q_next = phi.matmul(&theta);
        q_changes.push(q_next.sub(&q).max_abs());
        q = q_next;
    }
    let q = QTable {
        values: q,
        n_actions: na,
    };
    Ok(FqiResult {
        policies: q.greedy(),
        theta,
        q,
        q_changes,
    })
}

/// Writes `state,task_0,task_1,...` rows of greedy actions.
pub fn write_policies_csv(path: impl AsRef<Path>, policies: &[Vec<usize>]) -> Result<()> {
    let n_states = policies.first().map_or(0, Vec::len);
    let mut out = String::from("state");
    for task in 0..policies.len() {
        out.push_str(&format!(",task_{task}"));
    }
    out.push('\n');
    for s in 0..n_states {
        out.push_str(&s.to_string());
        for p in policies {
            out.push_str(&format!(",{}", p[s]));
        }
        out.push('\n');
    }
    write_text(path, &out)
}
