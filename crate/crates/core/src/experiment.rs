//! Config-driven experiment runners behind the `gdt` binary: convergence
//! traces, replicated metric tables, runtime scaling, CSV solves and the
//! multi-task fitted Q-iteration demo.
//!
//! All outputs except the timing columns of the benchmark are deterministic
//! functions of the resolved configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{evaluate, generate, InstanceParams, Metrics, Noise};
use crate::error::{GdtError, Result};
use crate::gdt::{solve, GdtConfig, Objective, SolveReport};
use crate::io::{read_matrix_csv, write_matrix_csv, write_text};
use crate::matrix::Mat;
use crate::mtl::{lasso_fit, reduced_rank_regression, LassoConfig, MtlObjective};
use crate::mtrl::{
    feature_matrix, fqi_gdt, value_iteration, write_policies_csv, FeatureMap, FqiConfig, MdpSpec, QTable,
    SampleMode,
};

/// Above this many iterations per-iteration traces are written only on request.
pub const TRACE_LIMIT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    SynthSolve,
    Convergence,
    Table,
    Mtrl,
    Bench,
}

/// Which convergence study to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// `E = 0`: iterates converge to `Θ*`.
    #[default]
    Noiseless,
    /// Full budgets on a dense low-rank `Θ*`: iterates converge to the
    /// reduced-rank regression optimum.
    NoSparsity,
}

/// Settings for the fitted Q-iteration demo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtrlSettings {
    /// MDP JSON files, one per task. Empty means random MDPs.
    pub mdp_files: Vec<PathBuf>,
    pub tasks: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// State-feature CSV (`n_states × p_s`); one-hot when absent.
    pub features: Option<PathBuf>,
    pub outer_iters: usize,
    pub mode: SampleMode,
    pub design_states: Option<usize>,
    /// Sup-norm tolerance for the value-iteration reference.
    pub oracle_tol: f64,
}

impl Default for MtrlSettings {
    fn default() -> Self {
        MtrlSettings {
            mdp_files: Vec::new(),
            tasks: 10,
            n_states: 5,
            n_actions: 3,
            gamma: 0.9,
            features: None,
            outer_iters: 100,
            mode: SampleMode::Exact,
            design_states: None,
            oracle_tol: 1e-10,
        }
    }
}

/// Partial instance settings; unset fields keep the mode's defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceOverrides {
    pub n: Option<usize>,
    pub p: Option<usize>,
    pub k: Option<usize>,
    pub r: Option<usize>,
    pub s1_star: Option<usize>,
    pub s2_star: Option<usize>,
    pub sigma: Option<f64>,
    pub signal_scale: Option<f64>,
    pub noise: Option<Noise>,
}

/// The JSON config document. Every field is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub mode: Option<Mode>,
    pub regime: Option<Regime>,
    pub instance: Option<InstanceOverrides>,
    pub gdt: Option<GdtConfig>,
    pub lasso: Option<LassoConfig>,
    pub replications: Option<usize>,
    pub base_seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub scales: Option<Vec<f64>>,
    pub timeout_secs: Option<f64>,
    pub emit_trace: Option<bool>,
    pub center: Option<bool>,
    pub burn_in: Option<usize>,
    pub target_error: Option<f64>,
    pub record_runtime: Option<bool>,
    pub mtrl: Option<MtrlSettings>,
}

impl ConfigFile {
    /// Parses a config document; errors carry line and column.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| GdtError::Parse {
            path: origin.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| GdtError::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// A fully resolved experiment configuration. This is what reports echo.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub regime: Regime,
    pub instance: InstanceParams,
    pub gdt: GdtConfig,
    pub lasso: LassoConfig,
    pub replications: usize,
    pub base_seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Worker threads for replications; not part of the echo since results
    /// do not depend on it.
    #[serde(skip)]
    pub threads: Option<usize>,
    pub scales: Vec<f64>,
    pub timeout_secs: f64,
    pub emit_trace: bool,
    pub center: bool,
    pub burn_in: usize,
    pub target_error: f64,
    pub record_runtime: bool,
    pub mtrl: MtrlSettings,
}

impl ExperimentConfig {
    /// Defaults for a mode, following the synthetic protocol.
    pub fn defaults(mode: Mode, regime: Regime) -> Self {
        let instance = match (mode, regime) {
            (Mode::Convergence, Regime::Noiseless) => InstanceParams {
                n: 100,
                p: 100,
                k: 50,
                r: 8,
                s1_star: 10,
                s2_star: 10,
                sigma: 0.0,
                signal_scale: 1.0,
                noise: Noise::Gaussian,
            },
            (Mode::Convergence, Regime::NoSparsity) => InstanceParams {
                n: 200,
                p: 50,
                k: 50,
                r: 8,
                s1_star: 50,
                s2_star: 50,
                sigma: 1.0,
                signal_scale: 1.0,
                noise: Noise::Gaussian,
            },
            (Mode::Bench, _) => InstanceParams {
                n: 50,
                p: 80,
                k: 50,
                r: 4,
                s1_star: 10,
                s2_star: 10,
                sigma: 1.0,
                signal_scale: 1.0,
                noise: Noise::Gaussian,
            },
            _ => InstanceParams {
                n: 50,
                p: 100,
                k: 50,
                r: 8,
                s1_star: 10,
                s2_star: 10,
                sigma: 1.0,
                signal_scale: 1.0,
                noise: Noise::Gaussian,
            },
        };
        let replications = match mode {
            Mode::Table => 50,
            _ => 1,
        };
        ExperimentConfig {
            mode,
            regime,
            instance,
            gdt: GdtConfig::default(),
            lasso: LassoConfig::default(),
            replications,
            base_seed: 0,
            output_dir: None,
            threads: None,
            scales: vec![1.0],
            timeout_secs: 7200.0,
            emit_trace: false,
            center: false,
            burn_in: 20,
            target_error: 1e-6,
            record_runtime: false,
            mtrl: MtrlSettings::default(),
        }
    }

    /// Applies a config document on top of the defaults of `mode`, then
    /// fills solver rank and budgets from the instance where unset.
    pub fn resolve(mode: Mode, file: ConfigFile) -> Result<Self> {
        if let Some(m) = file.mode {
            if m != mode {
                return Err(GdtError::InvalidConfig(format!(
                    "config mode {m:?} does not match the requested subcommand {mode:?}"
                )));
            }
        }
        let mut cfg = Self::defaults(mode, file.regime.unwrap_or_default());
        if let Some(o) = file.instance {
            let i = &mut cfg.instance;
            i.n = o.n.unwrap_or(i.n);
            i.p = o.p.unwrap_or(i.p);
            i.k = o.k.unwrap_or(i.k);
            i.r = o.r.unwrap_or(i.r);
            i.s1_star = o.s1_star.unwrap_or(i.s1_star);
            i.s2_star = o.s2_star.unwrap_or(i.s2_star);
            i.sigma = o.sigma.unwrap_or(i.sigma);
            i.signal_scale = o.signal_scale.unwrap_or(i.signal_scale);
            i.noise = o.noise.unwrap_or(i.noise);
        }
        cfg.gdt = file.gdt.unwrap_or(cfg.gdt);
        cfg.lasso = file.lasso.unwrap_or(cfg.lasso);
        cfg.replications = file.replications.unwrap_or(cfg.replications);
        cfg.base_seed = file.base_seed.unwrap_or(cfg.base_seed);
        cfg.output_dir = file.output_dir.or(cfg.output_dir);
        cfg.threads = file.threads.or(cfg.threads);
        cfg.scales = file.scales.unwrap_or(cfg.scales);
        cfg.timeout_secs = file.timeout_secs.unwrap_or(cfg.timeout_secs);
        cfg.emit_trace = file.emit_trace.unwrap_or(cfg.emit_trace);
        cfg.center = file.center.unwrap_or(cfg.center);
        cfg.burn_in = file.burn_in.unwrap_or(cfg.burn_in);
        cfg.target_error = file.target_error.unwrap_or(cfg.target_error);
        cfg.record_runtime = file.record_runtime.unwrap_or(cfg.record_runtime);
        cfg.mtrl = file.mtrl.unwrap_or(cfg.mtrl);
        cfg.fill_solver_defaults();
        Ok(cfg)
    }

    /// Rank and budgets left at 0 take the instance's true values.
    pub fn fill_solver_defaults(&mut self) {
        if self.mode == Mode::SynthSolve || self.mode == Mode::Mtrl {
            return;
        }
        if self.gdt.rank == 0 {
            self.gdt.rank = self.instance.r;
        }
        if self.gdt.s1 == 0 {
            self.gdt.s1 = self.instance.s1_star;
        }
        if self.gdt.s2 == 0 {
            self.gdt.s2 = self.instance.s2_star;
        }
    }

    /// Checks everything a run of this mode needs before any work starts.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GdtError::InvalidConfig(msg));
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        self.lasso.validate()?;
        match self.mode {
            Mode::Mtrl => {
                let m = &self.mtrl;
                if m.mdp_files.is_empty() && (m.tasks == 0 || m.n_states == 0 || m.n_actions == 0) {
                    return bad("mtrl needs tasks, n_states and n_actions of at least 1".into());
                }
                if m.outer_iters == 0 {
                    return bad("mtrl outer_iters must be at least 1".into());
                }
                if !(m.oracle_tol > 0.0) {
                    return bad(format!("mtrl oracle_tol must be positive, got {}", m.oracle_tol));
                }
                Ok(())
            }
            Mode::SynthSolve => self.gdt.validate(),
            _ => {
                self.instance.validate()?;
                self.gdt.validate()?;
                if self.gdt.rank > self.instance.p.min(self.instance.k) {
                    return bad(format!(
                        "rank {} exceeds min(p, k) = {}",
                        self.gdt.rank,
                        self.instance.p.min(self.instance.k)
                    ));
                }
                if self.mode == Mode::Bench {
                    if self.scales.is_empty() || self.scales.iter().any(|&z| !(z >= 1.0) || !z.is_finite()) {
                        return bad(format!("scales must be a nonempty list of values >= 1, got {:?}", self.scales));
                    }
                    if !(self.timeout_secs > 0.0) {
                        return bad(format!("timeout_secs must be positive, got {}", self.timeout_secs));
                    }
                }
                if !(self.target_error > 0.0) {
                    return bad(format!("target_error must be positive, got {}", self.target_error));
                }
                Ok(())
            }
        }
    }

    fn out_dir(&self) -> Result<Option<&Path>> {
        match &self.output_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| GdtError::io(dir, e))?;
                Ok(Some(dir.as_path()))
            }
            None => Ok(None),
        }
    }

    fn trace_enabled(&self) -> bool {
        self.gdt.max_iters <= TRACE_LIMIT || self.emit_trace
    }

    /// Runs `f` over replications on a worker pool; results come back in order.
    fn par_replications<T: Send>(&self, f: impl Fn(usize) -> T + Sync + Send) -> Result<Vec<T>> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(t) = self.threads {
            builder = builder.num_threads(t);
        }
        let pool = builder
            .build()
            .map_err(|e| GdtError::InvalidConfig(format!("cannot start worker pool: {e}")))?;
        Ok(pool.install(|| (0..self.replications).into_par_iter().map(&f).collect()))
    }
}

/// Seeds for replication `rep`: one for the instance, one for its test set.
pub fn replication_seeds(base_seed: u64, rep: usize) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(rep as u64);
    (rng.next_u64(), rng.next_u64())
}

fn json_text<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v:e}"))
}

/// Lasso initializer followed by GDT, both on `(x, y)`.
pub fn lasso_then_gdt(
    x: &Mat,
    y: &Mat,
    gdt: &GdtConfig,
    lasso: &LassoConfig,
    truth: Option<&Mat>,
) -> Result<(Mat, SolveReport)> {
    let fit = lasso_fit(x, y, lasso)?;
    let obj = MtlObjective::new(x.clone(), y.clone())?;
    let report = solve(&obj, &fit.theta, gdt, truth)?;
    Ok((fit.theta, report))
}

/// Per-replication result of a convergence run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceSummary {
    pub replication: usize,
    pub seed: u64,
    pub iterations: usize,
    pub initial_error: f64,
    pub final_error: f64,
    /// First iteration whose relative error is at most `target_error`.
    pub first_below_target: Option<usize>,
    /// Largest `e_{t+1}/e_t` after burn-in while `e_t` is above `1e-10`.
    pub max_ratio_after_burn_in: Option<f64>,
    pub final_objective: f64,
    /// Objective of the reference point (the reduced-rank optimum, or `Θ*`).
    pub reference_objective: f64,
    /// `‖UᵀU − VᵀV‖_F / ‖UᵀU‖_F` at the final iterate.
    pub balance: f64,
    /// Relative errors per iteration, starting at the initial point.
    #[serde(skip)]
    pub errors: Vec<f64>,
}

const RATIO_FLOOR: f64 = 1e-10;

/// Largest ratio of consecutive errors from `burn_in` on, ignoring the
/// stretch after the error has fallen below `1e-10`.
pub fn max_ratio_after(errors: &[f64], burn_in: usize) -> Option<f64> {
    errors
        .windows(2)
        .skip(burn_in)
        .take_while(|w| w[0] > RATIO_FLOOR)
        .map(|w| w[1] / w[0])
        .reduce(f64::max)
}

fn balance_of(report: &SolveReport) -> f64 {
    let (u, v) = (&report.factors.u, &report.factors.v);
    let utu = u.t_matmul(u);
    let denom = utu.frob_norm();
    if denom == 0.0 {
        0.0
    } else {
        utu.sub(&v.t_matmul(v)).frob_norm() / denom
    }
}

pub fn run_convergence(cfg: &ExperimentConfig) -> Result<Vec<ConvergenceSummary>> {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let results = cfg.par_replications(|rep| -> Result<(ConvergenceSummary, String)> {
        let (seed, _) = replication_seeds(cfg.base_seed, rep);
        let inst = generate(&cfg.instance, seed)?;
        let obj = MtlObjective::new(inst.x.clone(), inst.y.clone())?;
        let reference = match cfg.regime {
            Regime::Noiseless => inst.theta_star.clone(),
            Regime::NoSparsity => reduced_rank_regression(&inst.x, &inst.y, cfg.gdt.rank)?,
        };
        let (_, report) = lasso_then_gdt(&inst.x, &inst.y, &cfg.gdt, &cfg.lasso, Some(&reference))?;
        let scale = reference.frob_norm().max(f64::MIN_POSITIVE);
        let errors: Vec<f64> = report
            .trace
            .iter()
            .map(|t| t.theta_error.unwrap_or(f64::NAN) / scale)
            .collect();
        let mut csv = String::from("iter,est_error,objective,penalty,distance,eta\n");
        for (t, e) in report.trace.iter().zip(&errors) {
            let _ = writeln!(
                csv,
                "{},{e:e},{:e},{:e},{},{:e}",
                t.iteration,
                t.objective,
                t.penalty,
                fmt_opt(t.distance),
                t.eta
            );
        }
        let summary = ConvergenceSummary {
            replication: rep,
            seed,
            iterations: report.iterations_run,
            initial_error: errors[0],
            final_error: *errors.last().unwrap_or(&f64::NAN),
            first_below_target: errors.iter().position(|&e| e <= cfg.target_error),
            max_ratio_after_burn_in: max_ratio_after(&errors, cfg.burn_in),
            final_objective: obj.residual_value(&report.theta_hat),
            reference_objective: obj.residual_value(&reference),
            balance: balance_of(&report),
            errors,
        };
        Ok((summary, csv))
    })?;

    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    for (rep, res) in results.into_iter().enumerate() {
        match res {
            Ok((summary, csv)) => {
                if let Some(dir) = out {
                    if cfg.trace_enabled() {
                        write_text(dir.join(format!("trace_rep{rep}.csv")), &csv)?;
                    }
                }
                summaries.push(summary);
            }
            Err(e) => failures.push(Failure {
                replication: rep,
                error: e.to_string(),
            }),
        }
    }
    if let Some(dir) = out {
        #[derive(Serialize)]
        struct Report<'a> {
            config: &'a ExperimentConfig,
            replications: &'a [ConvergenceSummary],
            failures: &'a [Failure],
        }
        write_text(
            dir.join("report.json"),
            &json_text(&Report {
                config: cfg,
                replications: &summaries,
                failures: &failures,
            })?,
        )?;
    }
    if let Some(f) = failures.first() {
        return Err(GdtError::ReplicationsFailed {
            failed: failures.len(),
            total: cfg.replications,
            first: f.error.clone(),
        });
    }
    Ok(summaries)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub replication: usize,
    pub error: String,
}

/// Mean and standard deviation (sample, `n − 1`) of each metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub count: usize,
    pub est_error_mean: f64,
    pub est_error_sd: f64,
    pub pred_rmse_mean: f64,
    pub pred_rmse_sd: f64,
    pub row_support_mean: f64,
    pub row_support_sd: f64,
    pub col_support_mean: f64,
    pub col_support_sd: f64,
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

pub fn aggregate(metrics: &[Metrics]) -> Aggregate {
    let (est_error_mean, est_error_sd) = mean_sd(metrics.iter().map(|m| m.est_error));
    let (pred_rmse_mean, pred_rmse_sd) = mean_sd(metrics.iter().map(|m| m.pred_rmse));
    let (row_support_mean, row_support_sd) = mean_sd(metrics.iter().map(|m| m.row_support_size as f64));
    let (col_support_mean, col_support_sd) = mean_sd(metrics.iter().map(|m| m.col_support_size as f64));
    Aggregate {
        count: metrics.len(),
        est_error_mean,
        est_error_sd,
        pred_rmse_mean,
        pred_rmse_sd,
        row_support_mean,
        row_support_sd,
        col_support_mean,
        col_support_sd,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableSummary {
    pub gdt: Aggregate,
    pub lasso: Aggregate,
    pub failures: Vec<Failure>,
    #[serde(skip)]
    pub per_replication: Vec<(Metrics, Metrics)>,
}

/// Replicated generate / lasso / GDT / evaluate, with the lasso fit reported
/// as the baseline. Failed replications are recorded and skipped.
pub fn run_table(cfg: &ExperimentConfig) -> Result<TableSummary> {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let results = cfg.par_replications(|rep| -> Result<(Metrics, Metrics)> {
        let (seed, test_seed) = replication_seeds(cfg.base_seed, rep);
        let inst = generate(&cfg.instance, seed)?;
        let start = Instant::now();
        let (lasso_theta, report) = lasso_then_gdt(&inst.x, &inst.y, &cfg.gdt, &cfg.lasso, None)?;
        let elapsed = start.elapsed().as_secs_f64();
        let mut gdt = evaluate(&report.theta_hat, &inst, test_seed)?;
        let lasso = evaluate(&lasso_theta, &inst, test_seed)?;
        if cfg.record_runtime {
            gdt.runtime_seconds = elapsed;
        }
        log::info!("replication {rep}: GDT error {:.4}, {:.3}s", gdt.est_error, elapsed);
        Ok((gdt, lasso))
    })?;

    let mut per_replication = Vec::new();
    let mut failures = Vec::new();
    let mut csv = String::from("method,replication,est_error,pred_rmse,row_support,col_support");
    csv.push_str(if cfg.record_runtime { ",runtime_seconds\n" } else { "\n" });
    for (rep, res) in results.into_iter().enumerate() {
        match res {
            Ok((g, l)) => {
                for (name, m) in [("gdt", &g), ("lasso", &l)] {
                    let _ = write!(
                        csv,
                        "{name},{rep},{:e},{:e},{},{}",
                        m.est_error, m.pred_rmse, m.row_support_size, m.col_support_size
                    );
                    if cfg.record_runtime {
                        let _ = write!(csv, ",{:e}", m.runtime_seconds);
                    }
                    csv.push('\n');
                }
                per_replication.push((g, l));
            }
            Err(e) => {
                log::error!("replication {rep} failed: {e}");
                failures.push(Failure {
                    replication: rep,
                    error: e.to_string(),
                });
            }
        }
    }
    let gdt_metrics: Vec<Metrics> = per_replication.iter().map(|p| p.0).collect();
    let lasso_metrics: Vec<Metrics> = per_replication.iter().map(|p| p.1).collect();
    let summary = TableSummary {
        gdt: aggregate(&gdt_metrics),
        lasso: aggregate(&lasso_metrics),
        failures,
        per_replication,
    };
    if let Some(dir) = out {
        write_text(dir.join("metrics.csv"), &csv)?;
        let mut agg = String::from(
            "method,count,est_error_mean,est_error_sd,pred_rmse_mean,pred_rmse_sd,row_support_mean,row_support_sd,col_support_mean,col_support_sd\n",
        );
        for (name, a) in [("gdt", &summary.gdt), ("lasso", &summary.lasso)] {
            let _ = writeln!(
                agg,
                "{name},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                a.count,
                a.est_error_mean,
                a.est_error_sd,
                a.pred_rmse_mean,
                a.pred_rmse_sd,
                a.row_support_mean,
                a.row_support_sd,
                a.col_support_mean,
                a.col_support_sd
            );
        }
        write_text(dir.join("summary.csv"), &agg)?;
        #[derive(Serialize)]
        struct Report<'a> {
            config: &'a ExperimentConfig,
            summary: &'a TableSummary,
        }
        write_text(
            dir.join("report.json"),
            &json_text(&Report {
                config: cfg,
                summary: &summary,
            })?,
        )?;
    }
    Ok(summary)
}

/// Instance dimensions at scale `zeta`: `n, p, s₁*, s₂*` times `ζ`, `k, r` times `⌊√ζ⌋`.
pub fn scaled_params(base: &InstanceParams, zeta: f64) -> InstanceParams {
    let lin = |v: usize| ((v as f64) * zeta).round() as usize;
    let root = zeta.sqrt().floor() as usize;
    InstanceParams {
        n: lin(base.n),
        p: lin(base.p),
        k: base.k * root,
        r: base.r * root,
        s1_star: lin(base.s1_star),
        s2_star: lin(base.s2_star),
        ..base.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchStatus {
    Ok,
    Timeout,
    Skipped,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub scale: f64,
    pub params: InstanceParams,
    pub seconds: Option<f64>,
    pub status: BenchStatus,
    pub est_error: Option<f64>,
}

/// Times lasso + GDT at each scale. A timed-out solve is left to finish in
/// the background and larger scales are skipped.
pub fn run_bench(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let mut rows = Vec::new();
    let mut timed_out = false;
    for &zeta in &cfg.scales {
        let params = scaled_params(&cfg.instance, zeta);
        let mut gdt = cfg.gdt.clone();
        gdt.rank = params.r;
        gdt.s1 = params.s1_star;
        gdt.s2 = params.s2_star;
        if timed_out {
            rows.push(BenchRow {
                scale: zeta,
                params,
                seconds: None,
                status: BenchStatus::Skipped,
                est_error: None,
            });
            continue;
        }
        let inst = generate(&params, replication_seeds(cfg.base_seed, 0).0)?;
        let lasso = cfg.lasso.clone();
        let (tx, rx) = mpsc::channel();
        let worker_inst = inst.clone();
        std::thread::spawn(move || {
            let start = Instant::now();
            let res = lasso_then_gdt(&worker_inst.x, &worker_inst.y, &gdt, &lasso, None);
            let _ = tx.send((start.elapsed().as_secs_f64(), res));
        });
        let row = match rx.recv_timeout(Duration::from_secs_f64(cfg.timeout_secs)) {
            Ok((secs, Ok((_, report)))) => BenchRow {
                scale: zeta,
                params,
                seconds: Some(secs),
                status: BenchStatus::Ok,
                est_error: Some(crate::datagen::relative_error(&report.theta_hat, &inst.theta_star)),
            },
            Ok((secs, Err(e))) => {
                log::error!("scale {zeta}: {e}");
                BenchRow {
                    scale: zeta,
                    params,
                    seconds: Some(secs),
                    status: BenchStatus::Error,
                    est_error: None,
                }
            }
            Err(_) => {
                timed_out = true;
                BenchRow {
                    scale: zeta,
                    params,
                    seconds: None,
                    status: BenchStatus::Timeout,
                    est_error: None,
                }
            }
        };
        log::info!("scale {zeta}: {:?} {:?}", row.status, row.seconds);
        rows.push(row);
    }
    if let Some(dir) = out {
        let mut csv = String::from("scale,n,p,k,r,s1_star,s2_star,seconds,status,est_error\n");
        for row in &rows {
            let p = &row.params;
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{},{}",
                row.scale,
                p.n,
                p.p,
                p.k,
                p.r,
                p.s1_star,
                p.s2_star,
                fmt_opt(row.seconds),
                serde_json::to_value(row.status)?.as_str().unwrap_or(""),
                fmt_opt(row.est_error)
            );
        }
        write_text(dir.join("bench.csv"), &csv)?;
        #[derive(Serialize)]
        struct Manifest<'a> {
            config: &'a ExperimentConfig,
            dims: Vec<&'a InstanceParams>,
        }
        write_text(
            dir.join("manifest.json"),
            &json_text(&Manifest {
                config: cfg,
                dims: rows.iter().map(|r| &r.params).collect(),
            })?,
        )?;
    }
    if rows.iter().any(|r| r.status == BenchStatus::Error) {
        return Err(GdtError::ReplicationsFailed {
            failed: rows.iter().filter(|r| r.status == BenchStatus::Error).count(),
            total: rows.len(),
            first: "a benchmark solve failed".into(),
        });
    }
    Ok(rows)
}

/// Per-iteration entry of a CSV solve report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveTraceEntry {
    pub iteration: usize,
    pub objective: f64,
    pub penalty: f64,
    pub eta: f64,
    pub row_support: Vec<usize>,
    pub col_support: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveCsvReport {
    pub config: ExperimentConfig,
    pub x_path: PathBuf,
    pub y_path: PathBuf,
    pub n: usize,
    pub p: usize,
    pub k: usize,
    /// Column means removed from `Y` when centering is on.
    pub y_means: Option<Vec<f64>>,
    pub lasso_lambda: f64,
    pub iterations: usize,
    pub objective: f64,
    pub row_support: Vec<usize>,
    pub col_support: Vec<usize>,
    pub trace: Vec<SolveTraceEntry>,
}

/// Column-centers `y` in place and returns the removed means.
pub fn center_columns(y: &mut Mat) -> Vec<f64> {
    let n = y.rows() as f64;
    let means: Vec<f64> = (0..y.cols()).map(|j| y.column(j).iter().sum::<f64>() / n).collect();
    for i in 0..y.rows() {
        for (v, m) in y.row_mut(i).iter_mut().zip(&means) {
            *v -= m;
        }
    }
    means
}

/// Fits `(X, Y)` read from CSV files; writes `theta.csv` and `report.json`.
pub fn run_solve_csv(x_path: &Path, y_path: &Path, cfg: &ExperimentConfig) -> Result<(Mat, SolveCsvReport)> {
    cfg.validate()?;
    let x = read_matrix_csv(x_path)?;
    let mut y = read_matrix_csv(y_path)?;
    if x.rows() != y.rows() {
        return Err(GdtError::DimensionMismatch {
            context: "solve: rows of X and Y",
            expected: (x.rows(), y.cols()),
            got: y.shape(),
        });
    }
    if cfg.gdt.rank > x.cols().min(y.cols()) {
        return Err(GdtError::InvalidConfig(format!(
            "rank {} exceeds min(p, k) = {}",
            cfg.gdt.rank,
            x.cols().min(y.cols())
        )));
    }
    let y_means = cfg.center.then(|| center_columns(&mut y));
    let fit = lasso_fit(&x, &y, &cfg.lasso)?;
    let obj = MtlObjective::new(x.clone(), y.clone())?;
    let report = solve(&obj, &fit.theta, &cfg.gdt, None)?;
    let theta = report.theta_hat.clone();
    let trace = if cfg.trace_enabled() {
        report
            .trace
            .iter()
            .map(|t| SolveTraceEntry {
                iteration: t.iteration,
                objective: t.objective,
                penalty: t.penalty,
                eta: t.eta,
                row_support: t.row_support.clone(),
                col_support: t.col_support.clone(),
            })
            .collect()
    } else {
        Vec::new()
    };
    let out = SolveCsvReport {
        config: cfg.clone(),
        x_path: x_path.to_path_buf(),
        y_path: y_path.to_path_buf(),
        n: x.rows(),
        p: x.cols(),
        k: y.cols(),
        y_means,
        lasso_lambda: fit.lambda,
        iterations: report.iterations_run,
        objective: obj.value(&theta),
        row_support: theta.row_support(crate::datagen::SUPPORT_THRESHOLD),
        col_support: theta.col_support(crate::datagen::SUPPORT_THRESHOLD),
        trace,
    };
    if let Some(dir) = cfg.out_dir()? {
        write_matrix_csv(dir.join("theta.csv"), &theta)?;
        write_text(dir.join("report.json"), &json_text(&out)?)?;
    }
    Ok((theta, out))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MtrlSummary {
    pub tasks: usize,
    pub n_states: usize,
    pub n_actions: usize,
    /// Tasks whose greedy policy matches value iteration on every state.
    pub matching_tasks: usize,
    pub matching_states: usize,
    /// Largest `|Q_fqi − Q*|` over tasks and state-action pairs.
    pub max_q_error: f64,
    pub q_changes: Vec<f64>,
    #[serde(skip)]
    pub policies: Vec<Vec<usize>>,
    #[serde(skip)]
    pub oracle_policies: Vec<Vec<usize>>,
}

fn load_tasks(cfg: &ExperimentConfig) -> Result<(Vec<MdpSpec>, FeatureMap)> {
    let m = &cfg.mtrl;
    let mdps = if m.mdp_files.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.base_seed);
        (0..m.tasks)
            .map(|_| MdpSpec::random(m.n_states, m.n_actions, m.gamma, &mut rng))
            .collect()
    } else {
        m.mdp_files.iter().map(MdpSpec::load).collect::<Result<Vec<_>>>()?
    };
    let n_states = mdps[0].n_states;
    let fm = match &m.features {
        Some(path) => FeatureMap::new(read_matrix_csv(path)?),
        None => FeatureMap::one_hot(n_states),
    };
    Ok((mdps, fm))
}

/// Fitted Q-iteration with GDT over all tasks, compared against value iteration.
/// Unset GDT rank and budgets default to full (`min(p, k)`, `p`, `k`).
pub fn run_mtrl(cfg: &ExperimentConfig) -> Result<MtrlSummary> {
    cfg.validate()?;
    let (mdps, fm) = load_tasks(cfg)?;
    let n_actions = mdps[0].n_actions;
    let p = feature_matrix(&fm, n_actions).cols();
    let k = mdps.len();
    let mut gdt = cfg.gdt.clone();
    if gdt.rank == 0 {
        gdt.rank = p.min(k);
    }
    if gdt.s1 == 0 {
        gdt.s1 = p;
    }
    if gdt.s2 == 0 {
        gdt.s2 = k;
    }
    let fqi_cfg = FqiConfig {
        outer_iters: cfg.mtrl.outer_iters,
        mode: cfg.mtrl.mode,
        seed: cfg.base_seed,
        design_states: cfg.mtrl.design_states,
        gdt,
        lasso: cfg.lasso.clone(),
    };
    let result = fqi_gdt(&mdps, &fm, &fqi_cfg)?;
    let oracle: Vec<QTable> = mdps
        .iter()
        .map(|m| value_iteration(m, cfg.mtrl.oracle_tol))
        .collect::<Result<_>>()?;
    let oracle_policies: Vec<Vec<usize>> = oracle.iter().map(|q| q.greedy().remove(0)).collect();
    let mut oracle_q = Mat::zeros(result.q.values.rows(), k);
    for (task, q) in oracle.iter().enumerate() {
        oracle_q.set_column(task, &q.values.column(0));
    }
    let matching_states = result
        .policies
        .iter()
        .zip(&oracle_policies)
        .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x == y).count())
        .sum();
    let summary = MtrlSummary {
        tasks: k,
        n_states: mdps[0].n_states,
        n_actions,
        matching_tasks: result.policies.iter().zip(&oracle_policies).filter(|(a, b)| a == b).count(),
        matching_states,
        max_q_error: result.q.values.sub(&oracle_q).max_abs(),
        q_changes: result.q_changes.clone(),
        policies: result.policies.clone(),
        oracle_policies,
    };
    if let Some(dir) = cfg.out_dir()? {
        write_policies_csv(dir.join("policies.csv"), &summary.policies)?;
        write_policies_csv(dir.join("oracle_policies.csv"), &summary.oracle_policies)?;
        write_matrix_csv(dir.join("q.csv"), &result.q.values)?;
        write_matrix_csv(dir.join("theta.csv"), &result.theta)?;
        #[derive(Serialize)]
        struct Report<'a> {
            config: &'a ExperimentConfig,
            fqi: &'a FqiConfig,
            summary: &'a MtrlSummary,
        }
        write_text(
            dir.join("report.json"),
            &json_text(&Report {
                config: cfg,
                fqi: &fqi_cfg,
                summary: &summary,
            })?,
        )?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_overrides_apply_on_mode_defaults() {
        let text = r#"{"instance": {"n": 80}, "replications": 3, "gdt": {"max_iters": 7}}"#;
        let file = ConfigFile::parse(text, Path::new("c.json")).unwrap();
        let cfg = ExperimentConfig::resolve(Mode::Table, file).unwrap();
        assert_eq!(cfg.instance.n, 80);
        assert_eq!(cfg.instance.p, 100);
        assert_eq!(cfg.replications, 3);
        assert_eq!((cfg.gdt.rank, cfg.gdt.s1, cfg.gdt.s2, cfg.gdt.max_iters), (8, 10, 10, 7));
        cfg.validate().unwrap();
    }

    #[test]
    fn config_errors_have_locations() {
        let err = ConfigFile::parse("{\n  \"replications\": 2,\n  \"bogus\": 1\n}", Path::new("c.json")).unwrap_err();
        match err {
            GdtError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let file = ConfigFile::parse(r#"{"mode": "bench"}"#, Path::new("c.json")).unwrap();
        assert!(ExperimentConfig::resolve(Mode::Table, file).is_err());
    }

    #[test]
    fn validation_rejects_zero_replications() {
        let mut cfg = ExperimentConfig::defaults(Mode::Table, Regime::Noiseless);
        cfg.fill_solver_defaults();
        cfg.replications = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn scaling_rule() {
        let base = ExperimentConfig::defaults(Mode::Bench, Regime::Noiseless).instance;
        let p = scaled_params(&base, 5.0);
        assert_eq!((p.n, p.p, p.k, p.r, p.s1_star, p.s2_star), (250, 400, 100, 8, 50, 50));
        assert_eq!(scaled_params(&base, 1.0), base);
    }

    #[test]
    fn replication_seeds_differ() {
        let a = replication_seeds(3, 0);
        let b = replication_seeds(3, 1);
        assert_ne!(a, b);
        assert_ne!(a.0, a.1);
        assert_eq!(a, replication_seeds(3, 0));
    }

    #[test]
    fn ratio_window() {
        let e = [1.0, 0.5, 0.4, 0.2, 1e-11, 1e-11];
        assert_eq!(max_ratio_after(&e, 0), Some(0.8));
        assert_eq!(max_ratio_after(&e, 2), Some(0.5));
        assert_eq!(max_ratio_after(&e, 10), None);
    }

    #[test]
    fn centering_removes_means() {
        let mut y = Mat::from_rows(&[[1.0, 4.0], [3.0, 8.0]]).unwrap();
        assert_eq!(center_columns(&mut y), vec![2.0, 6.0]);
        assert_eq!(y, Mat::from_rows(&[[-1.0, -2.0], [1.0, 2.0]]).unwrap());
    }

    #[test]
    fn aggregate_statistics() {
        let m = |e| Metrics {
            est_error: e,
            pred_rmse: 1.0,
            row_support_size: 10,
            col_support_size: 10,
            runtime_seconds: 0.0,
        };
        let a = aggregate(&[m(1.0), m(3.0)]);
        assert_eq!(a.est_error_mean, 2.0);
        assert!((a.est_error_sd - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(a.row_support_sd, 0.0);
    }
}
