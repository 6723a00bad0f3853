use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gdt_core::datagen::generate;
use gdt_core::experiment::{
    run_bench, run_convergence, run_mtrl, run_solve_csv, run_table, ConfigFile, ExperimentConfig, Mode, Regime,
};
use gdt_core::GdtError;

/// Gradient descent with hard thresholding for low-rank, row/column sparse regression.
#[derive(Parser)]
#[command(name = "gdt", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for instance generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for replications.
    #[arg(long, global = true, env = "GDT_THREADS")]
    threads: Option<usize>,
    #[arg(long, global = true)]
    replications: Option<usize>,
    #[arg(long, global = true)]
    rank: Option<usize>,
    #[arg(long, global = true)]
    s1: Option<usize>,
    #[arg(long, global = true)]
    s2: Option<usize>,
    /// Fixed step size (disables backtracking).
    #[arg(long, global = true)]
    eta: Option<f64>,
    #[arg(long, global = true)]
    max_iters: Option<usize>,
    /// Lasso penalty for the initializer.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Write per-iteration traces even above 10000 iterations.
    #[arg(long, global = true)]
    emit_trace: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Noiseless,
    NoSparsity,
}

#[derive(Subcommand)]
enum Command {
    /// Per-iteration error traces in the noiseless or no-sparsity regime.
    Convergence {
        #[arg(long, value_enum)]
        regime: Option<RegimeArg>,
    },
    /// Replicated estimation/prediction metrics for GDT and the lasso baseline.
    Table {
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        signal_scale: Option<f64>,
    },
    /// Runtime as the problem size is scaled.
    Bench {
        /// Comma-separated scale factors.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
        #[arg(long)]
        timeout_secs: Option<f64>,
    },
    /// Fit Y ≈ XΘ from CSV files.
    Solve {
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        y: PathBuf,
        /// Subtract column means from Y before fitting.
        #[arg(long)]
        center: bool,
    },
    /// Multi-task fitted Q-iteration against value iteration.
    Mtrl {
        #[arg(long)]
        outer_iters: Option<usize>,
    },
    /// Write a synthetic instance (CSV matrices and manifest) to --out.
    Generate,
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig, GdtError> {
    let mode = match cli.command {
        Command::Convergence { .. } => Mode::Convergence,
        Command::Table { .. } | Command::Generate => Mode::Table,
        Command::Bench { .. } => Mode::Bench,
        Command::Solve { .. } => Mode::SynthSolve,
        Command::Mtrl { .. } => Mode::Mtrl,
    };
    let c = &cli.common;
    let mut file = match &c.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    if let Command::Convergence { regime: Some(r) } = cli.command {
        file.regime = Some(match r {
            RegimeArg::Noiseless => Regime::Noiseless,
            RegimeArg::NoSparsity => Regime::NoSparsity,
        });
    }
    let mut cfg = ExperimentConfig::resolve(mode, file)?;
    cfg.base_seed = c.seed.unwrap_or(cfg.base_seed);
    cfg.output_dir = c.out.clone().or(cfg.output_dir);
    cfg.threads = c.threads.or(cfg.threads);
    cfg.replications = c.replications.unwrap_or(cfg.replications);
    cfg.gdt.rank = c.rank.unwrap_or(cfg.gdt.rank);
    cfg.gdt.s1 = c.s1.unwrap_or(cfg.gdt.s1);
    cfg.gdt.s2 = c.s2.unwrap_or(cfg.gdt.s2);
    cfg.gdt.eta = c.eta.or(cfg.gdt.eta);
    cfg.gdt.max_iters = c.max_iters.unwrap_or(cfg.gdt.max_iters);
    cfg.lasso.lambda = c.lambda.or(cfg.lasso.lambda);
    cfg.emit_trace |= c.emit_trace;
    match &cli.command {
        Command::Table { sigma, signal_scale } => {
            cfg.instance.sigma = sigma.unwrap_or(cfg.instance.sigma);
            cfg.instance.signal_scale = signal_scale.unwrap_or(cfg.instance.signal_scale);
        }
        Command::Bench { scales, timeout_secs } => {
            cfg.scales = scales.clone().unwrap_or(cfg.scales);
            cfg.timeout_secs = timeout_secs.unwrap_or(cfg.timeout_secs);
        }
        Command::Solve { center, .. } => cfg.center |= center,
        Command::Mtrl { outer_iters } => {
            cfg.mtrl.outer_iters = outer_iters.unwrap_or(cfg.mtrl.outer_iters);
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<bool, GdtError> {
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::Convergence { .. } => {
            for s in run_convergence(&cfg)? {
                println!(
                    "replication {}: error {:.3e} -> {:.3e} in {} iterations, first <= {:e} at {:?}, max ratio after burn-in {:?}",
                    s.replication,
                    s.initial_error,
                    s.final_error,
                    s.iterations,
                    cfg.target_error,
                    s.first_below_target,
                    s.max_ratio_after_burn_in
                );
            }
            Ok(true)
        }
        Command::Table { .. } => {
            let t = run_table(&cfg)?;
            for (name, a) in [("gdt", &t.gdt), ("lasso", &t.lasso)] {
                println!(
                    "{name:>5}: est_error {:.4} ± {:.4}  pred_rmse {:.4} ± {:.4}  rows {:.2} ± {:.2}  ({} runs)",
                    a.est_error_mean,
                    a.est_error_sd,
                    a.pred_rmse_mean,
                    a.pred_rmse_sd,
                    a.row_support_mean,
                    a.row_support_sd,
                    a.count
                );
            }
            for f in &t.failures {
                eprintln!("replication {} failed: {}", f.replication, f.error);
            }
            Ok(t.failures.is_empty())
        }
        Command::Bench { .. } => {
            let rows = run_bench(&cfg)?;
            for r in &rows {
                println!(
                    "scale {}: n={} p={} k={} r={} s={} -> {:?} {:?}",
                    r.scale, r.params.n, r.params.p, r.params.k, r.params.r, r.params.s1_star, r.status, r.seconds
                );
            }
            Ok(true)
        }
        Command::Solve { x, y, .. } => {
            let (_, report) = run_solve_csv(x, y, &cfg)?;
            println!(
                "objective {:.6e} after {} iterations; {} nonzero rows, {} nonzero columns",
                report.objective,
                report.iterations,
                report.row_support.len(),
                report.col_support.len()
            );
            Ok(true)
        }
        Command::Mtrl { .. } => {
            let s = run_mtrl(&cfg)?;
            println!(
                "{}/{} tasks match value iteration ({}/{} states); max |Q - Q*| = {:.3e}",
                s.matching_tasks,
                s.tasks,
                s.matching_states,
                s.tasks * s.n_states,
                s.max_q_error
            );
            Ok(true)
        }
        Command::Generate => {
            let dir = cfg
                .output_dir
                .clone()
                .ok_or_else(|| GdtError::InvalidConfig("generate needs --out".into()))?;
            let seed = gdt_core::experiment::replication_seeds(cfg.base_seed, 0).0;
            generate(&cfg.instance, seed)?.save(&dir)?;
            println!("instance written to {}", dir.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
