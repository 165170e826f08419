//! Experiment harness for the dae workbench: subcommands that rebuild
//! the estimator-variance figures, the off-policy bias table, the
//! verification battery, and the actor-critic comparison, all emitting
//! deterministic CSV plus simple SVG charts.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dae_core::actor_critic::{CriticMethod, TrainConfig};

pub mod csvfmt;
pub mod experiments;
pub mod svg;

use experiments::counterexample::{run_counterexample, CounterexampleArgs};
use experiments::figures::{default_sample_grid, run_fig3, run_fig4, FigureArgs};
use experiments::train::{run_train, TrainArgs};
use experiments::verify::{run_verify, VerifyArgs};
use experiments::OutDir;

/// Exit code for verification failures.
pub const EXIT_VERIFY_FAILED: i32 = 1;
/// Exit code for configuration errors.
pub const EXIT_CONFIG_ERROR: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "dae", version, about = "Tabular return-decomposition workbench")]
pub struct Cli {
    /// Output directory; defaults to $DAE_OUT, then ./out.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct FigureCli {
    /// Master seed; per-dataset seeds derive from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of random seeds to aggregate over.
    #[arg(long, default_value_t = 1000)]
    pub seeds: usize,
    /// Comma-separated trajectory counts (default: log grid 10..10000).
    #[arg(long, value_delimiter = ',')]
    pub samples: Option<Vec<usize>>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Estimator comparison on the deterministic branching toy.
    Fig3(FigureCli),
    /// Estimator comparison on the stochastic-transition toy.
    Fig4(FigureCli),
    /// Closed-form off-policy bias versus the population solver.
    Counterexample {
        /// Grid step for the behavior/target probabilities.
        #[arg(long, default_value_t = 0.1)]
        grid_step: f64,
    },
    /// Identity and minimizer verification over random instances.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Perturb the advantage tables by 1e-3 to confirm detection.
        #[arg(long, default_value_t = false)]
        inject_fault: bool,
    },
    /// Actor-critic comparison on the slippery gridworld.
    Train {
        /// Key-value config file applied before flag overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated backup methods.
        #[arg(long, value_delimiter = ',')]
        method: Option<Vec<String>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of training seeds per method.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 5)]
        width: usize,
        #[arg(long, default_value_t = 5)]
        height: usize,
        #[arg(long, default_value_t = 0.2)]
        slip: f64,
        /// Backup length override.
        #[arg(long)]
        n: Option<usize>,
        /// Total environment steps override.
        #[arg(long)]
        steps: Option<usize>,
        /// Write final agent checkpoints.
        #[arg(long, default_value_t = false)]
        checkpoints: bool,
    },
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(true) => 0,
        Ok(false) => EXIT_VERIFY_FAILED,
        Err(err) => {
            eprintln!("error: {err:#}");
            EXIT_CONFIG_ERROR
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<bool> {
    let out = OutDir::new(output_dir(cli.out))?;
    match cli.command {
        Command::Fig3(f) => {
            let args = figure_args(f);
            run_fig3(&args, &out)?;
            Ok(true)
        }
        Command::Fig4(f) => {
            let args = figure_args(f);
            run_fig4(&args, &out)?;
            Ok(true)
        }
        Command::Counterexample { grid_step } => {
            let outcome = run_counterexample(&CounterexampleArgs { grid_step }, &out)?;
            Ok(outcome.pass)
        }
        Command::Verify { seed, instances, inject_fault } => {
            let outcome = run_verify(&VerifyArgs { master_seed: seed, instances, inject_fault }, &out)?;
            Ok(outcome.pass)
        }
        Command::Train {
            config,
            method,
            seed,
            seeds,
            width,
            height,
            slip,
            n,
            steps,
            checkpoints,
        } => {
            let mut base = TrainConfig::new(CriticMethod::OffpolicyDae);
            if let Some(path) = config {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| anyhow::anyhow!("reading config {}: {e}", path.display()))?;
                base.apply_config_text(&text)?;
            }
            if let Some(n) = n {
                base.backup_length = n;
            }
            if let Some(steps) = steps {
                base.total_steps = steps;
            }
            let methods: Vec<CriticMethod> = match method {
                Some(names) => names.iter().map(|s| s.parse()).collect::<dae_core::Result<_>>()?,
                None => CriticMethod::ALL.to_vec(),
            };
            base.validate()?;
            let args = TrainArgs {
                methods,
                master_seed: seed,
                num_seeds: seeds,
                width,
                height,
                slip,
                base_config: base,
                save_checkpoints: checkpoints,
            };
            run_train(&args, &out)?;
            Ok(true)
        }
    }
}

fn figure_args(f: FigureCli) -> FigureArgs {
    FigureArgs {
        master_seed: f.seed,
        num_seeds: f.seeds,
        samples: f.samples.unwrap_or_else(default_sample_grid),
    }
}

fn output_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("DAE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}
