//! `moerl` — synthetic environments, batch generation, bound evaluation,
//! mixture-weight optimization, critic and manager training, and experiment
//! orchestration, all seed-deterministic.

use clap::{Parser, Subcommand};
use std::path::PathBuf;

mod commands;

#[derive(Parser)]
#[command(name = "moerl", version, about = "Mixture-of-experts batch RL toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an environment JSON file.
    GenEnv {
        /// Generator kind: random | mood-chain.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 5)]
        n_states: usize,
        #[arg(long, default_value_t = 3)]
        n_actions: usize,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        /// Mood-chain slip probability.
        #[arg(long, default_value_t = 0.1)]
        slip: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out a behavior policy into a JSONL batch.
    GenBatch {
        #[arg(long)]
        env: PathBuf,
        /// Behavior policy: uniform | optimal | file:<path>.
        #[arg(long, default_value = "uniform")]
        policy: String,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Source tag written on every line.
        #[arg(long, default_value_t = 0)]
        source: usize,
        /// Generate expert-selection transitions instead (requires --experts).
        #[arg(long, default_value_t = false)]
        moe: bool,
        /// Expert policy list (JSON) for --moe.
        #[arg(long)]
        experts: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the gap bounds on seeded instances, emitting CSV rows
    /// (instance_id, variant, bound, true_diff, slack).
    EvalBounds {
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 2)]
        m: usize,
        #[arg(long, default_value_t = 5)]
        n_states: usize,
        #[arg(long, default_value_t = 3)]
        n_actions: usize,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the three-way difference-value report for the first
        /// instance as JSON.
        #[arg(long)]
        diff_out: Option<PathBuf>,
    },
    /// Solve the mixture-weight QP from a batch file.
    OptLambda {
        #[arg(long)]
        batch: PathBuf,
        #[arg(long)]
        env: PathBuf,
        /// Ensemble policy list (JSON); generated randomly when omitted.
        #[arg(long)]
        ensemble: Option<PathBuf>,
        /// Comma-separated convex weights over anchors.
        #[arg(long)]
        alpha: String,
        /// kkt | pg.
        #[arg(long, default_value = "kkt")]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a critic from a batch (or the exact hybrid fixed point with --env).
    TrainCritic {
        #[arg(long, default_value_t = 0.0)]
        mu: f64,
        #[arg(long)]
        batch: Option<PathBuf>,
        #[arg(long)]
        env: Option<PathBuf>,
        /// Behavior policy: uniform | file:<path>.
        #[arg(long, default_value = "uniform")]
        behavior: String,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a manager (dqn | cql | mbrl) on an expert-selection environment.
    TrainManager {
        #[arg(long)]
        method: String,
        #[arg(long)]
        env: PathBuf,
        /// Expert policy list (JSON); chain defaults when omitted.
        #[arg(long)]
        experts: Option<PathBuf>,
        /// Batch of expert-selection transitions (cql / mbrl); generated
        /// on the fly when omitted.
        #[arg(long)]
        batch: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        episodes: usize,
        #[arg(long, default_value_t = 5)]
        horizon: usize,
        #[arg(long, default_value_t = 5)]
        checkpoints: usize,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output: iter, return_estimate, bellman_residual, cql_gap.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full experiment config (strict JSON).
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for metrics/summary when the config gives
        /// relative paths.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Aggregate a metrics CSV into mean/std per (metric, iteration).
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            commands::exit_code(&e)
        }
    };
    std::process::exit(code);
}
