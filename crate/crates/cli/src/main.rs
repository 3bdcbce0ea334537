//! `orsched`: simulate, train, evaluate, compare, preschedule, oracle,
//! theorycheck and gantt workflows over one config.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use orsched::domain::ConfigError;

/// Overrides the default output directory when `--out` is absent.
pub const OUT_ENV: &str = "ORSCHED_OUT";

#[derive(Debug, Parser)]
#[command(name = "orsched", version, about = "Intraday operating-room scheduling laboratory")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config file; the built-in six-room day when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed; per-day seeds are derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory [env: ORSCHED_OUT; default: orsched-out/<command>].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel episodes; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one policy over a seed list and write per-day metrics.
    Simulate(SimulateArgs),
    /// Train the shared actor-critic and write the best checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint greedily over a seed list.
    Evaluate(EvaluateArgs),
    /// Run several policies on the same days and write stratified tables.
    Compare(CompareArgs),
    /// Build the pre-day elective plan.
    Preschedule,
    /// Solve realized days offline and report each policy's regret.
    Oracle(OracleArgs),
    /// Run the weak-coupling, regret-bound and gap-construction checks.
    Theorycheck(TheoryArgs),
    /// Draw one day as an SVG chart and a text timeline.
    Gantt(GanttArgs),
}

#[derive(Debug, Clone, Args)]
pub struct PolicyArgs {
    /// Policy: spt_u, lpt_u, ne_lpt, e_lpt, ne_spt, pre_s or marl.
    #[arg(long, default_value = "ne_lpt")]
    pub policy: String,
    /// Checkpoint for the marl policy.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long, default_value_t = 100)]
    pub days: usize,
    /// Also write every episode record under records/.
    #[arg(long)]
    pub records: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScalarKind {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training iterations; the config value when absent.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Day-episodes per iteration; the config value when absent.
    #[arg(long)]
    pub trajectories: Option<usize>,
    #[arg(long, value_enum, default_value_t = ScalarKind::F32)]
    pub scalar: ScalarKind,
    /// Print a progress line every this many iterations; 0 is silent.
    #[arg(long, default_value_t = 10)]
    pub progress: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint written by `orsched train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub days: usize,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Comma-separated policies; `heuristics` expands to all six and `all`
    /// adds marl.
    #[arg(long, default_value = "heuristics", value_delimiter = ',')]
    pub policy: Vec<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub days: usize,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Episode record to re-solve; otherwise `--days` days of `--policy`.
    #[arg(long)]
    pub episode: Option<PathBuf>,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long, default_value_t = 10)]
    pub days: usize,
    /// Local-search iterations when the day is too large for the exact
    /// solver.
    #[arg(long, default_value_t = 100_000)]
    pub budget: u64,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    /// Generated instances for the weak-coupling check.
    #[arg(long, default_value_t = 1000)]
    pub instances: usize,
    /// Instances for the regret-bound check.
    #[arg(long, default_value_t = 200)]
    pub bound_instances: usize,
}

#[derive(Debug, Args)]
pub struct GanttArgs {
    /// Episode record to draw; otherwise one day of `--policy` at `--seed`.
    #[arg(long)]
    pub episode: Option<PathBuf>,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

/// Bad flag values discovered after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        EXIT_USAGE
    } else if err.downcast_ref::<ConfigError>().is_some() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
