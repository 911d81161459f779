use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "povar", version, about = "Initialization-free bundle adjustment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one or more BAL problems from a random start.
    Solve(SolveArgs),
    /// Build performance profiles from trace CSV files.
    Profile(ProfileArgs),
    /// Write a synthetic BAL problem with ground truth.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage1Solver {
    Povar,
    Poba,
    Iterative,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage2Solver {
    Ripoba,
    Ripcg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelection {
    Stage1,
    Stage2,
    Full,
    Metric,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("stages").args(["stage1", "stage2", "full", "metric"])))]
pub struct SolveArgs {
    /// BAL files (plain or gzip).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,

    /// Run Stage 1 only.
    #[arg(long)]
    pub stage1: bool,
    /// Run Stage 2 only, from the normalized random start.
    #[arg(long)]
    pub stage2: bool,
    /// Stage 1 then Stage 2 (default).
    #[arg(long)]
    pub full: bool,
    /// Both stages followed by the metric upgrade.
    #[arg(long)]
    pub metric: bool,

    /// Stage-1 solver.
    #[arg(long, value_enum, default_value = "povar")]
    pub solver: Stage1Solver,
    /// Stage-2 solver.
    #[arg(long, value_enum, default_value = "ripoba")]
    pub stage2_solver: Stage2Solver,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// pOSE weight of the affine term.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Initial Levenberg–Marquardt damping.
    #[arg(long)]
    pub lambda0: Option<f64>,
    /// Outer iterations per stage.
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Highest power-series order.
    #[arg(long)]
    pub power_order: Option<usize>,
    /// Relative size below which a series term ends the expansion.
    #[arg(long)]
    pub power_threshold: Option<f64>,
    /// PCG iteration cap.
    #[arg(long)]
    pub inner_iterations: Option<usize>,
    /// PCG relative residual tolerance.
    #[arg(long)]
    pub pcg_tolerance: Option<f64>,

    /// Output directory; one subdirectory per input.
    #[arg(long, short, env = "POVAR_OUTPUT_DIR", default_value = "povar-output")]
    pub output: PathBuf,
    /// Worker threads; problems are solved concurrently, one per worker.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

impl SolveArgs {
    pub fn selection(&self) -> StageSelection {
        if self.stage1 {
            StageSelection::Stage1
        } else if self.stage2 {
            StageSelection::Stage2
        } else if self.metric {
            StageSelection::Metric
        } else {
            StageSelection::Full
        }
    }
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Trace CSV files.
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
    /// Accuracy tolerances.
    #[arg(long, default_values_t = [0.01])]
    pub tau: Vec<f64>,
    /// Keep only traces of this stage label (`stage1`, `stage2`, `pipeline`).
    #[arg(long)]
    pub stage: Option<String>,
    /// Output CSV; stdout when absent.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub cameras: usize,
    #[arg(long, default_value_t = 100)]
    pub landmarks: usize,
    /// Pixel noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output BAL file.
    #[arg(long, short)]
    pub output: PathBuf,
}
