//! `shnn` command-line harness.
//!
//! Exit codes: 0 on success, 1 on usage, configuration or I/O errors, 2 on
//! numerical failure (non-finite values, aborted training, a failed
//! gradient check).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "shnn",
    version,
    about = "Learn Hamiltonians from noisy trajectories"
)]
pub struct Cli {
    /// JSON settings file; flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory receiving every file a subcommand writes.
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for batch and dataset parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a benchmark system and store clean and noisy trajectories.
    GenData(GenDataArgs),
    /// Fit a network Hamiltonian to a dataset.
    Train(TrainArgs),
    /// Compare a checkpoint against the true Hamiltonian on a grid.
    Eval(EvalArgs),
    /// Roll out a system or checkpoint and write the trajectory.
    Integrate(IntegrateArgs),
    /// Measure peak memory and time of adjoint vs backprop gradients.
    Profile(ProfileArgs),
    /// Check the symplecticity conditions of a partitioned RK tableau.
    CheckTableau(CheckTableauArgs),
    /// Compare adjoint, backprop and finite-difference gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SystemArgs {
    /// double_well, coupled_ho or henon_heiles.
    #[arg(long)]
    pub system: Option<String>,
    /// Coupling of coupled_ho.
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    /// Reduced sizes: 1024/256 trajectories of 320 steps.
    #[arg(long)]
    pub smoke: bool,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_steps: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Standard deviation of the Gaussian noise added to every coordinate.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Also export dataset.csv.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GradModeArg {
    Adjoint,
    Backprop,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GuessArg {
    Predictor,
    Observation,
    PreviousState,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (defaults to the output directory).
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Settings sized for the smoke dataset.
    #[arg(long)]
    pub smoke: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    #[arg(long)]
    pub tau: Option<usize>,
    /// Stored steps per training step.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub grad_mode: Option<GradModeArg>,
    #[arg(long, value_enum)]
    pub guess: Option<GuessArg>,
    #[arg(long)]
    pub fpi_tol: Option<f64>,
    #[arg(long)]
    pub fpi_iters: Option<usize>,
    /// Split windows into shooting segments of this many points.
    #[arg(long)]
    pub segment_len: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint header (defaults to <out-dir>/checkpoint.json).
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset whose manifest names the system.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub system: SystemArgs,
    /// Evaluate the true Hamiltonian instead of a checkpoint.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub grid_n: Option<usize>,
    /// Full base point; the grid overwrites its two slice coordinates.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub base: Option<Vec<f64>>,
    #[arg(long)]
    pub drift_steps: Option<usize>,
    #[arg(long)]
    pub drift_h: Option<f64>,
    /// Training metrics used for the runtime column of the report table.
    #[arg(long, value_name = "PATH")]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IntegrateArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    /// Integrate a trained checkpoint instead of the true system.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// implicit_midpoint, symplectic_euler, rk2, gauss2 or prk:<tableau>.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub y0: Option<Vec<f64>>,
    #[arg(long)]
    pub fpi_tol: Option<f64>,
    #[arg(long, value_enum)]
    pub guess: Option<GuessArg>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Dataset directory (defaults to the output directory).
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub steps: Option<Vec<usize>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub fpi_iters: Option<usize>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct TableauSource {
    /// Registry tableau.
    #[arg(long)]
    pub name: Option<String>,
    /// JSON tableau with a_q, b_q, c_q, a_p, b_p, c_p.
    #[arg(long, value_name = "PATH")]
    pub file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckTableauArgs {
    #[command(flatten)]
    pub source: TableauSource,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub tau: Option<usize>,
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Fail (exit 2) above this normwise relative error.
    #[arg(long)]
    pub tol: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", commands::describe(&e));
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
