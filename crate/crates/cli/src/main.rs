//! `spp-cascade`: dataset generation, training, evaluation and benchmarking
//! for the cascade network.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! failure (divergence, too many grid failures), 3 I/O error.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "spp-cascade",
    version,
    about = "Thin-film SPP dataset synthesis and cascade-network training"
)]
struct Cli {
    /// Flat `key = value` file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for initialization and data splitting.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for every output artifact (created if missing).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the (λ₀, t) grid and write the dataset CSV plus an exclusion log.
    GenData(GenDataArgs),
    /// Train on a dataset and write the model, metrics and split files.
    Train(TrainArgs),
    /// Predict with a trained model and write per-sample predictions.
    Eval(EvalArgs),
    /// Run sequential and parallel training with the same seed and compare.
    Bench(TrainArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Film thicknesses in nm (comma-separated or repeated).
    #[arg(long, value_delimiter = ',')]
    thickness: Vec<f64>,
    #[arg(long)]
    lambda_min: Option<f64>,
    #[arg(long)]
    lambda_max: Option<f64>,
    /// Number of wavelengths, endpoints included.
    #[arg(long)]
    n_lambda: Option<usize>,
    /// Film mode: antisymmetric (long-range) or symmetric.
    #[arg(long)]
    parity: Option<String>,
    #[arg(long)]
    eps_dielectric: Option<f64>,
    /// CSV `lambda_nm,eps_real,eps_imag`; replaces the Drude model.
    #[arg(long)]
    permittivity_table: Option<PathBuf>,
    /// Drude plasma frequency in cm⁻¹ (default: molybdenum).
    #[arg(long)]
    drude_wp_cm: Option<f64>,
    /// Drude collision rate in cm⁻¹ (default: molybdenum).
    #[arg(long)]
    drude_gamma_cm: Option<f64>,
    #[arg(long)]
    drude_eps_inf: Option<f64>,
    /// Dataset file name inside the output directory.
    #[arg(long)]
    output: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Dataset CSV in physical units.
    #[arg(long)]
    data: Option<PathBuf>,
    /// sequential or parallel.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Stop once an epoch's MSE reaches this value.
    #[arg(long)]
    mse_goal: Option<f64>,
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Initial weights are drawn from U[−s, s]/√fan_in.
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    queue_capacity: Option<usize>,
    /// Epochs that accept every sample while the region is calibrated.
    #[arg(long)]
    warmup_epochs: Option<usize>,
    /// Quantile of the warm-up (M, m) history used as thresholds.
    #[arg(long)]
    percentile: Option<f64>,
    /// Validation window Δτ target in samples.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    max_window: Option<usize>,
    /// IVa output compared by the validator.
    #[arg(long)]
    validated_component: Option<usize>,
    /// Abort when a worker waits this long.
    #[arg(long)]
    stall_timeout_s: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Predictions file name inside the output directory.
    #[arg(long)]
    output: Option<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = config::FileConfig::load(cli.config.as_deref())?;
    let shared = commands::Shared {
        seed: cli.seed,
        out_dir: cli.out_dir,
        file: &file,
    };
    match cli.command {
        Command::GenData(a) => commands::gen_data(&shared, a),
        Command::Train(a) => commands::train(&shared, a),
        Command::Eval(a) => commands::eval(&shared, a),
        Command::Bench(a) => commands::bench(&shared, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
