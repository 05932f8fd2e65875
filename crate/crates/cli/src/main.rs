//! Command-line front end: synthetic cohorts, discretization, per-fold
//! training, evaluation, single-patient inference and fold reports.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

/// Worker threads for per-patient parallelism; unset means one per core.
pub const THREADS_ENV: &str = "SLOTSPE_THREADS";

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "slotspe", version, about = "Slot-based multimodal survival prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted motifs.
    Synth {
        /// Generator settings as JSON; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute quantile bin edges from event times and label every patient.
    Discretize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 4)]
        bins: usize,
    },
    /// Train one cross-validation fold.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Training settings as JSON; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on its validation fold and print metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fold: usize,
        /// Ignore genomic bags and impute them from histology.
        #[arg(long)]
        missing_genomics: bool,
    },
    /// Predict one patient and export assignment and gate tables.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        histology: PathBuf,
        #[arg(long)]
        genomic: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate every metrics.json under a runs directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60.0)]
        horizon: f64,
        #[arg(long, default_value_t = 1000)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(err: &slotspe::Error) -> u8 {
    use slotspe::Error as E;
    match err {
        e if e.is_numerical() => EXIT_DIVERGENCE,
        E::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw.trim().parse().map_err(|_| format!("{THREADS_ENV} must be a positive integer, got {raw:?}"))?;
    if n == 0 {
        return Err(format!("{THREADS_ENV} must be a positive integer, got 0"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
