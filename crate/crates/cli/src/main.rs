use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use zsldg::evalharness::Protocol;
use zsldg_cli::commands;

/// Zero-shot domain generalization: data generation, training, evaluation
/// and the M1/M2/M3 ablation on a synthetic multi-domain benchmark.
#[derive(Parser)]
#[command(name = "zsldg", version)]
struct Cli {
    /// Overrides both bench.seed and train.seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark as a ZFV file.
    GenData {
        /// key = value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output ZFV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on the dataset's seen classes and seen domains.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// ZFV dataset; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for metrics.csv, checkpoints and the config copy.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or train and evaluate every fold of a protocol.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trained checkpoint, scored on the dataset's own split.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// rotation, ls or dg; overrides the config.
        #[arg(long)]
        protocol: Option<Protocol>,
        /// Directory for the report tables and summary.
        #[arg(long)]
        out: PathBuf,
        /// Concurrent training runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the M1/M2/M3 ladder over rotation folds and seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of training seeds, counting up from train.seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Concurrent training runs; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare every loss gradient against finite differences.
    Gradcheck {
        /// Random points per loss.
        #[arg(long, default_value_t = 20)]
        points: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<String> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData { config, out } => commands::gen_data(config.as_deref(), &out, seed),
        Command::Train { config, data, out, resume } => {
            commands::train(config.as_deref(), data.as_deref(), &out, resume.as_deref(), seed)
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            protocol,
            out,
            jobs,
        } => commands::eval(config.as_deref(), checkpoint.as_deref(), data.as_deref(), protocol, &out, jobs, seed),
        Command::Ablate {
            config,
            data,
            seeds,
            jobs,
            out,
        } => commands::ablate_cmd(config.as_deref(), data.as_deref(), seeds, jobs, &out, seed),
        Command::Gradcheck { points } => commands::gradcheck(seed.unwrap_or(0), points),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
