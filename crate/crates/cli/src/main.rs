//! `paseg`: batch front end for the annotation pipeline.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error (clap uses 2 for bad flags on its own).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use paseg_core::CoreError;

mod commands;

#[derive(Parser)]
#[command(
    name = "paseg",
    version,
    about = "Synthetic multispectral photoacoustic data, training, and evaluation"
)]
struct Cli {
    /// Worker thread count. Falls back to the PASEG_THREADS
    /// environment variable, then to one thread per core.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a phantom config.
    Generate {
        /// Output directory for tensors, manifest, and resolved config.
        #[arg(long)]
        out: PathBuf,
        /// Key-value config file; omitted keys use defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config file's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Energy-correct a frame stack, pick the sharpest section, crop.
    Preprocess {
        /// PATC file holding a (repeats, channels, H, W) stack.
        #[arg(long)]
        stack: PathBuf,
        /// PATC file holding (repeats, channels) pulse energies.
        #[arg(long)]
        energies: PathBuf,
        /// Output PATC path for the (channels, H, W) result.
        #[arg(long)]
        out: PathBuf,
        /// Number of contiguous sections to compare by acutance.
        #[arg(long, default_value_t = 4)]
        sections: usize,
        /// Crop rectangle as top,left,height,width.
        #[arg(long)]
        crop: Option<String>,
    },
    /// Train one architecture on one input mode.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split and write a report.
    Evaluate {
        /// Dataset directory (manifest.txt + config_resolved.txt).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file written by `train` or `experiment`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for report.csv and summaries.
        #[arg(long)]
        out: PathBuf,
        /// Which split to score: train, val, test, or all.
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        split_args: SplitArgs,
    },
    /// Run a full multi-model comparison.
    Experiment(ExperimentArgs),
    /// Rebuild summary tables from an existing report.csv.
    Report {
        /// Previously written report.csv.
        #[arg(long)]
        report: PathBuf,
        /// Output directory for the summary tables.
        #[arg(long)]
        out: PathBuf,
    },
}

/// How the dataset is partitioned. Defaults give the reference
/// 138/6/36 split on the default 10-volunteer grid.
#[derive(Args, Clone, Copy)]
struct SplitArgs {
    /// Volunteers whose images form the test set.
    #[arg(long, default_value_t = 2)]
    test_volunteers: usize,
    /// Images held out of training for validation.
    #[arg(long, default_value_t = 6)]
    val_images: usize,
    /// Seed for the volunteer and validation draws.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (manifest.txt + config_resolved.txt).
    #[arg(long)]
    data: PathBuf,
    /// Architecture: unet or fcnn.
    #[arg(long)]
    arch: String,
    /// Input mode: pa, us, or paus.
    #[arg(long)]
    input: String,
    /// Output directory for checkpoint, logs, and resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Key-value config file; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    dice_weight: Option<f64>,
    /// Disable morphological augmentation (U-Net only).
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    split_args: SplitArgs,
}

#[derive(Args)]
struct ExperimentArgs {
    /// feasibility (all sites) or robustness (train limbs, test neck).
    #[arg(long)]
    kind: String,
    /// Dataset directory (manifest.txt + config_resolved.txt).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for reports, checkpoints, logs, and cases.
    #[arg(long)]
    out: PathBuf,
    /// Key-value config file; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; each combination trains from a sub-seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    unet_epochs: Option<usize>,
    #[arg(long)]
    unet_batch_size: Option<usize>,
    #[arg(long)]
    unet_batches_per_epoch: Option<usize>,
    #[arg(long)]
    unet_base_channels: Option<usize>,
    #[arg(long)]
    unet_lr: Option<f64>,
    #[arg(long)]
    fcnn_epochs: Option<usize>,
    #[arg(long)]
    fcnn_batch_size: Option<usize>,
    #[arg(long)]
    fcnn_batches_per_epoch: Option<usize>,
    #[arg(long)]
    fcnn_lr: Option<f64>,
    #[command(flatten)]
    split_args: SplitArgs,
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CoreError> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("PASEG_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .map(Some)
            .map_err(|_| CoreError::config(format!("PASEG_THREADS='{v}' is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), CoreError> {
    if let Some(n) = thread_count(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CoreError::config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Generate { out, config, seed } => commands::generate(&out, config.as_deref(), seed),
        Command::Preprocess {
            stack,
            energies,
            out,
            sections,
            crop,
        } => commands::preprocess(&stack, &energies, &out, sections, crop.as_deref()),
        Command::Train(args) => commands::train(&args),
        Command::Evaluate {
            data,
            checkpoint,
            out,
            split,
            split_args,
        } => commands::evaluate(&data, &checkpoint, &out, &split, split_args),
        Command::Experiment(args) => commands::experiment(&args),
        Command::Report { report, out } => commands::report(&report, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CoreError::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
