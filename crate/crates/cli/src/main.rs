//! `aglp` command-line driver.
//!
//! Exit codes: 0 on success, 2 for configuration or input problems found
//! before training starts, 3 when a run aborts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aglp_core::Error;
use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "aglp", version, about = "Semi-supervised domain adaptation on synthetic shift data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML experiment file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for both data generation and training.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainOverrides {
    /// Dataset CSV to train on instead of generating one per seed.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Seeded runs per configuration.
    #[arg(long)]
    pub repeat: Option<usize>,
    /// Save the training state every N steps (0 disables).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        shift: Option<f64>,
        #[arg(long)]
        rotation: Option<f64>,
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Train one configuration for `repeat` seeds.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Ablation preset applied on top of the config file.
        #[arg(long)]
        preset: Option<String>,
        /// Continue from a saved training state (single run only).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps, leaving a checkpoint behind.
        #[arg(long)]
        halt_at: Option<usize>,
    },
    /// Train every preset of the sweep table for `repeat` seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Comma-separated presets, e.g. `s+t,saa,ca,full`.
        #[arg(long)]
        presets: Option<String>,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Accuracy, per-class accuracy and confusion matrix of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "target_test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        chunk: usize,
    },
    /// Fused features of a split, one row per example.
    DumpFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "target_test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        chunk: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config() || matches!(e, Error::EmptyClasses(_)) {
        2
    } else {
        3
    }
}

pub fn ensure_dir(path: &Path) -> aglp_core::Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", path.display())))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { common, shift, rotation, shots } => commands::generate(&common, shift, rotation, shots),
        Command::Train { common, overrides, preset, resume, halt_at } => {
            commands::train(&common, &overrides, preset.as_deref(), resume.as_deref(), halt_at)
        }
        Command::Sweep { common, overrides, presets, jobs } => commands::sweep(&common, &overrides, presets.as_deref(), jobs),
        Command::Evaluate { checkpoint, dataset, split, out, chunk } => {
            commands::evaluate(&checkpoint, &dataset, &split, out.as_deref(), chunk)
        }
        Command::DumpFeatures { checkpoint, dataset, split, out, chunk } => {
            commands::dump_features(&checkpoint, &dataset, &split, &out, chunk)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("aglp: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
