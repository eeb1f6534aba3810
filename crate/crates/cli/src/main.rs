//! `enformer`: split, train, eval, predict and visualize from one config file.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use enformer::{Error, Result};

use crate::config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "enformer",
    version,
    about = "Polyp segmentation: training, evaluation and inspection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the split, training and initialization seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs --config <file>".into()))?;
        RunConfig::load(
            path,
            &Overrides {
                seed: self.seed,
                out: self.out.clone(),
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the seeded train/validation split manifest.
    Split {
        #[command(flatten)]
        common: Common,
    },
    /// Train on the split, writing best/last checkpoints and the loss history.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Resume even if the checkpoint was written under a different configuration.
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Score a checkpoint on every test set present; `--checkpoint oracle` scores the
    /// ground truth itself.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path; defaults to `<out_dir>/best.enfw`.
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Write a 16-bit probability map and a binary mask for an image or a directory.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mask threshold; defaults to `eval.threshold`, 0.5 without a config.
        #[arg(long)]
        threshold: Option<f64>,
        /// Image file or directory of images.
        input: PathBuf,
    },
    /// Draw feature-summary and Grad-CAM panels.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated columns; defaults to `eval.panel_columns`.
        #[arg(long)]
        columns: Option<String>,
        /// Test set to draw from when no images are given.
        #[arg(long)]
        dataset: Option<String>,
        /// Images to draw; masks are looked up in a sibling `masks` directory.
        images: Vec<PathBuf>,
    },
    /// Write procedural image/mask pairs in the standard directory layout.
    Synth {
        /// Destination; receives `TrainDataset/` and `TestDataset/`.
        #[arg(long)]
        out: PathBuf,
        /// Pairs per training set.
        #[arg(long, default_value_t = 16)]
        train: usize,
        /// Pairs per test set.
        #[arg(long, default_value_t = 4)]
        test: usize,
        /// Side length of each image.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Exit status per error category; 2 is left to argument parsing errors.
fn exit_code(category: &str) -> u8 {
    match category {
        "config" => 3,
        "data" => 4,
        "model" => 5,
        "checkpoint" => 6,
        "io" => 7,
        "numeric" => 8,
        "shape" => 9,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let command_line = std::env::args().collect::<Vec<_>>().join(" ");
    match run(cli.command, &command_line) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.category(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(exit_code(e.category()))
        }
    }
}

fn run(command: Command, command_line: &str) -> Result<()> {
    match command {
        Command::Split { common } => commands::split(&common.load()?, command_line),
        Command::Train {
            common,
            checkpoint,
            allow_config_mismatch,
        } => commands::train(
            &common.load()?,
            checkpoint.as_deref(),
            allow_config_mismatch,
            command_line,
        ),
        Command::Eval { common, checkpoint } => commands::eval(&common.load()?, checkpoint.as_deref(), command_line),
        Command::Predict {
            common,
            checkpoint,
            threshold,
            input,
        } => {
            let cfg = match &common.config {
                Some(_) => Some(common.load()?),
                None => None,
            };
            commands::predict(cfg.as_ref(), &checkpoint, threshold, &input, common.out.as_deref())
        }
        Command::Visualize {
            common,
            checkpoint,
            columns,
            dataset,
            images,
        } => commands::visualize(
            &common.load()?,
            &checkpoint,
            columns.as_deref(),
            dataset.as_deref(),
            &images,
            command_line,
        ),
        Command::Synth {
            out,
            train,
            test,
            size,
            seed,
        } => commands::synth(&out, train, test, size, seed),
    }
}
