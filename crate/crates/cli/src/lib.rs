//! Command-line front end: configuration, checkpoints and experiment artifacts.

// `!(x > 0.0)` rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::Result;
use bridgeprompt::bridges::TrajectoryKind;
use bridgeprompt::toyworld::DegradationKind;
use bridgeprompt::VariantTag;
use clap::{Args, Parser, Subcommand};

pub use artifacts::VERSION;
pub use config::Config;

#[derive(Debug, Parser)]
#[command(name = "bridgeprompt", version = VERSION, about = "Prompt-only restoration on a frozen toy flow-matching backbone")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML config; unknown keys are rejected.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Run directory for all outputs.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Replace a non-empty run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain and freeze the backbone.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Optimize one prompt against a frozen backbone and add it to a bank.
    TrainPrompt {
        #[command(flatten)]
        run: RunArgs,
        /// Frozen backbone checkpoint from `pretrain`.
        #[arg(long)]
        backbone: PathBuf,
        /// Existing bank to extend; a new bank is started otherwise.
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Overrides `train.trajectory`.
        #[arg(long)]
        trajectory: Option<TrajectoryKind>,
        /// Overrides `train.degradation`.
        #[arg(long)]
        degradation: Option<DegradationKind>,
        /// Overrides `train.variant`.
        #[arg(long)]
        variant: Option<VariantTag>,
    },
    /// Restore generated test inputs or PGM files with stored prompts.
    Restore {
        #[command(flatten)]
        run: RunArgs,
        /// Frozen backbone checkpoint from `pretrain`.
        #[arg(long)]
        backbone: PathBuf,
        /// Prompt bank from `train-prompt`.
        #[arg(long)]
        bank: PathBuf,
        /// Overrides `train.trajectory`.
        #[arg(long)]
        trajectory: Option<TrajectoryKind>,
        /// Average velocities over the prompts for these kinds.
        #[arg(long, value_delimiter = ',')]
        mix: Vec<DegradationKind>,
        /// Input PGMs; a generated test set is used when empty.
        #[arg(long, num_args = 1..)]
        input: Vec<PathBuf>,
    },
    /// T0 sweep or three-way bridge comparison.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Frozen backbone checkpoint from `pretrain`.
        #[arg(long)]
        backbone: PathBuf,
        /// Train one EBR prompt per `experiment.t0_candidates` entry and rank them.
        #[arg(long, conflicts_with = "bridge_compare", required_unless_present = "bridge_compare")]
        t0_sweep: bool,
        /// Train and compare naive, DDBM and EBR prompts over the configured seeds.
        #[arg(long)]
        bridge_compare: bool,
    },
    /// Trajectory-mismatch curves for prompts trained on each trajectory.
    Diagnose {
        #[command(flatten)]
        run: RunArgs,
        /// Frozen backbone checkpoint from `pretrain`.
        #[arg(long)]
        backbone: PathBuf,
    },
    /// Print a checkpoint header.
    Inspect { path: PathBuf },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { run } => commands::pretrain(&run),
        Command::TrainPrompt {
            run,
            backbone,
            bank,
            trajectory,
            degradation,
            variant,
        } => commands::train_prompt(
            &run,
            &backbone,
            bank.as_deref(),
            commands::Overrides {
                trajectory,
                degradation,
                variant,
            },
        ),
        Command::Restore {
            run,
            backbone,
            bank,
            trajectory,
            mix,
            input,
        } => commands::restore(&run, &backbone, &bank, trajectory, &mix, &input),
        Command::Ablate {
            run,
            backbone,
            t0_sweep,
            ..
        } => {
            if t0_sweep {
                commands::t0_sweep(&run, &backbone)
            } else {
                commands::bridge_compare(&run, &backbone)
            }
        }
        Command::Diagnose { run, backbone } => commands::diagnose(&run, &backbone),
        Command::Inspect { path } => commands::inspect(&path),
    }
}
