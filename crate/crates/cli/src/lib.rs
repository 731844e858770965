//! Command-line driver for the advlab experiments.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{Overrides, RunConfig};
pub use manifest::RunManifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] advlab::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Parser)]
#[command(
    name = "advlab",
    version,
    about = "Train, attack and defend an MNIST CNN"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train the baseline classifier on the 50,000-image split
    Train,
    /// FGSM accuracy sweep over the epsilon grid
    AttackFgsm,
    /// Train and evaluate universal adversarial patches
    AttackPatch,
    /// Defensive distillation: teacher, soft labels, student, sweep
    Distill,
    /// Summarize the reports found in the output directory
    Report,
}

/// Runs one subcommand; returns the manifest path.
pub fn run(command: Command, flags: &Overrides) -> Result<PathBuf, CliError> {
    let cfg = RunConfig::resolve(flags)?;
    match command {
        Command::Train => commands::cmd_train(&cfg),
        Command::AttackFgsm => commands::cmd_attack_fgsm(&cfg),
        Command::AttackPatch => commands::cmd_attack_patch(&cfg),
        Command::Distill => commands::cmd_distill(&cfg),
        Command::Report => commands::cmd_report(&cfg),
    }
}
