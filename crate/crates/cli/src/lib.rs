//! `cpgc`: drives the whole attack pipeline — synthetic corpus generation,
//! victim-zoo pre-training, universal-perturbation training, transfer
//! evaluation, and report aggregation — against outputs rooted in one run
//! directory. Exit status is zero exactly when the command's declared
//! postconditions hold.

pub mod commands;
pub mod config;
pub mod report;

use clap::{Args, Parser, Subcommand};
use config::{Method, RunConfig};
use cpgc_core::corpus::Domain;
use cpgc_core::error::Result;
use cpgc_core::eval::defense::DefenseKind;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "cpgc",
    version,
    about = "Universal adversarial perturbations against image-text dual encoders"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// Config file of `key = value` lines; every key is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides run.seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replaces outputs that already exist.
    #[arg(long)]
    pub force: bool,
    /// Run directory root; falls back to $CPGC_RUN_ROOT, then ./runs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the paired image-caption corpus for each configured domain.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Pre-train every zoo member and enforce the held-out recall floor.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        /// Corpus domain to pre-train on.
        #[arg(long, default_value = "A")]
        domain: String,
    },
    /// Train a universal perturbation (method chosen by --variant).
    TrainUap {
        #[command(flatten)]
        common: CommonArgs,
        /// full, no_cl, no_dis, random_positives, no_cross_attention, gap,
        /// or random.
        #[arg(long, default_value = "full")]
        variant: String,
        /// Corpus domain to train on.
        #[arg(long, default_value = "A")]
        domain: String,
    },
    /// Evaluate a stored artifact across the zoo; writes CSV, table, charts.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Artifact directory name under artifacts/ (a method tag, usually).
        #[arg(long, default_value = "full")]
        variant: String,
        /// Corpus domain to evaluate on.
        #[arg(long, default_value = "A")]
        domain: String,
        /// Input preprocessing applied to every image during evaluation.
        #[arg(long)]
        defense: Option<String>,
    },
    /// Merge evaluation CSVs into one comparison document.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        /// Explicit CSV paths; defaults to every *.csv in reports/.
        paths: Vec<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::GenData { common }
            | Command::Pretrain { common, .. }
            | Command::TrainUap { common, .. }
            | Command::Eval { common, .. }
            | Command::Report { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::TrainUap { .. } => "train-uap",
            Command::Eval { .. } => "eval",
            Command::Report { .. } => "report",
        }
    }
}

/// Parses flags into a resolved config and dispatches one command.
pub fn execute(cli: Cli) -> Result<()> {
    let common = cli.command.common();
    let mut cfg = RunConfig::load(
        common.config.as_deref(),
        common.seed,
        common.out.as_deref(),
    )?;
    cfg.command = cli.command.name().into();
    let force = common.force;
    match &cli.command {
        Command::GenData { .. } => {
            commands::cmd_gen_data(&cfg, force)?;
        }
        Command::Pretrain { domain, .. } => {
            commands::cmd_pretrain(&cfg, Domain::parse(domain)?, force)?;
        }
        Command::TrainUap { variant, domain, .. } => {
            commands::cmd_train_uap(&cfg, Method::parse(variant)?, Domain::parse(domain)?, force)?;
        }
        Command::Eval { variant, domain, defense, .. } => {
            let defense = defense.as_deref().map(DefenseKind::parse).transpose()?;
            commands::cmd_eval(&cfg, variant, Domain::parse(domain)?, defense, force)?;
        }
        Command::Report { paths, .. } => {
            commands::cmd_report(&cfg, paths, force)?;
        }
    }
    Ok(())
}

/// Binary entry point: parse, run, map errors to a nonzero exit.
pub fn run() -> Result<()> {
    execute(Cli::parse())
}
