//! Command-line front end: every subcommand runs inside an experiment
//! directory and leaves a config snapshot plus a hashed manifest behind.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::error::{CliError, Result};
use crate::experiment::Experiment;

#[derive(Debug, Parser)]
#[command(
    name = "supforge",
    version,
    about = "Universal stereo perturbation experiments on toy networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct Common {
    /// Experiment directory; created if missing.
    #[arg(long, default_value = "experiment")]
    pub exp_dir: PathBuf,
    /// Seed for every random choice of the run.
    #[arg(long)]
    pub seed: u64,
    /// Settings file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set craft.epsilon=0.02`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train and validation splits.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a network and record its validation metrics.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "default")]
        net: String,
    },
    /// Craft a universal perturbation on the training split.
    Craft {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "default")]
        net: String,
        #[arg(long, default_value = "default")]
        sup: String,
    },
    /// SUP, noise and optional FGSM attacks over the budget grid.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "default")]
        net: String,
    },
    /// Clean metrics of a stored network.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "default")]
        net: String,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Disparity histograms and feature-correlation traces.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "default")]
        net: String,
        #[arg(long, default_value = "default")]
        sup: String,
    },
    /// Adversarial fine-tuning on stored perturbations.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "default")]
        net: String,
        /// Name of the fine-tuned network; defaults to `<net>-ft`.
        #[arg(long)]
        out: Option<String>,
    },
    /// Train the architecture variants and cross-evaluate their SUPs.
    Matrix {
        #[command(flatten)]
        common: Common,
    },
    /// Collect every metrics CSV into a summary.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Train { common, .. }
            | Command::Craft { common, .. }
            | Command::Attack { common, .. }
            | Command::Eval { common, .. }
            | Command::Analyze { common, .. }
            | Command::Finetune { common, .. }
            | Command::Matrix { common }
            | Command::Report { common } => common,
        }
    }

    /// Names the run's config snapshot and manifest.
    fn label(&self) -> String {
        match self {
            Command::GenData { .. } => "gen-data".into(),
            Command::Train { net, .. } => format!("train-{net}"),
            Command::Craft { sup, .. } => format!("craft-{sup}"),
            Command::Attack { net, .. } => format!("attack-{net}"),
            Command::Eval { net, split, .. } => format!("eval-{net}-{split}"),
            Command::Analyze { sup, .. } => format!("analyze-{sup}"),
            Command::Finetune { net, out, .. } => format!("finetune-{}", out.clone().unwrap_or(format!("{net}-ft"))),
            Command::Matrix { .. } => "matrix".into(),
            Command::Report { .. } => "report".into(),
        }
    }
}

fn valid_name(name: &str) -> Result<()> {
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
        return Err(CliError::Config(format!(
            "artifact name {name:?} must be non-empty [A-Za-z0-9._-]"
        )));
    }
    Ok(())
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let cmd = &cli.command;
    let common = cmd.common();
    let mut exp = Experiment::open(&common.exp_dir, &cmd.label())?;
    let mut cfg = match &common.config {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
            exp.note_read(path)?;
            let text =
                String::from_utf8(bytes).map_err(|_| CliError::Config(format!("{} is not UTF-8", path.display())))?;
            Config::parse(&text)?
        }
        None => Config::default(),
    };
    for o in &common.overrides {
        cfg.set(o)?;
    }
    let seed = common.seed;
    match cmd {
        Command::GenData { .. } => commands::gen_data(&mut exp, &cfg, seed)?,
        Command::Train { net, .. } => {
            valid_name(net)?;
            commands::train_net(&mut exp, &cfg, seed, net)?
        }
        Command::Craft { net, sup, .. } => {
            valid_name(sup)?;
            commands::craft(&mut exp, &cfg, seed, net, sup)?
        }
        Command::Attack { net, .. } => commands::attack(&mut exp, &cfg, seed, net)?,
        Command::Eval { net, split, .. } => commands::eval_net(&mut exp, &cfg, net, split)?,
        Command::Analyze { net, sup, .. } => commands::analyze(&mut exp, &cfg, net, sup)?,
        Command::Finetune { net, out, .. } => {
            let out = out.clone().unwrap_or(format!("{net}-ft"));
            valid_name(&out)?;
            commands::finetune(&mut exp, &cfg, seed, net, &out)?
        }
        Command::Matrix { .. } => commands::matrix(&mut exp, &cfg, seed)?,
        Command::Report { .. } => commands::report(&mut exp, &cfg, seed)?,
    }
    exp.finish(&cfg.snapshot())?;
    Ok(())
}
