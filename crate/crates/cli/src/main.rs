//! `riskrank`: the ranking pipeline as subcommands over a dataset directory.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "riskrank", version, about = "Profit-aware ranking of high-risk traders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat key=value config file; flags win over it.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Extra config overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a calibrated synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of traders.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        trades: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Load a public tabular dataset described by a JSON ingest schema.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CSV")]
        input: PathBuf,
        #[arg(long, value_name = "JSON")]
        schema: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Stratified train/valid/test split with train-fitted normalisation.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR", default_value = ".")]
        data: PathBuf,
    },
    /// Allocate ranking groups for every split.
    Group {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR", default_value = ".")]
        data: PathBuf,
        #[arg(long = "group-size", visible_alias = "size")]
        group_size: Option<usize>,
        #[arg(long)]
        test_group_size: Option<usize>,
        /// Partition every test cell instead of sampling one group per cell.
        #[arg(long)]
        exhaustive_test_groups: bool,
    },
    /// Pretrain the self-trader encoder on per-record classification.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR", default_value = ".")]
        data: PathBuf,
        /// Model directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Fine-tune the full model on the ranking loss.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR", default_value = ".")]
        data: PathBuf,
        /// Model directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Start from this checkpoint (e.g. a pretrained one).
        #[arg(long, value_name = "CKPT")]
        init: Option<PathBuf>,
        #[arg(long, value_name = "pa-bce|bce|w-bce|logsoftmax")]
        loss: Option<String>,
        /// Members kept per group; 0 keeps all.
        #[arg(long)]
        topk: Option<usize>,
    },
    /// Score the groups of one split.
    Rank {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR", default_value = ".")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
    },
    /// Ranking, classification and P&L report for the test groups.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR", default_value = ".")]
        data: PathBuf,
        #[arg(long, value_name = "DIR", conflicts_with = "scores")]
        model: Option<PathBuf>,
        /// Test scores from `rank`.
        #[arg(long, value_name = "CSV")]
        scores: Option<PathBuf>,
        /// Validation scores from `rank`, for the without-prior regime.
        #[arg(long, value_name = "CSV")]
        valid_scores: Option<PathBuf>,
        #[arg(long, conflicts_with = "without_prior")]
        with_prior: bool,
        #[arg(long)]
        without_prior: bool,
        #[arg(long)]
        prior: Option<f64>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Inject first-step scores as a feature and fit the second-step classifier.
    Twostep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR", default_value = ".")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Finite-difference check of the PA-BCE gradient through the model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
    },
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("usage error");
            eprintln!("error kind=usage msg={}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} msg={}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
