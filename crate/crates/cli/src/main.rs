//! `mtmgc`: ingest or synthesize demand, build zone graphs, train the
//! graph-convolutional variants and report test metrics.

mod commands;
mod config;
mod hashing;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtmgc_core::model::Variant;

use crate::commands::{Layout, SplitChoice};
use crate::config::Config;

#[derive(Parser)]
#[command(name = "mtmgc", version, about = "Multi-modal demand prediction with multi-graph convolutional networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` and `train.seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Working directory holding data/, graphs/, checkpoints/ and report/
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Aggregate trip records into the zone x hour x mode tensor
    Ingest(Common),
    /// Generate correlated multi-mode demand and a zone table
    Synth(Common),
    /// Build and store the neighborhood, distance, functionality and mobility graphs
    BuildGraphs(Common),
    /// Train one network variant and write a checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        /// Checkpoint directory (default: <out>/checkpoints/<VARIANT>)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score baselines and checkpoints on the test split
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoints to score (default: every one under <out>/checkpoints)
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Write a checkpoint's predictions for one split
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitChoice,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::ALL
        .into_iter()
        .find(|v| v.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("expected one of MGC, RCT, MLR, MIX, got {s:?}"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common = match &cli.command {
        Command::Ingest(c) | Command::Synth(c) | Command::BuildGraphs(c) => c,
        Command::Train { common, .. } | Command::Evaluate { common, .. } | Command::Predict { common, .. } => common,
    };
    let cfg = Config::load(common.config.as_deref())?.with_seed(common.seed);
    let layout = Layout::new(&common.out);
    match cli.command {
        Command::Ingest(_) => commands::ingest(&cfg, &layout),
        Command::Synth(_) => commands::synth(&cfg, &layout),
        Command::BuildGraphs(_) => commands::build_graphs(&cfg, &layout),
        Command::Train { variant, checkpoint, .. } => commands::train(&cfg, &layout, variant, checkpoint),
        Command::Evaluate { checkpoint, .. } => commands::evaluate(&cfg, &layout, checkpoint),
        Command::Predict { checkpoint, split, .. } => commands::predict(&cfg, &layout, &checkpoint, split),
    }
}

/// The context chain, skipping causes already spelled out by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

/// 2 for numeric failures, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<mtmgc_core::Error>())
        .any(mtmgc_core::Error::is_numeric);
    if numeric {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
