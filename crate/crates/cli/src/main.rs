use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use medseq_cli::commands;
use medseq_cli::config;
use medseq_core::train::GroupBy;

/// Personalized medication-status prediction experiments on multimodal
/// smartphone time-series.
#[derive(Parser)]
#[command(name = "medseq", version, about)]
struct Cli {
    /// Key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override any configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Override every seed at once.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, default_value = "out", global = true)]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a known generating process.
    Synth,
    /// Parse, filter and preprocess a raw corpus into a validated store.
    Ingest {
        /// Line-delimited JSON corpus.
        #[arg(long)]
        input: PathBuf,
    },
    /// Emit the patient-grouped fold manifest.
    Split {
        #[arg(long)]
        store: PathBuf,
    },
    /// Train a model; with --folds/--fold the held-out fold is excluded.
    Train {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        folds: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Evaluate trained parameters; with --folds/--fold only that fold.
    Eval {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        folds: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
        /// Optional metric breakdown: age | same_label_history.
        #[arg(long)]
        group_by: Option<String>,
    },
    /// Export the attention trace for one patient's latest query.
    Explain {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        patient: String,
    },
    /// Run the 12-row ablation grid and emit the comparison table.
    Ablate {
        #[arg(long)]
        store: PathBuf,
    },
    /// Export figure data (hourly ratios, group AUCs, timelines).
    Report {
        #[arg(long)]
        predictions: PathBuf,
    },
}

fn parse_group_by(s: Option<&str>) -> anyhow::Result<Option<GroupBy>> {
    match s {
        None => Ok(None),
        Some("age") => Ok(Some(GroupBy::AgeBucket)),
        Some("same_label_history") => Ok(Some(GroupBy::SameLabeledHistory)),
        Some(other) => anyhow::bail!("--group-by: expected age|same_label_history, got \"{other}\""),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = config::load(cli.config.as_deref(), &cli.set, cli.seed)?;
    match cli.command {
        Command::Synth => commands::cmd_synth(&cfg, &cli.out),
        Command::Ingest { input } => commands::cmd_ingest(&cfg, &input, &cli.out),
        Command::Split { store } => commands::cmd_split(&cfg, &store, &cli.out),
        Command::Train { store, folds, fold } => {
            commands::cmd_train(&cfg, &store, folds.as_deref(), fold, &cli.out)
        }
        Command::Eval {
            store,
            params,
            folds,
            fold,
            group_by,
        } => commands::cmd_eval(
            &cfg,
            &store,
            &params,
            folds.as_deref(),
            fold,
            parse_group_by(group_by.as_deref())?,
            &cli.out,
        ),
        Command::Explain {
            store,
            params,
            patient,
        } => commands::cmd_explain(&cfg, &store, &params, &patient, &cli.out),
        Command::Ablate { store } => commands::cmd_ablate(&cfg, &store, &cli.out),
        Command::Report { predictions } => commands::cmd_report(&cfg, &predictions, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
