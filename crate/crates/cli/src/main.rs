use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use notebert::experiments::ExperimentKind;
use notebert::pipeline::{Command, Pipeline};

/// Clinical-note masked-language-model pipeline.
///
/// Every subcommand reads the JSON config given by `--config` (defaults
/// otherwise), writes its artifacts and records a run manifest under
/// `<reports>/manifests/`. Set NOTEBERT_REPORT_DIR to redirect reports.
///
/// Exit status: 0 success, 2 config error, 3 data error, 4 numeric failure.
#[derive(Debug, Parser)]
#[command(name = "notebert", version)]
struct Cli {
    /// Pipeline config (JSON). Relative paths inside resolve against its directory.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override a config key by dotted path, e.g. `--set pretrain.steps=100`.
    /// Values are parsed as JSON, falling back to a string.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Validate the config and list inputs and outputs without running.
    #[arg(long, global = true)]
    dry_run: bool,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Read raw notes into the normalized corpus.
    Ingest,
    /// Per-note-type counts of notes, sections and sentences.
    Stats,
    /// Train the WordPiece vocabulary.
    Vocab,
    /// Build masked pretraining instances.
    Instances,
    /// Pretrain a model from scratch or from `pretrain.init`.
    Pretrain,
    /// Continue pretraining an existing checkpoint.
    ContinuePretrain,
    /// Grid-search fine-tuning on the configured task.
    Finetune,
    /// Evaluate the fine-tuned model on the test split.
    Eval,
    /// Replace sentinel PHI markers with surrogates.
    Deid,
    /// Nearest neighbors of query words in a checkpoint.
    Probe,
    /// Write synthetic notes and task files.
    Synth,
    /// Run a named end-to-end experiment.
    Experiment {
        #[arg(value_parser = parse_kind)]
        name: ExperimentKind,
    },
}

fn parse_kind(s: &str) -> Result<ExperimentKind, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
        format!("expected one of: {}", names.join(", "))
    })
}

impl Cmd {
    fn to_command(&self) -> Command {
        match self {
            Cmd::Ingest => Command::Ingest,
            Cmd::Stats => Command::Stats,
            Cmd::Vocab => Command::Vocab,
            Cmd::Instances => Command::Instances,
            Cmd::Pretrain => Command::Pretrain,
            Cmd::ContinuePretrain => Command::ContinuePretrain,
            Cmd::Finetune => Command::Finetune,
            Cmd::Eval => Command::Eval,
            Cmd::Deid => Command::Deid,
            Cmd::Probe => Command::Probe,
            Cmd::Synth => Command::Synth,
            Cmd::Experiment { name } => Command::Experiment(*name),
        }
    }
}

fn run(cli: Cli) -> notebert::Result<()> {
    let mut overrides = cli.overrides;
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let pipeline = Pipeline::load(cli.config.as_deref(), &overrides)?;
    let command = cli.command.to_command();
    if cli.dry_run {
        print!("{}", pipeline.dry_run(command).render());
        return Ok(());
    }
    let outcome = pipeline.run(command)?;
    println!("{}", outcome.summary);
    println!("manifest: {}", outcome.manifest_path.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
