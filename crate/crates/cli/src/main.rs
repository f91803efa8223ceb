use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod layout;

use layout::Layout;

#[derive(Debug, Parser)]
#[command(name = "memoe", version, about = "Mixture-of-experts knowledge editing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Output root (default: $MEMOE_OUT, else ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Experiment name; artifacts go under <out>/<name>/.
    #[arg(long, global = true, default_value = "memoe")]
    name: String,
}

impl Common {
    fn layout(&self) -> Layout {
        let root = self
            .out
            .clone()
            .or_else(|| std::env::var_os("MEMOE_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        Layout::new(root.join(&self.name))
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic fact corpus, gazetteer and manifest.
    GenData(commands::GenDataArgs),
    /// Train the frozen base model on the corpus.
    TrainBase(commands::TrainBaseArgs),
    /// Run one editing protocol and write its report.
    Edit(commands::EditArgs),
    /// Sweep a configuration grid into a resumable CSV.
    Ablate(commands::AblateArgs),
    /// Summarize runs and write plot series.
    Report(commands::ReportArgs),
}

#[derive(Debug)]
pub enum Failure {
    /// Bad flags, missing inputs or invalid configuration.
    Usage(anyhow::Error),
    Internal(anyhow::Error),
}

impl Failure {
    pub fn usage(msg: impl std::fmt::Display) -> Self {
        Self::Usage(anyhow::anyhow!("{msg}"))
    }
}

impl From<memoe::Error> for Failure {
    fn from(e: memoe::Error) -> Self {
        use memoe::Error as E;
        match &e {
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Self::Usage(e.into()),
            E::Config(_)
            | E::InvalidArgument(_)
            | E::Parse { .. }
            | E::MissingField { .. }
            | E::InsufficientVocab { .. }
            | E::UnknownEntity(_)
            | E::TokenOutOfRange { .. }
            | E::SequenceTooLong { .. }
            | E::EmptyInput(_)
            | E::Checkpoint(_)
            | E::Json(_) => Self::Usage(e.into()),
            _ => Self::Internal(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Internal(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        memoe::Error::from(e).into()
    }
}

pub type CmdResult = Result<(), Failure>;

/// Fails with a usage error when `path` does not exist.
pub fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::usage(format!("{what} not found at {}", path.display())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::TrainBase(a) => commands::train_base(&a),
        Command::Edit(a) => commands::edit(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(1)
        }
    }
}
