//! `dac`: data-as-code pipelines from the command line.
//!
//! Exit status is 0 on success, 1 for user errors (bad input, failed
//! stages, unknown names) and 2 for internal or environment failures.

mod builtin;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "dac", version, about = "Data-as-code pipelines with versioned results")]
struct Cli {
    /// Pin revision timestamps to 0 so ids and output are reproducible.
    #[arg(long, global = true)]
    deterministic_time: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create `.dac/` and empty pipeline and params files.
    Init,
    /// Bring stages up to date.
    Repro {
        #[arg(long, short = 'j', default_value_t = 1)]
        workers: usize,
        /// Only these stages and what they depend on.
        targets: Vec<String>,
    },
    /// Show each stage as fresh, stale or never-run.
    Status,
    /// Print the dependency graph in DOT format.
    Dag,
    /// Record the metadata files as a revision.
    Commit {
        #[arg(short, long)]
        message: String,
    },
    /// List revisions from HEAD back to the root.
    Log,
    /// Restore a revision's metadata, then the data its lock describes.
    /// Without a revision only the data is restored.
    Checkout {
        rev: Option<String>,
        /// Overwrite uncommitted changes to tracked files.
        #[arg(long)]
        force: bool,
    },
    /// Point a tag at a revision (default HEAD).
    Tag { name: String, rev: Option<String> },
    /// List branches, tags and experiment refs.
    Refs,
    #[command(subcommand)]
    Exp(ExpCommand),
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Upload objects and history to a directory remote.
    Push(RemoteArgs),
    /// Download history and the objects a revision needs.
    Pull {
        #[command(flatten)]
        remote: RemoteArgs,
        #[arg(long)]
        rev: Option<String>,
    },
    /// Print a stage attribute at a revision.
    Get {
        stage: String,
        attr: String,
        #[arg(long, default_value = "HEAD")]
        rev: String,
        #[arg(long)]
        remote: Option<PathBuf>,
    },
    /// Self-contained node commands for pipelines and tests.
    #[command(subcommand)]
    Builtin(builtin::Builtin),
}

#[derive(Args, Debug)]
struct RemoteArgs {
    #[arg(long)]
    remote: PathBuf,
}

#[derive(Subcommand, Debug)]
enum ExpCommand {
    /// Queue one experiment per combination of override values.
    Queue {
        #[arg(short = 'S', long = "set", required = true)]
        set: Vec<String>,
    },
    /// Run every queued experiment.
    Run {
        #[arg(long, short = 'j', default_value_t = 1)]
        workers: usize,
    },
    List,
    /// Commit an experiment's result on a new branch and check it out.
    Promote { name: String, branch: String },
}

#[derive(Subcommand, Debug)]
enum MetricsCommand {
    /// Metrics recorded at a revision (default HEAD).
    Show { rev: Option<String> },
    /// Metrics of several revisions side by side.
    Diff {
        #[arg(required = true)]
        revs: Vec<String>,
    },
}

/// A command failure with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn user(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<dac_core::Error> for Failure {
    fn from(e: dac_core::Error) -> Self {
        Failure {
            code: if e.is_user_error() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}
