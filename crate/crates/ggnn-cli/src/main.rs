//! `ggnn`: dataset generation, training, evaluation, gradient checking and
//! the contraction demo, one command per run.
//!
//! Every command reads its settings from built-in defaults, then an
//! optional `--config` file of `key = value` lines, then flags; the merged
//! settings are echoed into the report as `config.*` lines. Exit codes:
//! 0 success, 1 task failure, 2 bad usage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod report;
mod settings;

use commands::{contraction, eval, generate, gradcheck, seplogic, train};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or values: exit 2.
    Usage(String),
    /// The command itself failed: exit 1.
    Task(String),
}

impl From<ggnn::Error> for CliError {
    fn from(e: ggnn::Error) -> Self {
        CliError::Task(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "ggnn", version, about = "Gated graph network toolkit")]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// `key = value` settings file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Append the metric lines to this file as well as stdout.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// Overwrite existing reports and dataset directories.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate oracle-checked synthetic task datasets
    Generate(generate::Args),
    /// Train a graph model or an RNN/LSTM token baseline
    Train(train::Args),
    /// Evaluate a saved checkpoint on a dataset split
    Eval(eval::Args),
    /// Compare tape gradients against central finite differences
    Gradcheck(gradcheck::Args),
    /// Tabulate derivative decay under the contraction constraint
    Contraction(contraction::Args),
    /// Heap-to-formula pipeline: enumerate, train, eval
    #[command(subcommand)]
    Seplogic(seplogic::Command),
}

/// The per-run context shared by all commands.
pub struct Ctx {
    pub workdir: PathBuf,
    pub config: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub force: bool,
}

impl Ctx {
    /// Resolve a settings path against the workdir (absolute paths win).
    pub fn path(&self, raw: &str) -> PathBuf {
        let p = Path::new(raw);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    pub fn report_path(&self) -> Option<PathBuf> {
        self.report.as_ref().map(|p| {
            if p.is_absolute() {
                p.clone()
            } else {
                self.workdir.join(p)
            }
        })
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = Ctx {
        workdir: cli.workdir,
        config: cli.config,
        report: cli.report,
        force: cli.force,
    };
    match cli.command {
        Command::Generate(args) => generate::run(&ctx, &args),
        Command::Train(args) => train::run(&ctx, &args),
        Command::Eval(args) => eval::run(&ctx, &args),
        Command::Gradcheck(args) => gradcheck::run(&ctx, &args),
        Command::Contraction(args) => contraction::run(&ctx, &args),
        Command::Seplogic(cmd) => seplogic::run(&ctx, &cmd),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Task(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
