//! `uwb-rff`: dataset generation, training, evaluation and reporting.

mod commands;
mod config;
mod svg;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub const USAGE: u8 = 1;
    pub const DATA: u8 = 2;
    pub const NUMERIC: u8 = 3;

    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: Self::USAGE,
            msg: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self {
            code: Self::DATA,
            msg: msg.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ERROR {}: {}", self.code, self.msg)
    }
}

impl From<uwb_rff::Error> for CliError {
    fn from(e: uwb_rff::Error) -> Self {
        use uwb_rff::Error as E;
        let code = match &e {
            E::InvalidArgument(_) => Self::USAGE,
            E::Numeric(_) => Self::NUMERIC,
            E::InvalidState(_) | E::Format { .. } | E::Parse { .. } | E::DegenerateReference(_) | E::Io(_) | E::Json(_) => {
                Self::DATA
            }
        };
        Self { code, msg: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "uwb-rff", version, about = "UWB radio-frequency fingerprinting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; `--key value` overrides win over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key overrides, e.g. `--seed 7 --train.lr 0.001`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (paths.dataset).
    Synth(Common),
    /// Convert a CSV file (paths.csv) into a binary dataset (paths.dataset).
    Import(Common),
    /// Write the scenario split of paths.dataset to paths.split.
    Split(Common),
    /// Train the configured model; writes paths.checkpoint and its sidecar.
    Train(Common),
    /// Evaluate a model on a split; writes report CSVs to paths.report_dir.
    Eval(Common),
    /// Build a reference gallery (paths.gallery) from a split.
    Enroll(Common),
    /// Rank gallery ids for each trace in paths.traces; CSV on stdout.
    Identify(Common),
    /// Multi-sample voting (and optionally concatenated-input) experiments.
    Fuse(Common),
    /// Render report CSVs in paths.report_dir as SVG plots.
    Report(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (cmd, common): (fn(&config::RunConfig) -> Result<(), CliError>, Common) = match cli.command {
        Command::Synth(c) => (commands::synth, c),
        Command::Import(c) => (commands::import, c),
        Command::Split(c) => (commands::split, c),
        Command::Train(c) => (commands::train, c),
        Command::Eval(c) => (commands::eval, c),
        Command::Enroll(c) => (commands::enroll, c),
        Command::Identify(c) => (commands::identify, c),
        Command::Fuse(c) => (commands::fuse, c),
        Command::Report(c) => (commands::report, c),
    };
    let cfg = config::load(common.config.as_deref(), &common.overrides)?;
    cmd(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::usage(first));
            return ExitCode::from(CliError::USAGE);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code)
        }
    }
}
