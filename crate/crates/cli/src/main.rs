//! `curate`: dataset generation, training, oracle checks, evaluation-suite
//! analysis and report export.
//!
//! Failures print one JSON line on stderr, `{"error":KIND,"code":N,"message":...}`,
//! and exit with `N`: 1 runtime, 2 usage, 3 malformed config, 4 missing
//! input file, 5 output directory already in use.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "curate", version, about = "Reference-model data curation and distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset directory.
    GenData(Common),
    /// Train one method (or pretrain a reference on the curated split).
    Train(Common),
    /// Check the curation/distillation identity on random instances.
    OracleCheck(Common),
    /// Select a low-variance evaluation subset from per-seed scores.
    Stableeval(Common),
    /// Evaluate a checkpoint on a dataset split.
    Eval(Common),
    /// Collect final metrics from finished training runs.
    ExportReport(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::OracleCheck(_) => "oracle-check",
            Command::Stableeval(_) => "stableeval",
            Command::Eval(_) => "eval",
            Command::ExportReport(_) => "export-report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c)
            | Command::Train(c)
            | Command::OracleCheck(c)
            | Command::Stableeval(c)
            | Command::Eval(c)
            | Command::ExportReport(c) => c,
        }
    }
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file (a previous run's run_manifest.json also works).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a config value by dotted path, e.g. method.selection.temperature=10.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; must not exist or be empty.
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
    /// Maximum worker threads.
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Seed for training, oracle sweeps and data generation.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    MissingFile(PathBuf),
    OutputInUse(PathBuf),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::MissingFile(_) => 4,
            CliError::OutputInUse(_) => 5,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Runtime(_) => "runtime",
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::MissingFile(_) => "missing_file",
            CliError::OutputInUse(_) => "output_exists",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::Config(m) | CliError::Runtime(m) => m.clone(),
            CliError::MissingFile(p) => format!("no such file or directory: {}", p.display()),
            CliError::OutputInUse(p) => {
                format!("output directory exists and is not empty: {}", p.display())
            }
        }
    }

    pub fn from_io(path: &Path, e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::NotFound => CliError::MissingFile(path.to_path_buf()),
            _ => CliError::Runtime(format!("{}: {e}", path.display())),
        }
    }
}

impl From<curation_core::Error> for CliError {
    fn from(e: curation_core::Error) -> Self {
        match e {
            curation_core::Error::Io { path, source } => CliError::from_io(&path, source),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message())
    }
}

impl std::error::Error for CliError {}

fn report(e: &CliError) -> ExitCode {
    let line = serde_json::json!({
        "error": e.kind(),
        "code": e.code(),
        "message": e.message().split_whitespace().collect::<Vec<_>>().join(" "),
    });
    eprintln!("{line}");
    ExitCode::from(e.code())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = cli.command.common();
    if let Some(n) = common.workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    let config = config::resolve(
        common.config.as_deref(),
        &common.overrides,
        common.seed,
        common.output.as_deref(),
    )?;
    let output = config
        .paths
        .output
        .clone()
        .ok_or_else(|| CliError::Config("an output directory is required (--output or paths.output)".into()))?;
    let name = cli.command.name();
    match cli.command {
        Command::GenData(_) => commands::gen_data(name, &config, &output),
        Command::Train(_) => commands::train(name, &config, &output),
        Command::OracleCheck(_) => commands::oracle_check(name, &config, &output),
        Command::Stableeval(_) => commands::stableeval(name, &config, &output),
        Command::Eval(_) => commands::eval(name, &config, &output),
        Command::ExportReport(_) => commands::export_report(name, &config, &output),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            return report(&CliError::Usage(e.to_string()));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
