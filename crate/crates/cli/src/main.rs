mod commands;
mod provider;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use commands::{EvaluateArgs, FixtureArgs, GenerateArgs, OntologyArgs, StatsCommand, ValidateArgs};

/// Knowledge-component generation, evaluation and ontology induction for
/// multiple-choice question banks.
#[derive(Debug, Parser)]
#[command(name = "kcforge", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a prompting strategy over every question of a bank.
    Generate(GenerateArgs),
    /// Score generation records against the bank's gold KCs.
    Evaluate(EvaluateArgs),
    /// Induce a KC ontology by iterative grouping.
    Ontology(OntologyArgs),
    /// Run one of the hypothesis tests on raw counts.
    #[command(subcommand)]
    Stats(StatsCommand),
    /// Write a synthetic paired benchmark.
    Fixture(FixtureArgs),
    /// Check a bank document.
    Validate(ValidateArgs),
}

/// An error paired with the process exit code it maps to.
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    pub const VALIDATION: u8 = 1;
    pub const PROVIDER: u8 = 2;
    pub const PARSE: u8 = 3;

    pub fn validation(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: Self::VALIDATION,
            error: e.into(),
        }
    }

    pub fn provider(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: Self::PROVIDER,
            error: e.into(),
        }
    }

    pub fn parse(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: Self::PARSE,
            error: e.into(),
        }
    }
}

impl fmt::Debug for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "exit {}: {:#}", self.code, self.error)
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        Self::validation(e)
    }
}

/// Writes `contents` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, contents: &str) -> anyhow::Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// `records.jsonl` + `failures.json` -> `records.failures.json`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Ontology(a) => commands::ontology(a),
        Command::Stats(c) => commands::stats(c),
        Command::Fixture(a) => commands::fixture(a),
        Command::Validate(a) => commands::validate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
