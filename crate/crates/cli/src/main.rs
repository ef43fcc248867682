use std::path::{Path, PathBuf};
use std::process::ExitCode;

use besselab::experiments::{self, ExperimentConfig, NAMES};
use besselab::Error;
use clap::{Parser, Subcommand};

/// Runs the numerical experiments of the besselab crate from JSON configs.
#[derive(Parser)]
#[command(name = "besselab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report files.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with status 5 when any check in the report fails.
        #[arg(long)]
        strict: bool,
    },
    /// Print the registered experiment names.
    List,
    /// Parse a config and print its resolved parameters.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_CHECKS: u8 = 5;

enum Failure {
    Io(String),
    Lib(Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => EXIT_IO,
            Failure::Lib(e) if e.is_config() => EXIT_CONFIG,
            Failure::Lib(_) => EXIT_NUMERIC,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Io(m) => write!(f, "io error: {m}"),
            Failure::Lib(e) if e.is_config() => write!(f, "config error: {e}"),
            Failure::Lib(e) => write!(f, "numerical error: {e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    Ok(ExperimentConfig::from_json(&text)?)
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::List => {
            for name in NAMES {
                println!("{name}");
            }
            Ok(0)
        }
        Command::Validate { config } => {
            let cfg = load(&config)?;
            let resolved = experiments::validate(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&resolved).expect("params serialize"));
            Ok(0)
        }
        Command::Run {
            config,
            seed,
            out,
            strict,
        } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = out
                .or_else(|| cfg.output.dir.clone())
                .unwrap_or_else(|| PathBuf::from("reports"));
            let stem = cfg.output.stem.clone().unwrap_or_else(|| cfg.experiment.clone());
            let report = experiments::run(&cfg)?;
            let files = report
                .write(&dir, &stem)
                .map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
            let failed: Vec<&String> = report.checks.iter().filter(|(_, c)| !c.pass).map(|(k, _)| k).collect();
            eprintln!(
                "{}: {} checks, {} failed, {:.1}s",
                cfg.experiment,
                report.checks.len(),
                failed.len(),
                report.wall_time.as_secs_f64()
            );
            for name in &failed {
                eprintln!("  failed: {name}");
            }
            for f in files {
                println!("{}", f.display());
            }
            Ok(if strict && !failed.is_empty() { EXIT_CHECKS } else { 0 })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("besselab: {f}");
            ExitCode::from(f.code())
        }
    }
}
