//! Command-line front end. Failures print one JSON line to stderr and exit
//! nonzero.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use toponet::graph::to_text;
use toponet::harness::{self, Checkpoint, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "toponet", version, about = "Learn the connectivity of multi-stage DAG networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config and write all artifacts.
    Run {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the config's analyses on a saved checkpoint.
    Analyze {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Describe a checkpoint as JSON.
    Inspect { checkpoint: PathBuf },
    /// Print a topology in text form, e.g. `residual:14:2`.
    GenTopology {
        spec: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &Path, output_dir: Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    if let Some(seed) = seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run { config, output_dir, seed } => {
            let summary = harness::run_experiment(&load_config(&config, output_dir, seed)?)?;
            emit(&(serde_json::to_string(&summary).expect("json") + "\n"));
        }
        Command::Analyze { checkpoint, config, output_dir, seed } => {
            let summary = harness::analyze_checkpoint(&checkpoint, &load_config(&config, output_dir, seed)?)?;
            emit(&(serde_json::to_string(&summary).expect("json") + "\n"));
        }
        Command::Inspect { checkpoint } => {
            let info = harness::inspect(&Checkpoint::load(&checkpoint)?)?;
            emit(&(serde_json::to_string_pretty(&info).expect("json") + "\n"));
        }
        Command::GenTopology { spec, seed } => {
            let (n, topology) = harness::parse_topology_shorthand(&spec)?;
            let graph = topology.generate(n, seed).map_err(|e| HarnessError::Config(e.to_string()))?;
            emit(&to_text(&graph, None));
        }
    }
    Ok(())
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            eprintln!("{}", error_line("usage", message.lines().next().unwrap_or("").trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
