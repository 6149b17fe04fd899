//! `mfg run <config>`, `mfg acceptance <config>`, `mfg plotdata <run-dir>`.
//!
//! Exit status 0 when every check passes, 1 on a failed check or solver
//! error, 2 on usage or configuration errors.

use clap::{Parser, Subcommand};
use mfg_cli::config::{ExperimentConfig, ExperimentKind};
use mfg_cli::error::CliError;
use mfg_cli::plotdata::emit_plotdata;
use mfg_cli::run::run;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mfg", about = "Mean field games with common noise: experiments and acceptance checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// Run the acceptance suite, using the seed and output directory of a config file.
    Acceptance { config: PathBuf },
    /// Write long-format plotting tables for a finished run.
    Plotdata { run_dir: PathBuf },
}

fn load(path: &Path) -> Result<(ExperimentConfig, String), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config { key: "<file>".into(), message: format!("{}: {e}", path.display()) })?;
    Ok((ExperimentConfig::parse(&text)?, text))
}

fn execute(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::Run { config } => {
            let (cfg, text) = load(&config)?;
            report(run(&cfg, &text)?)
        }
        Command::Acceptance { config } => {
            let (mut cfg, text) = load(&config)?;
            cfg.kind = ExperimentKind::Acceptance;
            report(run(&cfg, &text)?)
        }
        Command::Plotdata { run_dir } => {
            let names = emit_plotdata(&run_dir)?;
            if names.is_empty() {
                println!("no figure recipes for this run");
            }
            for n in names {
                println!("{}", run_dir.join(n).display());
            }
            Ok(true)
        }
    }
}

fn report(outcome: mfg_cli::run::RunOutcome) -> Result<bool, CliError> {
    for (k, v) in &outcome.summary {
        println!("{k} = {v}");
    }
    println!("artifacts in {}", outcome.dir.display());
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
