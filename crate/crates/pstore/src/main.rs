//! `pstore` — deterministic scenario runner for the resilient persistent
//! object middleware.
//!
//! Exit codes: 0 when every assertion passes (for sweeps: no mixed or lost
//! reads), 1 on assertion failure, 2 on parse or usage errors.

use clap::{Parser, Subcommand};
use pstore::harness::{
    load_scenario, restart_all, run_scenario, sweep_crash_points, ReportFormat,
};
use pstore::sim::Durability;
use pstore::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pstore", version, about = "Resilient persistent object store simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file (or builtin scenario) to completion.
    Run {
        /// Path to a scenario file, or a builtin name.
        scenario: String,
        /// Report format: text or json.
        #[arg(long, default_value = "text")]
        report: String,
        /// Durable store backing: mem or dir:<path>.
        #[arg(long)]
        durable: Option<String>,
    },
    /// Re-run a scenario once per internal step of a COMMIT event, crashing
    /// the committing node after that step, and classify what readers see.
    Sweep {
        scenario: String,
        /// Schedule index of the COMMIT event to sweep.
        #[arg(long)]
        commit: usize,
        #[arg(long, default_value = "text")]
        report: String,
        #[arg(long)]
        durable: Option<String>,
    },
    /// Run the schedule up to a tick, shut every node down, boot fresh nodes
    /// over the same durable directories, and run the rest.
    Restart {
        scenario: String,
        /// First tick that executes after the restart.
        #[arg(long)]
        split: u64,
        #[arg(long, default_value = "text")]
        report: String,
        /// Must be dir:<path>; restarts need durable directories.
        #[arg(long)]
        durable: String,
    },
}

fn parse_format(s: &str) -> Result<ReportFormat, Error> {
    match s {
        "text" => Ok(ReportFormat::Text),
        "json" => Ok(ReportFormat::Json),
        other => Err(Error::Usage(format!("unknown report format {other:?}"))),
    }
}

fn parse_durable(s: &str) -> Result<Durability, Error> {
    if s == "mem" {
        return Ok(Durability::Mem);
    }
    if let Some(path) = s.strip_prefix("dir:") {
        if path.is_empty() {
            return Err(Error::Usage("dir durability needs a path".into()));
        }
        return Ok(Durability::Dir(PathBuf::from(path)));
    }
    Err(Error::Usage(format!(
        "bad --durable value {s:?}; expected mem or dir:<path>"
    )))
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Run { scenario, report, durable } => {
            let format = parse_format(&report)?;
            let scenario = load_scenario(&scenario)?;
            let durable = durable.as_deref().map(parse_durable).transpose()?;
            let outcome = run_scenario(&scenario, durable)?;
            print!("{}", outcome.report.render(format));
            Ok(if outcome.assert_failures > 0 { 1 } else { 0 })
        }
        Command::Sweep { scenario, commit, report, durable } => {
            let format = parse_format(&report)?;
            let scenario = load_scenario(&scenario)?;
            let durable = durable.as_deref().map(parse_durable).transpose()?;
            let sweep = sweep_crash_points(&scenario, commit, durable)?;
            print!("{}", sweep.render(format));
            Ok(if sweep.mixed_or_lost() > 0 { 1 } else { 0 })
        }
        Command::Restart { scenario, split, report, durable } => {
            let format = parse_format(&report)?;
            let scenario = load_scenario(&scenario)?;
            let dir = match parse_durable(&durable)? {
                Durability::Dir(path) => path,
                Durability::Mem => {
                    return Err(Error::Usage("restart requires --durable dir:<path>".into()))
                }
            };
            let outcome = restart_all(&scenario, split, dir, None)?;
            print!("{}", outcome.report.render(format));
            Ok(if outcome.assert_failures > 0 { 1 } else { 0 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
