use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use entflow_cli::export::ExportFormat;
use entflow_cli::{config, export, scenario, CliError};

/// Scenario-driven laboratory for entropy dissipation along diffusions.
///
/// Exit codes: 0 every selected check passed; 1 some check failed;
/// 2 invalid configuration; 3 runtime failure in the numerics or I/O.
#[derive(Parser)]
#[command(name = "entflow", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every check selected by a scenario file.
    Run {
        /// Scenario TOML file.
        config: PathBuf,
    },
    /// Run a subset of a scenario's checks.
    Check {
        /// Scenario TOML file.
        config: PathBuf,
        /// Comma-separated check names (must be selected by the scenario).
        #[arg(long, value_delimiter = ',', required = true)]
        only: Vec<String>,
    },
    /// List every registered check with its description and identity.
    ListChecks,
    /// Re-export a report.json as CSV or canonical JSON.
    Export {
        /// Path to a report.json produced by `run` or `check`.
        input: PathBuf,
        /// Output format.
        #[arg(long, value_enum)]
        format: ExportFormat,
        /// Output file (stdout when omitted).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(all_passed) => {
            if all_passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool, CliError> {
    match cli.cmd {
        Cmd::Run { config } => execute(&config, None),
        Cmd::Check { config, only } => execute(&config, Some(&only)),
        Cmd::ListChecks => {
            print!("{}", scenario::list_checks());
            Ok(true)
        }
        Cmd::Export { input, format, output } => {
            let text = export::render(&input, format)?;
            match output {
                Some(path) => std::fs::write(&path, text)
                    .map_err(|e| CliError::Runtime(entflow_core::Error::Io(e)))?,
                None => print!("{text}"),
            }
            Ok(true)
        }
    }
}

fn execute(path: &std::path::Path, only: Option<&[String]>) -> Result<bool, CliError> {
    let cfg = config::load(path)?;
    let resolved = config::resolve(cfg)?;
    let out_dir = resolved.out_dir.clone();
    let report = scenario::run_scenario(resolved, only)?;

    println!("scenario {} (seed {})", report.scenario, report.seed);
    for check in &report.checks {
        let verdict = if check.pass { "pass" } else { "FAIL" };
        let gap = if check.gap_kind == "rel" { check.rel_gap } else { check.abs_gap };
        println!(
            "  {:<28} {}  {:.6e} vs {:.6e} ({} gap {:.3e}, tolerance {:.1e}, {})",
            check.name, verdict, check.lhs, check.rhs, check.gap_kind, gap, check.tolerance,
            format_seconds(report.timings.get(&check.name)),
        );
        for w in &check.warnings {
            println!("  {:<28} note: {w}", "");
        }
    }
    println!("report: {}", out_dir.join("report.json").display());
    Ok(report.all_passed())
}

fn format_seconds(t: Option<&f64>) -> String {
    match t {
        Some(s) => format!("{s:.2}s"),
        None => "-".into(),
    }
}
