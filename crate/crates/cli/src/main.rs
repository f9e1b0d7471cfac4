use std::path::PathBuf;
use std::process::ExitCode;

use auctioneer_cli::commands;
use auctioneer_cli::report::write_text;
use auctioneer_cli::{CliError, ExperimentConfig};
use clap::{Parser, Subcommand};

/// Run auction experiments with a simulated distributed auctioneer.
///
/// Exit status: 0 pass, 1 violation or runtime failure, 2 usage error.
#[derive(Parser)]
#[command(name = "auctioneer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run `rounds` all-honest executions and write a JSON and CSV report.
    Simulate { config: PathBuf },
    /// Time the standard auction at each parallelism level.
    Bench { config: PathBuf },
    /// Correct simulation, coalition resilience and truthfulness checks.
    Check { config: PathBuf },
    /// Compare every simulated round with the trusted auctioneer.
    OracleCompare { config: PathBuf },
    /// Print the default configuration.
    DefaultConfig,
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let load = |p: &PathBuf| ExperimentConfig::load(p);
    match cli.command {
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml());
            Ok(true)
        }
        Command::Simulate { config } => {
            let cfg = load(&config)?;
            let (report, passed) = commands::simulate(&cfg)?;
            report.save(&cfg, "simulate")?;
            let t = &report.totals;
            println!(
                "{} rounds: {} solutions, {} aborts, welfare {}, user payments {}, provider payments {}",
                t.rounds, t.solutions, t.aborts, t.welfare, t.user_payments, t.provider_payments
            );
            Ok(passed)
        }
        Command::Bench { config } => {
            let cfg = load(&config)?;
            let (report, passed) = commands::bench(&cfg)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            let csv = report.csv_string()?;
            write_text(&cfg.output_path("bench.json"), &report.to_json())?;
            write_text(&cfg.output_path("bench.csv"), &csv)?;
            print!("{csv}");
            Ok(passed)
        }
        Command::Check { config } => {
            let cfg = load(&config)?;
            let (report, passed) = commands::check(&cfg)?;
            let text = report.to_text();
            write_text(
                &cfg.output_path("check.json"),
                &serde_json::to_string_pretty(&report).expect("serializes"),
            )?;
            write_text(&cfg.output_path("check.txt"), &text)?;
            print!("{text}");
            Ok(passed)
        }
        Command::OracleCompare { config } => {
            let cfg = load(&config)?;
            let (report, passed) = commands::oracle_compare(&cfg)?;
            write_text(
                &cfg.output_path("oracle.json"),
                &serde_json::to_string_pretty(&report).expect("serializes"),
            )?;
            println!(
                "{}/{} rounds equal to the trusted auctioneer",
                report.equal, report.rounds
            );
            Ok(passed)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
