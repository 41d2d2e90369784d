use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use prunelab::harness::{self, selfcheck, ExperimentConfig};

/// Environment variable holding the number of worker threads.
const WORKERS_ENV: &str = "PRUNELAB_WORKERS";

#[derive(Parser)]
#[command(
    name = "prunelab",
    version,
    about = "Magnitude vs gradient-sensitive pruning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every strategy × seed cell of a JSON experiment config.
    Run { config: PathBuf },
    /// Recompute the aggregate CSVs from the raw records in a directory.
    Aggregate { dir: PathBuf },
    /// Run the finite-difference and oracle self-checks.
    Check,
}

fn configure_workers() -> Result<(), String> {
    let Ok(value) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{WORKERS_ENV} must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(config: &PathBuf) -> Result<bool, String> {
    let cfg = ExperimentConfig::from_file(config).map_err(|e| e.to_string())?;
    let report = harness::run_experiment(&cfg).map_err(|e| e.to_string())?;
    for cell in &report.cells {
        match &cell.outcome {
            Ok(records) => {
                for r in records {
                    println!(
                        "{} seed {} #{}: remaining {} accuracy {}",
                        cell.strategy.id(),
                        cell.seed,
                        r.index,
                        r.remaining_fraction,
                        r.test_accuracy
                    );
                }
            }
            Err(e) => println!("{} seed {}: FAILED {e}", cell.strategy.id(), cell.seed),
        }
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(report.all_succeeded())
}

fn check() -> Result<bool, String> {
    let checks = selfcheck::run_all().map_err(|e| e.to_string())?;
    for c in &checks {
        let verdict = if c.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<40} {:.3e} (< {:.0e})",
            c.name, c.value, c.tolerance
        );
    }
    Ok(checks.iter().all(selfcheck::Check::passed))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = configure_workers().and_then(|()| match &cli.command {
        Command::Run { config } => run(config),
        Command::Aggregate { dir } => harness::aggregate_dir(dir)
            .map(|warnings| {
                warnings.iter().for_each(|w| eprintln!("warning: {w}"));
                true
            })
            .map_err(|e| e.to_string()),
        Command::Check => check(),
    });
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
