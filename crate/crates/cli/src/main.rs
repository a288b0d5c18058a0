use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsample::metrics::{self, MetricsTable};
use fedsample::server;
use fedsample::ExperimentConfig;

/// Multi-party learning simulator with adaptive subnet sampling.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment and write metrics.csv, summary.json, and config.toml.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Output directory (overrides `[output] dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two metrics files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Global-accuracy targets for rounds-to-target, e.g. `0.8,0.9`.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<f64>,
    },
    /// Parse and validate a configuration, printing it with defaults filled in.
    Validate { config: PathBuf },
}

fn load_config(path: &Path) -> Result<ExperimentConfig, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    ExperimentConfig::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run {
            config,
            seed,
            rounds,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = rounds {
                cfg.rounds = r;
            }
            if let Some(dir) = out {
                cfg.output.dir = dir;
            }
            let outcome = server::run_experiment(&cfg).map_err(|e| e.to_string())?;
            metrics::write_run(&cfg.output.dir, &cfg, &outcome).map_err(|e| e.to_string())?;
            if let Some(last) = outcome.reports.last() {
                println!(
                    "{} rounds: global acc {:.4}, mean local acc {:.4}, params ratio {:.4}",
                    outcome.reports.len(),
                    last.global_accuracy,
                    last.mean_local_accuracy,
                    last.mean_params_ratio
                );
            }
            println!("wrote {}", cfg.output.dir.display());
            Ok(())
        }
        Command::Compare { a, b, targets } => {
            let ta = MetricsTable::read(&a).map_err(|e| format!("{}: {e}", a.display()))?;
            let tb = MetricsTable::read(&b).map_err(|e| format!("{}: {e}", b.display()))?;
            let cmp = metrics::compare(&ta, &tb, &targets).map_err(|e| e.to_string())?;
            print!(
                "{}",
                cmp.render(&a.display().to_string(), &b.display().to_string())
            );
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDSAMPLE_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
