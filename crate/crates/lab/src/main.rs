use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pmr_core::train::Strategy;
use pmr_lab::commands::{self, parse_list};
use pmr_lab::{LabError, Result};

/// Prototype-based modality rebalancing lab.
#[derive(Parser)]
#[command(name = "pmr-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-modality dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one strategy; prints the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the analytic gradients; the check must then fail.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Derive angle, score and ratio curves from a run directory.
    Diagnose {
        #[arg(long)]
        run: PathBuf,
    },
    /// Run several strategies over several seeds and summarize.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated strategy names.
        #[arg(long)]
        strategies: String,
        /// Comma-separated seeds.
        #[arg(long, allow_hyphen_values = true)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => {
            let m = commands::gen_data(&config, &out)?;
            println!("{} {}", out.display(), m.sha256);
        }
        Command::Train { config, data, out } => {
            let outcome = commands::train(&config, &data, &out)?;
            for w in &outcome.manifest.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", outcome.dir.display());
        }
        Command::Gradcheck { seed, corrupt } => {
            let report = commands::gradcheck(seed, corrupt)?;
            print!("{}", commands::format_gradcheck(&report));
            if !report.all_passed() {
                return Err(LabError::CheckFailed(report.failures().join("\n")));
            }
        }
        Command::Diagnose { run } => {
            let outcome = commands::diagnose(&run)?;
            for p in &outcome.written {
                println!("{}", p.display());
            }
            for (name, why) in &outcome.skipped {
                eprintln!("skipped {name}: {why}");
            }
        }
        Command::Compare {
            config,
            strategies,
            seeds,
            out,
        } => {
            let strategies: Vec<Strategy> = parse_list(&strategies, "strategy")?;
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            let outcome = commands::compare(&config, &strategies, &seeds, &out)?;
            println!("{}", outcome.summary_path.display());
            let failures = outcome.failures();
            if !failures.is_empty() {
                return Err(LabError::RunsFailed(failures.join("\n")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
