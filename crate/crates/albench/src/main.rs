//! Command-line front end for the active-learning benchmark grid.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use albench::acquisition::ALL_STRATEGIES;
use albench::harness::{self, GridSpec, Preset};
use albench::oracles::{BUILTIN_PROBLEMS, DATASET_PROBLEMS};

#[derive(Parser)]
#[command(name = "albench", about = "Pool-ratio benchmark for deep active learning on regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment grid described by a TOML config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for per-cell records (default: ./runs).
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Parallel worker count (default: 1).
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Scale preset overriding the config's loop/width settings.
        #[arg(long, value_parser = Preset::parse)]
        preset: Option<Preset>,
        /// Skip cells that already have a valid record on disk.
        #[arg(long)]
        resume: bool,
    },
    /// Aggregate recorded runs into plot-ready CSV tables.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the available acquisition strategies.
    ListStrategies,
    /// Print the available benchmark problems.
    ListProblems,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> albench::Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            workers,
            preset,
            resume,
        } => {
            let mut grid = GridSpec::load(&config)?;
            if let Some(p) = preset {
                p.apply(&mut grid);
            }
            if !resume && out.exists() && out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
                return Err(albench::Error::Config(format!(
                    "output directory {} is not empty; pass --resume to continue it",
                    out.display()
                )));
            }
            let records = harness::run_grid(&grid, &out, workers)?;
            let failed = records
                .iter()
                .filter(|r| !matches!(r.status, albench::engine::RunStatus::Completed))
                .count();
            println!(
                "completed {} cells ({} failed) under {}",
                records.len(),
                failed,
                out.display()
            );
            Ok(())
        }
        Command::Report { input, out } => {
            let records = harness::load_all_records(&input)?;
            let bundle = harness::report(&records)?;
            harness::emit_report(&bundle, &out)?;
            println!(
                "report over {} runs written to {}",
                records.len(),
                out.display()
            );
            Ok(())
        }
        Command::ListStrategies => {
            for s in ALL_STRATEGIES {
                println!("{}", s.name());
            }
            Ok(())
        }
        Command::ListProblems => {
            for p in BUILTIN_PROBLEMS {
                println!("{p}");
            }
            for p in DATASET_PROBLEMS {
                println!("{p} (requires a dataset CSV table)");
            }
            Ok(())
        }
    }
}
