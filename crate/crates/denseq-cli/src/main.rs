//! `denseq` command-line front end.
//!
//! Exit codes: 0 success/converged, 1 solve finished without converging,
//! 2 configuration or input error, 3 solver/runtime error.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::AppError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "denseq",
    version,
    about = "Volumetric density-equalizing reference maps"
)]
struct Cli {
    /// Worker thread count (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the equalizing solve and write its artifacts.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for artifacts.
        #[arg(long)]
        out: PathBuf,
        /// Replicate the paper's scaling study: kappa = L/64.
        #[arg(long)]
        table1_mode: bool,
    },
    /// Regenerate the mismatch report from stored artifacts.
    Report {
        /// Stored reference map (xi_final.field).
        xi: PathBuf,
        /// Stored prescribed density on the solve grid (rho0.field).
        rho0: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve, then deform a surface mesh through the forward map.
    Deform {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        table1_mode: bool,
    },
    /// Solve with snapshots, then emit one deformed mesh per snapshot.
    Morph {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        table1_mode: bool,
    },
    /// Solve, then map a uniform point set back to the reference domain.
    RemeshMap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        table1_mode: bool,
    },
}

fn run(cli: Cli) -> Result<(), AppError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| AppError::Input(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Solve {
            config,
            out,
            table1_mode,
        } => {
            let config = config::load_run_config(&config)?;
            commands::run_solve(&config, &out, table1_mode)
        }
        Command::Report { xi, rho0, out } => commands::run_report(&xi, &rho0, &out),
        Command::Deform {
            config,
            mesh,
            out,
            table1_mode,
        } => {
            let config = config::load_run_config(&config)?;
            commands::run_deform(&config, &mesh, &out, table1_mode)
        }
        Command::Morph {
            config,
            mesh,
            out,
            table1_mode,
        } => {
            let config = config::load_run_config(&config)?;
            commands::run_morph(&config, &mesh, &out, table1_mode)
        }
        Command::RemeshMap {
            config,
            points,
            out,
            table1_mode,
        } => {
            let config = config::load_run_config(&config)?;
            commands::run_remesh_map(&config, &points, &out, table1_mode)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
