//! `bridgekit`: batch front end for the Schrödinger system and h-path bridge tools.

mod commands;
mod config;
mod error;
mod io;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::commands::{PdeOptions, SimulateOptions};
use crate::error::{CliError, CliResult, EXIT_NUMERICAL, EXIT_USAGE, EXIT_VALIDATION};

#[derive(Parser)]
#[command(name = "bridgekit", version, about = "Schrödinger system solver and h-path bridge toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the Schrödinger system for a problem config.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "solution.json")]
        out: PathBuf,
        /// Also write per-point marginals, factors and potentials as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run a perturbation family and fit the square-root envelope.
    Stability {
        /// Problem config; a bundled Gaussian instance is used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Solve on increasing boxes and compare with the full-grid coupling.
    Exhaustion {
        #[arg(long)]
        config: PathBuf,
        /// Box half-widths around the centre.
        #[arg(long, value_delimiter = ',')]
        windows: Option<Vec<f64>>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Build an h-path bridge model.
    Bridge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "model.json")]
        out: PathBuf,
    },
    /// Finite-difference residuals of the backward, Fokker–Planck and HJB equations.
    PdeCheck {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "residuals.csv")]
        out: PathBuf,
        /// JSON summary of the residual tables.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Times at which the mean-field residuals are evaluated.
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75")]
        centres: Vec<f64>,
        /// Keep every k-th backward-residual time row.
        #[arg(long, default_value_t = 1)]
        time_stride: usize,
    },
    /// Simulate bridge paths and check their marginals and control cost.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "ensemble-summary.json")]
        out: PathBuf,
        /// Write trajectories as little-endian binary (u64 header n_paths, n_records, d; then f64 states).
        #[arg(long)]
        trajectories: Option<PathBuf>,
        /// Record every k-th step (1 when trajectories are written).
        #[arg(long)]
        record_stride: Option<usize>,
        #[arg(long)]
        noise_refinement: Option<usize>,
        /// Multiplier on the bridge control; 1 simulates the bridge itself.
        #[arg(long, default_value_t = 1.0)]
        control_scale: f64,
        /// TV threshold for the marginal checks.
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
    },
    /// Gâteaux derivative of the conjugate value at log h(1, ·) along a test function.
    DualityCheck {
        #[arg(long)]
        model: PathBuf,
        /// One value per grid point: JSON array or the last column of a CSV file.
        #[arg(long)]
        psi: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1e-2,1e-3,1e-4")]
        eps: Vec<f64>,
        #[arg(long, default_value = "duality.json")]
        out: PathBuf,
    },
    /// Run the built-in suite of exactly known cases.
    Selftest,
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("BRIDGEKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::invalid("BRIDGEKIT_THREADS", format!("expected a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::invalid("BRIDGEKIT_THREADS", e.to_string()))
}

fn run_selftest() -> i32 {
    let mut failed = 0;
    for (name, check) in selftest::checks() {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {name}: {msg}");
            }
        }
    }
    if failed == 0 {
        0
    } else {
        EXIT_NUMERICAL
    }
}

fn dispatch(cmd: Command) -> CliResult<i32> {
    configure_threads()?;
    match cmd {
        Command::Solve { config, out, csv } => commands::solve(&config, &out, csv.as_deref())?,
        Command::Stability { config, family, levels, out } => {
            commands::stability(config.as_deref(), family.as_deref(), levels, &out)?
        }
        Command::Exhaustion { config, windows, out } => commands::exhaustion(&config, windows, &out)?,
        Command::Bridge { config, out } => commands::bridge(&config, &out)?,
        Command::PdeCheck { model, out, summary, centres, time_stride } => {
            commands::pde_check(&model, &out, summary.as_deref(), &PdeOptions { centres, time_stride })?
        }
        Command::Simulate {
            model,
            paths,
            dt,
            seed,
            out,
            trajectories,
            record_stride,
            noise_refinement,
            control_scale,
            threshold,
        } => commands::simulate(
            &model,
            &out,
            &SimulateOptions { paths, dt, seed, record_stride, noise_refinement, control_scale, threshold, trajectories },
        )?,
        Command::DualityCheck { model, psi, eps, out } => commands::duality_check(&model, &psi, &eps, &out)?,
        Command::Selftest => return Ok(run_selftest()),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    return ExitCode::SUCCESS;
                }
                ErrorKind::InvalidSubcommand
                | ErrorKind::MissingSubcommand
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    return ExitCode::from(EXIT_USAGE as u8);
                }
                _ => EXIT_VALIDATION,
            };
            let err = CliError::invalid("arguments", e.render().to_string().trim_end());
            eprintln!("{}", err.to_json());
            return ExitCode::from(code as u8);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
