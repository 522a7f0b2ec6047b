//! Command line driver: trajectory tracing, saddle scans, period integrals,
//! Volterra benchmarks, section/coordinate assembly, the coordinate integral
//! equation, metric extraction and decay sweeps, plus a deterministic
//! self-test.
//!
//! Exit codes: 0 success, 2 validation failure, 3 numerical failure,
//! 64 unknown command.

mod commands;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "hktwist", version, about = "Trajectories, coordinates and twistorial metrics at desk scale", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts (default: current directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for the synthetic error profiles.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps (0 = automatic).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Chatty progress output.
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Trace trajectories from the configured seed points.
    Trace,
    /// The three critical trajectories of a zero.
    Separatrices,
    /// Scan an angle grid for saddle connections.
    Saddles,
    /// Period integrals over the configured cycles.
    Periods,
    /// Solve the benchmark initial value problem at infinity.
    Volterra,
    /// Small flat sections along the bundled quadrilateral.
    Sections,
    /// The canonical coordinate, its leading term and remainder.
    Xcoord,
    /// Solve the coordinate integral equation on the BPS rays.
    Tba,
    /// Extract the twistorial metric at a patch point.
    Metric,
    /// Sweep R and fit the decay rate toward the semiflat metric.
    DecaySweep,
    /// Deterministic self test writing reference artifacts.
    Selftest,
}

/// Exit code for numerical failures (non-contraction, divergence).
pub const EXIT_NUMERICAL: u8 = 3;
/// Exit code for validation failures.
pub const EXIT_VALIDATION: u8 = 2;
/// Exit code for unknown commands / usage errors.
pub const EXIT_USAGE: u8 = 64;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    return ExitCode::SUCCESS;
                }
                ErrorKind::InvalidSubcommand | ErrorKind::UnknownArgument => EXIT_USAGE,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    if cli.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }

    let ctx = commands::Context {
        config_path: cli.config,
        out_dir: cli.out.unwrap_or_else(|| PathBuf::from(".")),
        seed: cli.seed,
        verbose: cli.verbose,
    };

    let result = match cli.command {
        Command::Trace => commands::trace(&ctx),
        Command::Separatrices => commands::separatrices(&ctx),
        Command::Saddles => commands::saddles(&ctx),
        Command::Periods => commands::periods(&ctx),
        Command::Volterra => commands::volterra(&ctx),
        Command::Sections => commands::sections(&ctx),
        Command::Xcoord => commands::xcoord(&ctx),
        Command::Tba => commands::tba(&ctx),
        Command::Metric => commands::metric(&ctx),
        Command::DecaySweep => commands::decay_sweep(&ctx),
        Command::Selftest => commands::selftest(&ctx),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
