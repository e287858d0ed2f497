//! `pairlink` command-line front end.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pairlink_core::config::SCHEMA;

#[derive(Parser, Debug)]
#[command(name = "pairlink", version, about = "Entanglement distribution simulator and analyzer")]
struct Cli {
    /// Print every configuration key with its default and exit.
    #[arg(long)]
    help_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a two-node run and write alice.ptag, bob.ptag and manifest.json.
    Simulate(SimulateArgs),
    /// Recover the offset, track drift and correct Bob's tags.
    Sync(SyncArgs),
    /// Count coincidences and accidentals between two tag files.
    Coincide(CoincideArgs),
    /// Run the four-setting CHSH experiment.
    Chsh(ChshArgs),
    /// Fit `a·P² + b·P + c` to a power sweep CSV.
    Ratefit(RatefitArgs),
    /// Simulate a local power sweep and fit it.
    Sweep(ChshArgs),
    /// Local CC and CAR over every configured channel pair.
    Spectrum(ChshArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Default)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML, or JSON by extension).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; defaults to the configured one.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Coincidence window in ps.
    #[arg(long, value_name = "N")]
    window_ps: Option<u64>,
    /// Tabular export format. A JSON summary is always written.
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Overrides the configured duration in seconds.
    #[arg(long, value_name = "S")]
    duration: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SyncArgs {
    #[command(flatten)]
    common: Common,
    alice: PathBuf,
    bob: PathBuf,
    /// Also write the corrected Bob stream as bob_corrected.ptag.
    #[arg(long)]
    write_corrected: bool,
}

#[derive(Args, Debug)]
pub struct CoincideArgs {
    #[command(flatten)]
    common: Common,
    alice: PathBuf,
    bob: PathBuf,
    /// Fixed delay t_B − t_A in ps. Without it the delay comes from the
    /// initial-offset scan of the first second.
    #[arg(long, value_name = "N", allow_negative_numbers = true)]
    delay_ps: Option<i64>,
    /// Also write a delay histogram of ±N ps around the delay.
    #[arg(long, value_name = "N")]
    scan_ps: Option<u64>,
    /// Histogram bin width in ps; defaults to the tag resolution.
    #[arg(long, value_name = "N")]
    bin_ps: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ChshArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
pub struct RatefitArgs {
    #[command(flatten)]
    common: Common,
    /// CSV with columns power_mw,rate_hz,which[,duration_s].
    sweep: PathBuf,
    /// Weight each rate by its inverse Poisson variance.
    #[arg(long)]
    poisson: bool,
    /// Constrain a, b and c to be non-negative.
    #[arg(long)]
    non_negative: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.help_config {
        print!("{SCHEMA}");
        return ExitCode::SUCCESS;
    }
    if let Err(e) = commands::init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let Some(command) = cli.command else {
        eprintln!("error: no subcommand given; see `pairlink --help`");
        return ExitCode::from(2);
    };
    let result = match command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Sync(a) => commands::sync(&a),
        Command::Coincide(a) => commands::coincide(&a),
        Command::Chsh(a) => commands::chsh(&a.common),
        Command::Ratefit(a) => commands::ratefit(&a),
        Command::Sweep(a) => commands::sweep(&a.common),
        Command::Spectrum(a) => commands::spectrum(&a.common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
