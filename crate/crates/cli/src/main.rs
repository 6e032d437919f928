use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod error;

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "qlan", version, about = "Entanglement-distribution LAN simulator and analysis tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate timetag streams for every link and setting of a config.
    Simulate(SimulateArgs),
    /// Find the delay between two QLTT streams and count coincidences.
    Correlate(CorrelateArgs),
    /// Bayesian two-qubit tomography from a counts table.
    Tomo(TomoArgs),
    /// Choose a channel allocation for the configured links.
    Allocate(AllocateArgs),
    /// Joint spectral intensity and coincidence-to-accidental ratio.
    Jsi(JsiArgs),
    /// Full pipeline: simulate, correlate, reconstruct, and run RSP tasks.
    Run(RunArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct CorrelateArgs {
    pub first: PathBuf,
    pub second: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    pub window_ns: f64,
    /// delays searched, in clock bins either side of zero
    #[arg(long, default_value_t = 2000)]
    pub span_bins: u64,
    #[arg(long, default_value_t = qlan::coincidence::DEFAULT_NUM_SHIFTS)]
    pub shifts: usize,
    /// integration time for rates; defaults to the span of the streams
    #[arg(long)]
    pub duration_s: Option<f64>,
    /// write the delay histogram as CSV
    #[arg(long)]
    pub histogram: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TomoArgs {
    /// CSV with columns setting1,setting2,count
    pub counts: PathBuf,
    #[arg(long, default_value_t = 60.0)]
    pub integration_s: f64,
    #[arg(long, default_value_t = qlan::tomography::DEFAULT_NUM_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// psi-plus, psi-minus, phi-plus or phi-minus
    #[arg(long, default_value = "psi-plus")]
    pub target: String,
    /// write fidelity, log-negativity and ebit rate per posterior sample
    #[arg(long)]
    pub samples_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AllocateArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// max-min-re, max-total-re or min-fidelity-floor=F
    #[arg(long, default_value = "max-min-re")]
    pub objective: String,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct JsiArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Poisson seed; without it the expected counts are reported
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    #[arg(short, long, default_value = "qlan-run")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub window_ns: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("QLAN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Validation(format!("QLAN_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Correlate(a) => commands::correlate(&a),
        Command::Tomo(a) => commands::tomo(&a),
        Command::Allocate(a) => commands::allocate(&a),
        Command::Jsi(a) => commands::jsi(&a),
        Command::Run(a) => commands::run(&a),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
