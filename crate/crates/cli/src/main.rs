//! `alfg`: runs the pose-estimation, rotation-synchronisation and MPC
//! experiments and writes one CSV plus a JSON manifest per run.

mod commands;
mod config;
mod error;
mod output;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "alfg", version, about = "Constrained factor-graph experiments")]
struct Cli {
    /// Plain-text `key = value` defaults for the subcommand's flags; flags
    /// given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte Carlo comparison of free and circle-constrained SE(2) estimates.
    #[command(args_override_self = true)]
    PoseEst(PoseArgs),
    /// Rotation synchronisation: rotation constraints against SVD projection.
    #[command(args_override_self = true)]
    RotSync(SyncArgs),
    /// Receding-horizon control of the platform through a goal list.
    #[command(args_override_self = true)]
    Mpc(MpcArgs),
    /// Per-goal travel-time and solve-time summary of an `mpc` CSV.
    #[command(args_override_self = true)]
    Plot(PlotArgs),
    /// KKT, finite-difference, slack grid-scan and RK4 property suites.
    #[command(args_override_self = true)]
    Selftest(SelftestArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::PoseEst(_) => "pose-est",
            Command::RotSync(_) => "rot-sync",
            Command::Mpc(_) => "mpc",
            Command::Plot(_) => "plot",
            Command::Selftest(_) => "selftest",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PoseArgs {
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Odometry heading θ₀ (rad).
    #[arg(long, default_value_t = 0.5)]
    pub theta0: f64,
    /// Forward speed (m/s).
    #[arg(long, default_value_t = 1.0)]
    pub v: f64,
    /// Travel time (s).
    #[arg(long = "T", default_value_t = 1.0)]
    pub travel_time: f64,
    #[arg(long, default_value_t = 10.0)]
    pub omega_odom: f64,
    #[arg(long, default_value_t = 20.0)]
    pub omega_gps: f64,
    /// GPS noise standard deviation [default: 1/√omega-gps].
    #[arg(long)]
    pub gps_sigma: Option<f64>,
    /// [default: pose-est.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SyncArgs {
    /// Number of rotations.
    #[arg(long, default_value_t = 99)]
    pub n: usize,
    /// Measurement information ‖Ω‖∞, e.g. 1e3, 5e3 or 1e4.
    #[arg(long, default_value_t = 1e4)]
    pub omega: f64,
    /// Seed of the first run; run r uses seed + r.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// Start from random rotations instead of the identity.
    #[arg(long)]
    pub random_init: bool,
    /// Measurement file (`i j` then 9 row-major entries then ω per line);
    /// replaces the synthetic generator, so error columns stay empty.
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// [default: rot-sync.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    /// Slack-variable active-set penalty `max(g, −μ/2ρ)`.
    Slack,
    /// `μᵀg + ‖max(0, g)‖²` penalty.
    Maxpen,
}

#[derive(Debug, Args, Serialize)]
pub struct MpcArgs {
    /// Goal file, one `g_x g_y g_theta` per line [default: built-in 3-goal loop].
    #[arg(long, value_name = "FILE")]
    pub goals: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Formulation::Slack)]
    pub formulation: Formulation,
    /// Horizon knots T.
    #[arg(long, default_value_t = 20)]
    pub horizon: usize,
    /// Control period (s).
    #[arg(long, default_value_t = 0.1)]
    pub dt: f64,
    /// Half track length (m) [default: 0.5]; overrides the limits file.
    #[arg(long)]
    pub d: Option<f64>,
    /// `key = value` limits: omega_max, dv_max, dphi_max, domega_max, d.
    #[arg(long, value_name = "FILE")]
    pub limits: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5000)]
    pub max_epochs: usize,
    /// Standard deviation of Gaussian noise on the plant state per period.
    #[arg(long, default_value_t = 0.0)]
    pub plant_noise: f64,
    /// Write zero solve times so identical runs give identical bytes.
    #[arg(long)]
    pub no_timing: bool,
    /// [default: mpc.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PlotArgs {
    /// CSV written by `mpc`.
    #[arg(long, default_value = "mpc.csv", value_name = "FILE")]
    pub input: PathBuf,
    /// [default: plot.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// [default: selftest.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses argv, folding in the config file when one is named.
fn parse(argv: Vec<OsString>) -> CliResult<Cli> {
    let usage = |e: clap::Error| match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => CliError::Help(e.to_string()),
        _ => CliError::Usage(e.to_string()),
    };
    let first = Cli::try_parse_from(&argv).map_err(usage)?;
    let Some(path) = first.config.clone() else {
        return Ok(first);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    let name = first.command.name();
    let root = Cli::command();
    let sub = root
        .find_subcommand(name)
        .ok_or_else(|| CliError::Usage(format!("unknown subcommand {name}")))?;
    let extra = config::config_args(&text, &path, sub)?;
    let merged = config::splice(&argv, name, extra)?;
    Cli::try_parse_from(merged).map_err(usage)
}

fn solver_threads() -> CliResult<usize> {
    match std::env::var("CFG_SOLVER_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("CFG_SOLVER_THREADS must be a non-negative integer, got `{v}`"))),
        _ => Ok(0),
    }
}

fn run(argv: Vec<OsString>) -> CliResult<()> {
    let cli = parse(argv)?;
    let threads = solver_threads()?;
    let config_file = cli.config.as_deref();
    match &cli.command {
        Command::PoseEst(a) => commands::pose_est(a, config_file, threads),
        Command::RotSync(a) => commands::rot_sync(a, config_file, threads),
        Command::Mpc(a) => commands::mpc(a, config_file),
        Command::Plot(a) => commands::plot(a, config_file),
        Command::Selftest(a) => commands::selftest(a, config_file),
    }
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Help(text)) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("alfg: {}", e.to_string().trim_end());
            ExitCode::from(e.exit_code())
        }
    }
}
