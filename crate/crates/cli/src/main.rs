use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use mfstab::gibbs::CheckStatus;
use mfstab::harness::{CheckKind, Harness, ResultRecord, RunOptions};
use mfstab::{config::RunConfig, Error};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;

/// Stability experiments for mean-field particle systems on the unit torus.
#[derive(Parser)]
#[command(name = "mfstab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory (overrides [output] directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides [monte_carlo] seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (overrides [monte_carlo] workers).
    #[arg(long)]
    workers: Option<usize>,
    /// Also write both trajectories of the first sample.
    #[arg(long)]
    dump_trajectories: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate Q(t) for the configured shift.
    Qcurve(Common),
    /// Partition-function and marginal density bounds.
    CheckGibbs(Common),
    /// Shifted-measure density ratio against its bound.
    CheckShift(Common),
    /// Potential derivative bounds and force consistency.
    CheckPotential(Common),
    /// Velocity shift at -tau, evolved forward to 0, then Q(t).
    PositionRecipe {
        #[command(flatten)]
        common: Common,
        /// Pre-evolution time (overrides [recipe] tau).
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Q(t) over the cross product of the [sweep] lists.
    Sweep(Common),
}

fn harness(c: &Common) -> mfstab::Result<Harness> {
    let loaded = RunConfig::load(&c.config)?;
    Harness::new(
        loaded,
        RunOptions {
            out_dir: c.out.clone(),
            seed: c.seed,
            workers: c.workers,
            dump_trajectories: c.dump_trajectories,
        },
    )
}

fn run(cmd: Command) -> mfstab::Result<ResultRecord> {
    match cmd {
        Command::Qcurve(c) => harness(&c)?.run_qcurve(),
        Command::CheckGibbs(c) => harness(&c)?.run_checks(CheckKind::Gibbs),
        Command::CheckShift(c) => harness(&c)?.run_checks(CheckKind::Shift),
        Command::CheckPotential(c) => harness(&c)?.run_checks(CheckKind::Potential),
        Command::PositionRecipe { common, tau } => harness(&common)?.run_position_shift_recipe(tau),
        Command::Sweep(c) => harness(&c)?.run_sweep(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(rec) => {
            println!(
                "{}: status {:?}, {:.2}s, config_sha256 {}",
                rec.command, rec.status, rec.wall_clock_seconds, rec.config_sha256
            );
            for f in &rec.files {
                println!("  wrote {f}");
            }
            for (reason, count) in &rec.rejections {
                println!("  rejected {count} sample(s): {reason}");
            }
            match rec.status {
                CheckStatus::Fail => ExitCode::from(EXIT_CHECK_FAILED),
                _ => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            error!("{e}");
            match e {
                Error::Config(_) | Error::InvalidParameter(_) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::from(EXIT_RUNTIME),
            }
        }
    }
}
