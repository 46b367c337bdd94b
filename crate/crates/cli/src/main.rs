//! `actcache`: calibrate, plan, pack, simulate and sweep hybrid KV/ACT
//! cache configurations.

mod commands;
mod context;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CalibrateArgs, PackArgs, PlanArgs, SimulateArgs, SweepArgs, VerifyArgs};
use context::Context;

#[derive(Debug, Parser)]
#[command(name = "actcache", version, about = "Hybrid KV/activation cache planner and simulator")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
pub struct GlobalArgs {
    /// Experiment config JSON; keys override the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: current directory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Parallel sweep points; 0 uses every core.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Hardware profile JSON; keys override the experiment's profile.
    #[arg(long, global = true)]
    pub profile: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit latency models from synthetic or measured samples.
    Calibrate(CalibrateArgs),
    /// Split host memory into ACT and KV blocks.
    Plan(PlanArgs),
    /// Group requests into mini-batches.
    Pack(PackArgs),
    /// Simulate one batch.
    Simulate(SimulateArgs),
    /// Simulate every mode, batch size and prompt length in the experiment config.
    Sweep(SweepArgs),
    /// Check that rebuilt context reproduces cached-KV generation.
    VerifyNumerics(VerifyArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut ctx = Context::new(&cli.global)?;
    match &cli.command {
        Command::Calibrate(a) => commands::calibrate(&mut ctx, a),
        Command::Plan(a) => commands::plan(&mut ctx, a),
        Command::Pack(a) => commands::pack(&mut ctx, a),
        Command::Simulate(a) => commands::simulate_cmd(&mut ctx, a),
        Command::Sweep(a) => commands::sweep_cmd(&mut ctx, a),
        Command::VerifyNumerics(a) => commands::verify_numerics(&mut ctx, a),
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<actcache::Error>() {
            return e.kind();
        }
        if cause.is::<commands::VerificationFailed>() {
            return "verification";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<serde_json::Error>() || cause.is::<csv::Error>() {
            return "parse";
        }
    }
    "error"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": format!("{e:#}"), "kind": error_kind(&e) });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
