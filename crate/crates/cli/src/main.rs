use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use measure_steer::scenario::Backend;
use measure_steer::{run, CommandKind, RunConfig};

#[derive(Parser)]
#[command(
    name = "measure-steer",
    version,
    about = "Steer measure-valued ensembles with a shared bang-bang control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sampled-feedback improvement loop and write its ledger,
    /// final control, and terminal frames
    Solve(CommonArgs),
    /// Transport every population under a fixed control and write frames
    Simulate(CommonArgs),
    /// Evaluate the switching vector and extremality residual of a control
    #[command(name = "check-pmp")]
    CheckPmp(CommonArgs),
    /// Convert image-sourced populations into empirical-measure CSV
    Ingest(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario file path or built-in name (example1 | crossring | mnist36)
    #[arg(long)]
    scenario: String,
    /// Directory the artifacts are written into
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the scenario's backend (grid | particles)
    #[arg(long)]
    backend: Option<String>,
    /// Override the scenario's random seed
    #[arg(long)]
    seed: Option<u64>,
    /// Piecewise-constant control CSV (t_start,t_end,u1..um) used instead
    /// of the scenario's constant guess
    #[arg(long)]
    control: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Solve(a) => (CommandKind::Solve, a),
        Command::Simulate(a) => (CommandKind::Simulate, a),
        Command::CheckPmp(a) => (CommandKind::CheckPmp, a),
        Command::Ingest(a) => (CommandKind::Ingest, a),
    };
    let backend = match args.backend.as_deref() {
        None => None,
        Some(word) => match Backend::parse(word) {
            Some(b) => Some(b),
            None => {
                eprintln!("error: --backend must be grid or particles, got `{word}`");
                return ExitCode::from(2);
            }
        },
    };
    let cfg = RunConfig {
        command: kind,
        scenario: args.scenario,
        out: args.out,
        backend,
        seed: args.seed,
        control: args.control,
    };
    match run(&cfg) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
