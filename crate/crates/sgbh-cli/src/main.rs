//! Command-line driver: one subcommand per experiment, a TOML config per
//! run, plot-ready files out.
//!
//! Exit codes: 0 every audit passed, 1 an audit failed, 2 invalid
//! configuration or arguments, 3 the solution diverged.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sgbh::config::{Experiment, ExperimentConfig};
use sgbh::error::Error;
use sgbh::experiment;

#[derive(Parser)]
#[command(
    name = "sgbh",
    about = "Spectral Galerkin simulator and ergodicity audits for the stochastic \
             generalized Burgers-Huxley equation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate trajectories and write occupation histograms.
    Simulate(RunArgs),
    /// Audit the energy-equality defect across a dt-halving ladder.
    VerifyEnergy(RunArgs),
    /// Long-run occupation averages, mixing check and tightness table.
    Invariant(RunArgs),
    /// Exponential-moment and first-moment bound audits.
    ExpMoment(RunArgs),
    /// Hyper-exponential recurrence tails.
    Recurrence(RunArgs),
    /// Exact-controllability construction and steering verification.
    Control(RunArgs),
    /// First-variation consistency and gain audits.
    Variation(RunArgs),
    /// Galerkin refinement of the energy functional.
    Refine(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config when given.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config when given.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker pool size; 0 picks the machine default. Falls back to the
    /// SGBH_WORKERS environment variable.
    #[arg(long)]
    workers: Option<usize>,
    /// Run even when the parameter regime or noise spectrum fails the
    /// validation table.
    #[arg(long)]
    override_regime: bool,
    /// Sweep a scalar config field instead of running once.
    #[arg(long, requires = "sweep_values")]
    sweep_axis: Option<String>,
    /// Comma-separated values for the sweep axis.
    #[arg(long, value_delimiter = ',', requires = "sweep_axis")]
    sweep_values: Option<Vec<f64>>,
}

impl Command {
    fn experiment(&self) -> Experiment {
        match self {
            Command::Simulate(_) => Experiment::Simulate,
            Command::VerifyEnergy(_) => Experiment::VerifyEnergy,
            Command::Invariant(_) => Experiment::Invariant,
            Command::ExpMoment(_) => Experiment::ExpMoment,
            Command::Recurrence(_) => Experiment::Recurrence,
            Command::Control(_) => Experiment::Control,
            Command::Variation(_) => Experiment::Variation,
            Command::Refine(_) => Experiment::Refine,
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Simulate(a)
            | Command::VerifyEnergy(a)
            | Command::Invariant(a)
            | Command::ExpMoment(a)
            | Command::Recurrence(a)
            | Command::Control(a)
            | Command::Variation(a)
            | Command::Refine(a) => a,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("{}", err.diagnostic());
            match err {
                Error::Diverged { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: &Cli) -> sgbh::Result<bool> {
    let args = cli.command.args();
    let mut cfg = ExperimentConfig::load(&args.config)?;
    cfg.experiment = cli.command.experiment();
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if args.override_regime {
        cfg.override_regime = true;
    }
    let workers = args
        .workers
        .or_else(|| std::env::var("SGBH_WORKERS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0);

    if let (Some(axis), Some(values)) = (&args.sweep_axis, &args.sweep_values) {
        let outcome = experiment::sweep(&cfg, axis, values, workers)?;
        println!(
            "sweep over {axis}: {}/{} values passed -> {}",
            outcome.rows.iter().filter(|r| r.pass).count(),
            outcome.rows.len(),
            outcome.output_dir.join("sweep.csv").display()
        );
        Ok(outcome.pass)
    } else {
        let outcome = experiment::run(&cfg, workers)?;
        println!(
            "{}: {} (headline {:.6e}) -> {}",
            cfg.experiment.name(),
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.headline,
            outcome.output_dir.join("report.json").display()
        );
        Ok(outcome.pass)
    }
}
