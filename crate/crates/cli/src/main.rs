mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prac_core::train::CompressionMode;

use crate::config::{ConfigError, ExperimentConfig, LoadedConfig};

/// Subspace-projection activation compression experiments.
#[derive(Debug, Parser)]
#[command(name = "prac", version)]
struct Cli {
    /// JSON experiment config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Artifact directory (overrides PRAC_OUTPUT_DIR and the config).
    #[arg(long, global = true, env = "PRAC_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,

    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Singular spectrum and degeneracy summary of a matrix fixture.
    ProfileSpectrum,
    /// Monte Carlo checks of reconstruction and gradient estimators.
    EstimatorTest(TrialArgs),
    /// Monte Carlo check of the random-basis second moment.
    ProjectorMoment(TrialArgs),
    /// Train the toy MLP block under a compression policy.
    Train(TrainArgs),
    /// Biased, maximum-selection and unbiased SGD on the two-coordinate example.
    Counterexample(StepArgs),
    /// Constant-step SGD against the bounded-variance convergence bound.
    SgdBound,
    /// Closed-form activation memory ledger, optionally reconciled with a run.
    MemoryReport(MemoryArgs),
    /// Train with several scaling-factor multipliers.
    KSweep(TrainArgs),
}

#[derive(Debug, Args)]
struct TrialArgs {
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Debug, Args)]
struct StepArgs {
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<u64>,
    /// none, pac, rac or prac.
    #[arg(long)]
    mode: Option<CompressionMode>,
}

#[derive(Debug, Args)]
struct MemoryArgs {
    /// none, pac, rac or prac.
    #[arg(long)]
    mode: Option<CompressionMode>,
    /// Output directory of a prior `train` run to check against the ledger.
    #[arg(long, value_name = "DIR")]
    reconcile: Option<PathBuf>,
}

/// Why a command did not succeed.
#[derive(Debug)]
pub enum Failure {
    Config(ConfigError),
    /// Named verification checks that failed.
    Checks(Vec<String>),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::Config(e)
    }
}

fn apply_overrides(cli: &Cli, config: &mut ExperimentConfig) {
    if let Some(dir) = &cli.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    match &cli.command {
        Command::EstimatorTest(a) | Command::ProjectorMoment(a) => {
            if let Some(t) = a.trials {
                config.trials = t;
            }
        }
        Command::Train(a) | Command::KSweep(a) => {
            if let Some(s) = a.steps {
                config.steps = s;
            }
            if let Some(m) = a.mode {
                config.policy.mode = m;
            }
        }
        Command::Counterexample(a) => {
            if let Some(s) = a.steps {
                config.counterexample.steps = s;
            }
        }
        Command::MemoryReport(a) => {
            if let Some(m) = a.mode {
                config.policy.mode = m;
            }
        }
        Command::ProfileSpectrum | Command::SgdBound => {}
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let mut loaded: LoadedConfig = config::load(cli.config.as_deref())?;
    apply_overrides(cli, &mut loaded.config);
    let ctx = commands::Context::prepare(&loaded)?;
    match &cli.command {
        Command::ProfileSpectrum => commands::profile_spectrum(&ctx),
        Command::EstimatorTest(_) => commands::estimator_test(&ctx),
        Command::ProjectorMoment(_) => commands::projector_moment(&ctx),
        Command::Train(_) => commands::train(&ctx),
        Command::Counterexample(_) => commands::counterexample(&ctx),
        Command::SgdBound => commands::sgd_bound(&ctx),
        Command::MemoryReport(a) => commands::memory_report(&ctx, a.reconcile.as_deref()),
        Command::KSweep(_) => commands::k_sweep(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Checks(failed)) => {
            for name in &failed {
                eprintln!("FAILED: {name}");
            }
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
