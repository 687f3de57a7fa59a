use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use p2flow::config::{ExperimentConfig, ExperimentKind};
use p2flow::error::Error;
use p2flow::runner::run_experiment;

/// Particle-based laboratory for measure-valued diffusions.
#[derive(Parser)]
#[command(name = "p2flow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the image dynamics and emit trajectory snapshots.
    Simulate(RunArgs),
    /// Exact W2 distance between two ensemble files.
    W2(RunArgs),
    /// Martingale tests of the generators.
    GeneratorCheck(RunArgs),
    /// Monte Carlo evaluation of the terminal-value problem.
    FeynmanKac(RunArgs),
    /// Synchronous-coupling contraction experiment.
    Contract(RunArgs),
    /// Dirac-collapse and invariant-measure experiment.
    Collapse(RunArgs),
    /// Fixed-point construction on a short horizon.
    Picard(RunArgs),
}

impl Command {
    fn kind(&self) -> ExperimentKind {
        match self {
            Command::Simulate(_) => ExperimentKind::Simulate,
            Command::W2(_) => ExperimentKind::W2,
            Command::GeneratorCheck(_) => ExperimentKind::GeneratorCheck,
            Command::FeynmanKac(_) => ExperimentKind::FeynmanKac,
            Command::Contract(_) => ExperimentKind::Contract,
            Command::Collapse(_) => ExperimentKind::Collapse,
            Command::Picard(_) => ExperimentKind::Picard,
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Simulate(a)
            | Command::W2(a)
            | Command::GeneratorCheck(a)
            | Command::FeynmanKac(a)
            | Command::Contract(a)
            | Command::Collapse(a)
            | Command::Picard(a) => a,
        }
    }
}

fn run(cli: Cli) -> Result<String, Error> {
    let args = cli.command.args();
    let mut config = ExperimentConfig::load(&args.config)?;
    let kind = cli.command.kind();
    if config.experiment.kind != kind {
        return Err(Error::config(
            "E_KIND",
            format!(
                "configuration is for '{}' but the subcommand is '{}'",
                config.experiment.kind.name(),
                kind.name()
            ),
        ));
    }
    if let Some(seed) = args.seed {
        config.experiment.seed = seed;
    }
    if let Some(out) = &args.out {
        config.output.dir = out.clone();
    }
    let outcome = run_experiment(&config)?;
    Ok(format!(
        "{}\nmanifest: {}",
        outcome.summary,
        config.output.dir.join("manifest.json").display()
    ))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
