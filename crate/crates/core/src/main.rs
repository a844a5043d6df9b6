use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ellipnet::config::ExperimentConfig;
use ellipnet::pipeline::{cmd_certify, cmd_netgrow, cmd_perturb_sweep, cmd_solve, Outcome, PipelineError};

#[derive(Parser)]
#[command(name = "ellipnet", version, about = "Spectral descent, perturbation checks and network-growth audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run descent and write trace.csv, eigenpairs.csv and bound_report.json.
    Solve(Common),
    /// Run the perturbation checks and write sweep.json.
    PerturbSweep(Common),
    /// Grow the iterate networks and write counts.csv and graph.json.
    Netgrow(Common),
    /// Run the full pipeline and write certificate.json.
    Certify(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

const DEFAULT_OUT: &str = "ellipnet-out";

type Handler = fn(&ExperimentConfig) -> Result<Outcome, PipelineError>;

fn run(cli: Cli) -> Result<Outcome, PipelineError> {
    let (common, cmd): (&Common, Handler) = match &cli.command {
        Command::Solve(c) => (c, cmd_solve),
        Command::PerturbSweep(c) => (c, cmd_perturb_sweep),
        Command::Netgrow(c) => (c, cmd_netgrow),
        Command::Certify(c) => (c, cmd_certify),
    };
    let cfg = ExperimentConfig::load(&common.config)?
        .with_overrides(common.out.as_ref().map(|p| p.display().to_string()), common.seed);
    let outcome = cmd(&cfg)?;
    let dir = PathBuf::from(cfg.out.as_deref().unwrap_or(DEFAULT_OUT));
    outcome.write(&dir)?;
    Ok(outcome)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            if outcome.violations.is_empty() {
                ExitCode::SUCCESS
            } else {
                for v in &outcome.violations {
                    eprintln!("invariant violation: {v}");
                }
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
