use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use supe_anova::pipeline::{self, CliOverrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "supe-anova",
    version,
    about = "Weighted consensus estimation for multi-model ensembles"
)]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,

    /// Input CSV path.
    #[arg(long, global = true)]
    input: Option<PathBuf>,

    /// Output directory (default: $SUPE_ANOVA_OUTPUT or ./out).
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Observation type filter for the ensemble input (IS, LN, LG).
    #[arg(long, global = true)]
    obs_type: Option<String>,

    /// Grouping source: "auto" or a grouping table path.
    #[arg(long, global = true)]
    grouping: Option<String>,

    /// Seed for estimation restarts and simulation.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Cluster factors into variance-sharing groups.
    Cluster,
    /// Estimate variance parameters by penalized restricted likelihood.
    Fit,
    /// Consensus means and predictions with intervals (needs a fit).
    Predict,
    /// Per-team weight tables (needs a fit).
    Weights,
    /// Standardized errors, quantile-quantile export, and comparison with
    /// the unweighted mean (needs a fit).
    Diagnose,
    /// Sum consensus and unweighted fluxes over region/month selections
    /// (needs a fit).
    Aggregate,
    /// Verification-informed posterior team weights (needs a fit).
    Bma,
    /// Generate a synthetic ensemble and run its Monte Carlo studies.
    Simulate,
}

impl From<&CliCommand> for pipeline::Command {
    fn from(value: &CliCommand) -> Self {
        match value {
            CliCommand::Cluster => pipeline::Command::Cluster,
            CliCommand::Fit => pipeline::Command::Fit,
            CliCommand::Predict => pipeline::Command::Predict,
            CliCommand::Weights => pipeline::Command::Weights,
            CliCommand::Diagnose => pipeline::Command::Diagnose,
            CliCommand::Aggregate => pipeline::Command::Aggregate,
            CliCommand::Bma => pipeline::Command::Bma,
            CliCommand::Simulate => pipeline::Command::Simulate,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(path) => match RunConfig::from_path(path) {
            Ok(config) => config,
            Err(error) => {
                eprintln!("error: {error}");
                return ExitCode::FAILURE;
            }
        },
        None => RunConfig::default(),
    };
    let overrides = CliOverrides {
        input: cli.input.clone(),
        output: cli.output.clone(),
        obs_type: cli.obs_type.clone(),
        grouping: cli.grouping.clone(),
        seed: cli.seed,
        threads: cli.threads,
    };
    match pipeline::run((&cli.command).into(), config, &overrides) {
        Ok(output) => {
            for artifact in &output.artifacts {
                println!("{}", artifact.display());
            }
            ExitCode::SUCCESS
        }
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::FAILURE
        }
    }
}
