use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpm_ope::dpm::BinningStrategy;
use dpm_ope::error::{Error, Result};
use dpm_ope::estimators::Estimator;
use dpm_ope::pipeline::{self, AblationSpec, ExperimentConfig};

/// Off-policy evaluation for deterministic auction logs.
#[derive(Parser)]
#[command(name = "dpm-ope", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set simulation.seed=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate logs and ground truth.
    Simulate(Common),
    /// Fit models, estimate every policy and score the estimates.
    Evaluate(Common),
    /// Write the daily trend data and markdown summary.
    Report(Common),
    /// Run a binning x estimator grid over replicated simulations.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated binnings, e.g. `100,1000,10000,adaptive`.
        #[arg(long, value_delimiter = ',', default_value = "adaptive")]
        bins: Vec<String>,
        /// Comma-separated estimators, e.g. `ips,snips,capped`.
        #[arg(long, value_delimiter = ',', default_value = "capped")]
        estimators: Vec<String>,
        #[arg(long, default_value_t = 30)]
        replications: usize,
    },
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&c.config, &c.overrides)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => pipeline::run_simulate(&load(&c)?),
        Command::Evaluate(c) => {
            let config = load(&c)?;
            pipeline::run_evaluate(&config)?;
            let summary = config.output_dir.join(pipeline::SUMMARY_FILE);
            print!("{}", std::fs::read_to_string(&summary).map_err(|e| Error::Io { path: summary, source: e })?);
            Ok(())
        }
        Command::Report(c) => pipeline::run_report(&load(&c)?),
        Command::Ablate {
            common,
            bins,
            estimators,
            replications,
        } => {
            let config = load(&common)?;
            let spec = AblationSpec {
                bins: bins.iter().map(|b| b.parse()).collect::<Result<Vec<BinningStrategy>>>()?,
                estimators: estimators.iter().map(|e| e.parse()).collect::<Result<Vec<Estimator>>>()?,
                replications,
            };
            let result = pipeline::run_ablate(&config, &spec)?;
            print!("{}", pipeline::ablation_text(&result, &config));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DPM_OPE_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
