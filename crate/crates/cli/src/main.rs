use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use tailcast::config::ExperimentConfig;
use tailcast::pipeline::{run_command, Command};
use tailcast::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;

#[derive(Parser)]
#[command(name = "tailcast", version, about = "Linear forecasts of fat-tailed growth: simulation, diagnostics, pricing, backtests")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config in key = value form.
    #[arg(long)]
    config: PathBuf,
    /// Overrides panel.master_seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the growth panel and write its forecast records.
    Simulate(Common),
    /// Growth, error and QQ diagnostics with the CG regression.
    Analyze(Common),
    /// Forecast diagnostics on an external panel CSV.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// CSV with header firm_id,fiscal_year,sales_actual,f1_level,f2_level,f2_base.
        #[arg(long)]
        input: PathBuf,
    },
    /// Price a simulated panel and write the return curve.
    Price(Common),
    /// Sharpe surface of the momentum strategy on the priced panel.
    Backtest(Common),
    /// Every artifact of analyze, price and backtest.
    Report(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (common, command) = match cli.command {
        Cmd::Simulate(c) => (c, Command::Simulate),
        Cmd::Analyze(c) => (c, Command::Analyze),
        Cmd::Ingest { common, input } => (common, Command::Ingest(input)),
        Cmd::Price(c) => (c, Command::Price),
        Cmd::Backtest(c) => (c, Command::Backtest),
        Cmd::Report(c) => (c, Command::Report),
    };
    match run(&common, &command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(if e.is_config_error() { EXIT_CONFIG } else { EXIT_DATA })
        }
    }
}

fn run(common: &Common, command: &Command) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.panel.master_seed = seed;
    }
    let summary = run_command(&cfg, command)?;
    info!(
        "{}: wrote {} files to {}",
        command.name(),
        summary.written.len(),
        summary.output_dir.display()
    );
    Ok(())
}
