use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use cyclemarket::realtime::RealTimeMode;
use cyclemarket_cli::{load_config, load_demand, run, sweep};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Aware,
    Unaware,
}

impl From<Mode> for RealTimeMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Aware => RealTimeMode::Aware,
            Mode::Unaware => RealTimeMode::Unaware,
        }
    }
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Market config (JSON). Defaults to the case study with E = 50 MWh, B = 150 $/kWh.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Demand CSV (timestamp,forecast_mw,actual_mw). Defaults to the bundled fixture.
    #[arg(long)]
    demand: Option<PathBuf>,
    /// Real-time mechanism; overrides the config.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Reserved; the pipeline is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Parser)]
#[command(
    name = "cyclemarket",
    version,
    about = "Two-stage electricity market with cycle-depth storage bidding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// One two-stage simulation: run_summary.csv and trace.csv.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Sweep storage capital cost or capacity: sweep.csv plus SVG charts.
    Sweep {
        /// Sweep spec (JSON): {"axis": "B"|"E", "values": [...], "fixed": {...}}.
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { common } => {
            let config = load_config(common.config.as_deref())?;
            let scenario = load_demand(common.demand.as_deref())?;
            let mode = common.mode.map(RealTimeMode::from).unwrap_or(config.mode);
            log::debug!("seed {} (unused)", common.seed);
            let res = run::cmd_run(&config, &scenario, mode, &common.out)?;
            let c = &res.check;
            println!(
                "social cost {:.2} (planner bounds {:.2} .. {:.2}), within bounds: {}",
                c.cost, c.cost_lower, c.cost_upper, c.cost_holds
            );
            println!("wrote {}", common.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            spec,
            common,
            parallel,
        } => {
            let spec = sweep::SweepSpec::load(&spec)?;
            let config = load_config(common.config.as_deref())?;
            let scenario = load_demand(common.demand.as_deref())?;
            let mode = common.mode.map(RealTimeMode::from).unwrap_or(config.mode);
            log::debug!("seed {} (unused)", common.seed);
            let rows = sweep::cmd_sweep(&spec, &config, &scenario, mode, parallel, &common.out)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!(
                "{} rows, {failed} failed; wrote {}",
                rows.len(),
                common.out.display()
            );
            Ok(if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}
