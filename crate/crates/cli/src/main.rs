use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gatedkan::datagen::RegimeKind;
use gatedkan_cli::experiments::{self, parse_edge};
use gatedkan_cli::{ExperimentConfig, Overrides, Result};

#[derive(Parser)]
#[command(
    name = "gatedkan",
    version,
    about = "Gated KAN forecasting experiments and functional circuits"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, alias = "seed", global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// One of linear_sine, multifreq, threshold_ar, regime_switching, lag_recovery.
    #[arg(long, global = true)]
    regime: Option<RegimeKind>,
    /// Numeric CSV used instead of a synthetic regime.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    /// Gate penalty, or a comma-separated list for the sweep.
    #[arg(long, global = true, value_delimiter = ',')]
    lambda_g: Option<Vec<f64>>,
    /// Comma-separated deletion sizes.
    #[arg(long, global = true, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Random deletion draws per size.
    #[arg(long, global = true)]
    draws: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a regime or CSV and save the model.
    Train,
    /// Forecast the steps after the end of the series.
    Forecast {
        #[arg(long)]
        model: PathBuf,
    },
    /// Dump one edge's circuit.
    Circuit {
        #[arg(long)]
        model: PathBuf,
        /// component:layer:input:output, e.g. resid:0:3:7.
        #[arg(long)]
        edge: String,
    },
    /// Gated, linear-only and KAN-only models on the four regimes.
    Table3,
    /// Attribution against the known lags of the lag regime.
    LagRecovery,
    /// Deletion curves, sanity checks and captured fractions.
    Deletion {
        #[arg(long)]
        model: PathBuf,
    },
    /// Gate utilization over a grid of gate penalties.
    GateSweep,
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seeds: self.seeds.clone(),
            out_dir: self.out_dir.clone(),
            regime: self.regime,
            csv: self.csv.clone(),
            lambda_g: self.lambda_g.clone(),
            ks: self.ks.clone(),
            draws: self.draws,
        }
    }
}

fn run(cli: Cli) -> Result<String> {
    let cfg = ExperimentConfig::resolve(cli.global.config.as_deref(), &cli.global.overrides())?;
    let out = |dir: &std::path::Path| format!("wrote {}", dir.join("report.json").display());
    Ok(match cli.command {
        Command::Train => out(&experiments::train(&cfg)?.body.config.out_dir),
        Command::Forecast { model } => {
            let r = experiments::forecast(&cfg, &model)?;
            let lines: Vec<String> = r
                .body
                .results
                .forecast
                .iter()
                .map(|v| v.iter().map(f64::to_string).collect::<Vec<_>>().join(","))
                .collect();
            lines.join("\n")
        }
        Command::Circuit { model, edge } => {
            out(&experiments::circuit(&cfg, &model, parse_edge(&edge)?)?
                .body
                .config
                .out_dir)
        }
        Command::Table3 => out(&experiments::table3(&cfg)?.body.config.out_dir),
        Command::LagRecovery => out(&experiments::lag_recovery(&cfg)?.body.config.out_dir),
        Command::Deletion { model } => {
            out(&experiments::deletion(&cfg, &model)?.body.config.out_dir)
        }
        Command::GateSweep => out(&experiments::gate_sweep(&cfg)?.body.config.out_dir),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
