use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use moe_forecast_cli::{cmd_ablate, cmd_evaluate, cmd_forecast, cmd_rolling, cmd_train};
use moe_forecast_cli::{Overrides, RunConfig};

/// Adaptive mixture-of-experts forecasting pipeline.
#[derive(Parser)]
#[command(name = "moe-forecast", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML config file; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dataset path (.tsf or .csv).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,

    /// Input format: tsf, csv (wide), or csv-long.
    #[arg(long, global = true)]
    format: Option<String>,

    /// Number of lagged inputs.
    #[arg(long, global = true)]
    lags: Option<usize>,

    /// Forecast horizon.
    #[arg(long, global = true)]
    horizon: Option<usize>,

    /// Number of MLP experts.
    #[arg(long, global = true)]
    experts: Option<usize>,

    /// Hidden sizes, comma separated (one entry replicates across experts).
    #[arg(long, global = true, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,

    /// Base/auxiliary loss trade-off in [0, 1].
    #[arg(long, global = true)]
    gamma: Option<f64>,

    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Input scaling: mean-abs or none.
    #[arg(long, global = true)]
    scale: Option<String>,

    /// Freeze MLP hidden layers during rolling updates.
    #[arg(long, global = true)]
    freeze_hidden: bool,

    /// Rolling update window size.
    #[arg(long, global = true)]
    update_window: Option<usize>,

    /// Rolling update learning rate.
    #[arg(long, global = true)]
    update_lr: Option<f64>,

    /// Restrict to one series id.
    #[arg(long, global = true)]
    series_id: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fixed-scheme fit: train once, forecast the withheld horizon, report.
    Train,
    /// Forecast beyond the end of each series from a saved checkpoint.
    Forecast {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Rolling-window study with warm-started refits on a single series.
    Rolling,
    /// Rolling study once per gamma, tabulating MAE/RMSE.
    Ablate {
        /// Gamma values, comma separated (defaults to the config list).
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
    },
    /// Score an emitted forecasts.csv against the dataset's withheld block.
    Evaluate {
        /// forecasts.csv written by `train`.
        #[arg(long)]
        forecasts: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let gammas = match &cli.command {
        Command::Ablate { gammas } => gammas.clone(),
        _ => None,
    };
    let overrides = Overrides {
        dataset: cli.dataset,
        format: cli.format,
        lags: cli.lags,
        horizon: cli.horizon,
        experts: cli.experts,
        hidden: cli.hidden,
        gamma: cli.gamma,
        seed: cli.seed,
        out: cli.out,
        scale: cli.scale,
        freeze_hidden: cli.freeze_hidden,
        update_window: cli.update_window,
        update_lr: cli.update_lr,
        gammas,
        series_id: cli.series_id,
    };
    config.apply_overrides(&overrides);

    match cli.command {
        Command::Train => {
            let report = cmd_train(&config)?;
            println!(
                "train done: mean MAE {:.6}, mean RMSE {:.6}{} -> {}",
                report.metrics.mean_mae,
                report.metrics.mean_rmse,
                report
                    .metrics
                    .mean_mase
                    .map(|m| format!(", mean MASE {m:.4}"))
                    .unwrap_or_default(),
                config.out.display()
            );
        }
        Command::Forecast { checkpoint } => {
            let path = cmd_forecast(&config, &checkpoint)?;
            println!("forecasts written to {}", path.display());
        }
        Command::Rolling => {
            let report = cmd_rolling(&config)?;
            println!(
                "rolling done: MAE {:.6}, RMSE {:.6} over {} steps -> {}",
                report.mae,
                report.rmse,
                report.forecasts.len(),
                config.out.display()
            );
        }
        Command::Ablate { .. } => {
            let report = cmd_ablate(&config)?;
            for row in &report.rows {
                println!(
                    "gamma {:.4}: MAE {:.6}, RMSE {:.6}",
                    row.gamma, row.mae, row.rmse
                );
            }
            println!("ablation written to {}", config.out.display());
        }
        Command::Evaluate { forecasts } => {
            let summary = cmd_evaluate(&config, &forecasts)?;
            print!("{}", summary.render_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
