//! The five pipeline commands. Every command writes its outputs under the
//! configured directory and embeds the resolved config plus its hash in each
//! report, so a run can be reproduced from any report it emitted. Wall-clock
//! numbers go to a separate `timings.json`; all other outputs are
//! byte-reproducible for a fixed seed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use moe_forecast::data::{apply_scales, make_supervised, series_scales};
use moe_forecast::evaluation::{
    mae, mase, recursive_forecast, rmse, summarize, MetricSummary, SeriesMetrics,
};
use moe_forecast::model::{load_checkpoint, save_checkpoint, MoeParameters};
use moe_forecast::online::rolling_forecast;
use moe_forecast::training::fit;

use crate::config::RunConfig;

/// Fixed-scheme training report: metrics at the configured seasonality and,
/// when that is not 1, a second scaling at s = 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub seed: u64,
    pub lags: usize,
    pub horizon: usize,
    pub metrics: MetricSummary,
    pub metrics_s1: Option<MetricSummary>,
    pub skipped_series: Vec<String>,
    pub config: RunConfig,
}

/// Rolling study report, timing-free.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RollingReport {
    pub config_hash: String,
    pub seed: u64,
    pub lags: usize,
    pub horizon: usize,
    pub series_id: String,
    pub mae: f64,
    pub rmse: f64,
    pub mase: Option<f64>,
    pub seasonal_period: Option<usize>,
    pub forecasts: Vec<f64>,
    pub actuals: Vec<f64>,
    pub config: RunConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timings {
    pub total_secs: f64,
    pub fit_secs: Vec<f64>,
}

/// One gamma setting inside an ablation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub gamma: f64,
    pub seed: u64,
    pub config_hash: String,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
    pub config: RunConfig,
}

fn ensure_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)?;
    write_text(path, &body)
}

fn write_resolved_config(config: &RunConfig) -> Result<()> {
    write_text(&config.out.join("resolved_config.toml"), &config.to_toml()?)
}

/// Forecast rows as written to `forecasts.csv`.
struct ForecastRow<'a> {
    series: &'a str,
    step: usize,
    forecast: f64,
    actual: Option<f64>,
}

fn write_forecast_csv(path: &Path, rows: &[ForecastRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    let with_actuals = rows.iter().any(|r| r.actual.is_some());
    if with_actuals {
        writer.write_record(["series", "step", "forecast", "actual"])?;
    } else {
        writer.write_record(["series", "step", "forecast"])?;
    }
    for row in rows {
        let mut record = vec![
            row.series.to_string(),
            row.step.to_string(),
            format!("{:?}", row.forecast),
        ];
        if with_actuals {
            record.push(row.actual.map(|a| format!("{a:?}")).unwrap_or_default());
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Per-series MASE against the in-sample block, None when the series is too
/// short or constant at the seasonal lag.
fn mase_or_none(actual: &[f64], forecast: &[f64], insample: &[f64], period: usize) -> Option<f64> {
    mase(actual, forecast, insample, period).ok()
}

/// Fixed-scheme run: one fit on everything before the withheld horizon, then
/// recursive forecasts over it, scored per series.
pub fn cmd_train(config: &RunConfig) -> Result<TrainReport> {
    let started = Instant::now();
    ensure_out(&config.out)?;
    let dataset = config.load_dataset()?;
    let (lags, horizon) = config.resolve_lags_horizon(&dataset)?;
    let model_config = config.model_config(lags, dataset.series.len())?;
    let plan = config.train_plan(&model_config)?;

    let scales = series_scales(&dataset, config.scale_mode()?, horizon);
    let scaled = apply_scales(&dataset, &scales);
    let split = make_supervised(&scaled, lags, horizon, false)?;
    if !split.skipped.is_empty() {
        eprintln!(
            "note: skipped {} series too short for {lags} lags + horizon {horizon}",
            split.skipped.len()
        );
    }

    let (params, trace) = fit(&split.train, &model_config, &plan, None, None)?;

    // Recursive forecasts per surviving series, inverse-scaled.
    let mut rows = Vec::new();
    let mut per_series = Vec::new();
    let mut per_series_s1 = Vec::new();
    for ((series, scaled_series), &factor) in dataset
        .series
        .iter()
        .zip(&scaled.series)
        .zip(&scales)
    {
        if split.skipped.contains(&series.id) {
            continue;
        }
        let len = series.values.len();
        let insample_raw = &series.values[..len - horizon];
        let actual = &series.values[len - horizon..];
        let history = &scaled_series.values[..len - horizon];
        let forecast_scaled = recursive_forecast(&params, &model_config, history, horizon)?;
        let forecast: Vec<f64> = forecast_scaled.iter().map(|v| v * factor).collect();

        for (step, (&f, &a)) in forecast.iter().zip(actual).enumerate() {
            rows.push((series.id.clone(), step + 1, f, Some(a)));
        }
        per_series.push(SeriesMetrics {
            id: series.id.clone(),
            mae: mae(actual, &forecast)?,
            rmse: rmse(actual, &forecast)?,
            mase: mase_or_none(actual, &forecast, insample_raw, dataset.seasonal_period),
        });
        if dataset.seasonal_period != 1 {
            per_series_s1.push(SeriesMetrics {
                id: series.id.clone(),
                mae: *per_series.last().map(|m| &m.mae).unwrap(),
                rmse: per_series.last().unwrap().rmse,
                mase: mase_or_none(actual, &forecast, insample_raw, 1),
            });
        }
    }
    if per_series.is_empty() {
        bail!("no series survived the lag/horizon requirements");
    }

    let metrics = summarize(per_series)?;
    let metrics_s1 = if per_series_s1.is_empty() {
        None
    } else {
        Some(summarize(per_series_s1)?)
    };

    let report = TrainReport {
        config_hash: config.hash()?,
        seed: config.seed,
        lags,
        horizon,
        metrics,
        metrics_s1,
        skipped_series: split.skipped.clone(),
        config: config.clone(),
    };

    write_resolved_config(config)?;
    save_checkpoint(&config.out.join("checkpoint.json"), &model_config, &params)?;
    let scale_rows: Vec<(String, f64)> = dataset
        .series
        .iter()
        .zip(&scales)
        .map(|(s, &f)| (s.id.clone(), f))
        .collect();
    write_json(&config.out.join("scales.json"), &scale_rows)?;
    let mut trace_file = Vec::new();
    trace.write_jsonl(&mut trace_file)?;
    write_text(
        &config.out.join("trace.jsonl"),
        std::str::from_utf8(&trace_file)?,
    )?;
    let csv_rows: Vec<ForecastRow> = rows
        .iter()
        .map(|(id, step, f, a)| ForecastRow {
            series: id,
            step: *step,
            forecast: *f,
            actual: *a,
        })
        .collect();
    write_forecast_csv(&config.out.join("forecasts.csv"), &csv_rows)?;
    write_json(&config.out.join("metrics.json"), &report)?;
    let mut summary = format!(
        "fixed-scheme fit: {} lags, horizon {}, seed {}\nMASE seasonal period {}\n\n",
        lags, horizon, config.seed, dataset.seasonal_period
    );
    summary.push_str(&report.metrics.render_table());
    if let Some(alt) = &report.metrics_s1 {
        summary.push_str("\nMASE at seasonal period 1\n");
        summary.push_str(&alt.render_table());
    }
    write_text(&config.out.join("summary.txt"), &summary)?;
    write_json(
        &config.out.join("timings.json"),
        &Timings {
            total_secs: started.elapsed().as_secs_f64(),
            fit_secs: vec![trace.wall_secs],
        },
    )?;
    Ok(report)
}

/// Forecast `horizon` steps beyond the end of every series using a saved
/// checkpoint. Scale factors are read from the checkpoint's sidecar when
/// present, otherwise recomputed under the configured mode.
pub fn cmd_forecast(config: &RunConfig, checkpoint: &Path) -> Result<PathBuf> {
    ensure_out(&config.out)?;
    let dataset = config.load_dataset()?;
    let (model_config, params) = load_checkpoint(checkpoint)?;
    let horizon = if config.horizon > 0 {
        config.horizon
    } else {
        dataset
            .declared_horizon
            .context("cannot resolve horizon: set `horizon` (--horizon)")?
    };

    let sidecar = checkpoint.parent().unwrap_or(Path::new(".")).join("scales.json");
    let stored: Option<Vec<(String, f64)>> = fs::read_to_string(&sidecar)
        .ok()
        .and_then(|body| serde_json::from_str(&body).ok());
    let fallback = series_scales(&dataset, config.scale_mode()?, 0);

    let mut rows = Vec::new();
    for (idx, series) in dataset.series.iter().enumerate() {
        let factor = stored
            .as_ref()
            .and_then(|pairs| pairs.iter().find(|(id, _)| id == &series.id))
            .map(|(_, f)| *f)
            .unwrap_or(fallback[idx]);
        if series.values.len() < model_config.input_dim {
            eprintln!("note: series '{}' shorter than the lag window, skipped", series.id);
            continue;
        }
        let history: Vec<f64> = series.values.iter().map(|v| v / factor).collect();
        let forecast = recursive_forecast(&params, &model_config, &history, horizon)?;
        for (step, f) in forecast.iter().enumerate() {
            rows.push((series.id.clone(), step + 1, f * factor));
        }
    }
    if rows.is_empty() {
        bail!("no series long enough to forecast");
    }

    write_resolved_config(config)?;
    let csv_rows: Vec<ForecastRow> = rows
        .iter()
        .map(|(id, step, f)| ForecastRow {
            series: id,
            step: *step,
            forecast: *f,
            actual: None,
        })
        .collect();
    let path = config.out.join("forecasts.csv");
    write_forecast_csv(&path, &csv_rows)?;
    Ok(path)
}

/// Rolling study over the last `horizon` points of a single series.
pub fn cmd_rolling(config: &RunConfig) -> Result<RollingReport> {
    ensure_out(&config.out)?;
    let dataset = config.load_dataset()?;
    if dataset.series.len() != 1 {
        bail!(
            "rolling studies run on a single series; this dataset has {} (pick one with series_id / --series-id)",
            dataset.series.len()
        );
    }
    let (lags, horizon) = config.resolve_lags_horizon(&dataset)?;
    let model_config = config.model_config(lags, 1)?;
    let series = &dataset.series[0];
    let mut plan = config.online_plan(&model_config, horizon, series.values.len())?;
    plan.seasonal_period = Some(dataset.seasonal_period);
    if plan.initial_window != config.rolling.initial_window {
        eprintln!(
            "note: initial window clamped to {} (series too short for {})",
            plan.initial_window, config.rolling.initial_window
        );
    }

    let backtest = rolling_forecast(&series.values, &model_config, &plan)?;

    let report = RollingReport {
        config_hash: config.hash()?,
        seed: config.seed,
        lags,
        horizon,
        series_id: series.id.clone(),
        mae: backtest.mae,
        rmse: backtest.rmse,
        mase: backtest.mase,
        seasonal_period: backtest.seasonal_period,
        forecasts: backtest.forecasts.clone(),
        actuals: backtest.actuals.clone(),
        config: config.clone(),
    };

    write_resolved_config(config)?;
    write_json(&config.out.join("rolling.json"), &report)?;
    write_text(&config.out.join("rolling.txt"), &backtest.render_text())?;
    write_json(
        &config.out.join("timings.json"),
        &Timings {
            total_secs: backtest.total_secs,
            fit_secs: backtest.fit_secs.clone(),
        },
    )?;
    Ok(report)
}

/// Run the rolling protocol once per gamma, sharing the seed, and tabulate.
pub fn cmd_ablate(config: &RunConfig) -> Result<AblationReport> {
    ensure_out(&config.out)?;
    if config.ablate.gammas.is_empty() {
        bail!("ablation needs at least one gamma");
    }
    for &g in &config.ablate.gammas {
        if !(0.0..=1.0).contains(&g) {
            bail!("gamma {g} outside [0, 1]");
        }
    }

    let mut rows = Vec::new();
    for &gamma in &config.ablate.gammas {
        let mut gamma_config = config.clone();
        gamma_config.loss.gamma = gamma;
        gamma_config.out = config.out.join(format!("gamma_{gamma}"));
        let report = cmd_rolling(&gamma_config)?;
        rows.push(AblationRow {
            gamma,
            seed: gamma_config.seed,
            config_hash: gamma_config.hash()?,
            mae: report.mae,
            rmse: report.rmse,
        });
    }

    let report = AblationReport {
        config_hash: config.hash()?,
        rows,
        config: config.clone(),
    };
    write_resolved_config(config)?;
    write_json(&config.out.join("ablation.json"), &report)?;
    let mut table = String::from("gamma      MAE         RMSE        seed  config\n");
    for row in &report.rows {
        table.push_str(&format!(
            "{:<9} {:<11.6} {:<11.6} {:<5} {}\n",
            row.gamma,
            row.mae,
            row.rmse,
            row.seed,
            &row.config_hash[..12]
        ));
    }
    write_text(&config.out.join("ablation.txt"), &table)?;
    Ok(report)
}

/// Score a forecasts.csv (as written by `train`) against the dataset's
/// withheld block.
pub fn cmd_evaluate(config: &RunConfig, forecasts_path: &Path) -> Result<MetricSummary> {
    ensure_out(&config.out)?;
    let dataset = config.load_dataset()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(forecasts_path)
        .with_context(|| format!("reading {}", forecasts_path.display()))?;

    let mut by_series: Vec<(String, Vec<f64>)> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let id = record
            .get(0)
            .context("forecast file missing series column")?
            .to_string();
        let value: f64 = record
            .get(2)
            .context("forecast file missing forecast column")?
            .parse()
            .context("bad forecast value")?;
        match by_series.iter_mut().find(|(s, _)| s == &id) {
            Some((_, v)) => v.push(value),
            None => by_series.push((id, vec![value])),
        }
    }
    if by_series.is_empty() {
        bail!("no forecasts in {}", forecasts_path.display());
    }

    let mut per_series = Vec::new();
    for (id, forecast) in &by_series {
        let series = dataset
            .series
            .iter()
            .find(|s| &s.id == id)
            .with_context(|| format!("series '{id}' not present in the dataset"))?;
        let h = forecast.len();
        if series.values.len() <= h {
            bail!("series '{id}' shorter than its {h} forecasts");
        }
        let actual = &series.values[series.values.len() - h..];
        let insample = &series.values[..series.values.len() - h];
        per_series.push(SeriesMetrics {
            id: id.clone(),
            mae: mae(actual, forecast)?,
            rmse: rmse(actual, forecast)?,
            mase: mase_or_none(actual, forecast, insample, dataset.seasonal_period),
        });
    }
    let summary = summarize(per_series)?;
    write_json(&config.out.join("metrics.json"), &summary)?;
    write_text(&config.out.join("summary.txt"), &summary.render_table())?;
    Ok(summary)
}

/// Check a trained checkpoint exists and parses; used by tests and smoke
/// checks.
pub fn checkpoint_roundtrip(path: &Path) -> Result<MoeParameters> {
    let (_, params) = load_checkpoint(path)?;
    Ok(params)
}
