//! Rolling-window forecasting with partial online learning.
//!
//! The last `horizon` observations of a series form the test block. The first
//! window trains from scratch on the `initial_window` observations before the
//! first test point; every later window is initialized from the previous
//! window's parameters and refit on the trailing `update_window` observations
//! with the (usually lighter) update hyperparameters. Each window records a
//! one-step-ahead forecast for its target, then advances by one actual
//! observation.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{mean_abs_scale, ScaleMode, SupervisedSet};
use crate::error::{Error, Result};
use crate::evaluation::{mae, mase, rmse};
use crate::model::{forward, ModelConfig, MoeParameters};
use crate::numerics::{Matrix, SeededRng};
use crate::training::{fit, TrainPlan};

/// Whether later windows reuse the previous window's parameters or retrain
/// from scratch with the initial regime (the expensive baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RollingMode {
    WarmStart,
    ColdStart,
}

/// Configuration of one rolling study: two training regimes, their window
/// sizes, and the forecast horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlinePlan {
    pub initial_plan: TrainPlan,
    pub initial_window: usize,
    pub update_plan: TrainPlan,
    pub update_window: usize,
    pub horizon: usize,
    /// Freeze the MLP hidden layers during update fits; gate, linear expert,
    /// and heads keep adapting.
    pub freeze_hidden_on_update: bool,
    pub mode: RollingMode,
    pub scale: ScaleMode,
    /// Seasonal period for the report's MASE; omit to skip MASE.
    pub seasonal_period: Option<usize>,
}

impl OnlinePlan {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let min_window = config.input_dim + 1;
        if self.initial_window < min_window || self.update_window < min_window {
            return Err(Error::InvalidConfig {
                reason: format!(
                    "window sizes must be at least input_dim + 1 = {min_window} (initial {}, update {})",
                    self.initial_window, self.update_window
                ),
            });
        }
        if self.horizon == 0 {
            return Err(Error::InvalidConfig {
                reason: "horizon must be at least 1".into(),
            });
        }
        self.initial_plan.validate()?;
        // The update plan may carry epochs = 0 (no refits at all), so it is
        // validated only when updates actually run.
        Ok(())
    }
}

/// Outcome of a rolling study: the per-step forecasts against their actuals,
/// recomputable accuracy metrics, and wall-clock accounting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BacktestReport {
    pub forecasts: Vec<f64>,
    pub actuals: Vec<f64>,
    pub mae: f64,
    pub rmse: f64,
    pub mase: Option<f64>,
    pub seasonal_period: Option<usize>,
    pub total_secs: f64,
    /// Per-window wall seconds (embedding + fit + forecast).
    pub fit_secs: Vec<f64>,
}

impl BacktestReport {
    /// Recompute MAE/RMSE from the stored forecasts; must agree with the
    /// stored aggregates to machine precision.
    pub fn recompute(&self) -> Result<(f64, f64)> {
        Ok((
            mae(&self.actuals, &self.forecasts)?,
            rmse(&self.actuals, &self.forecasts)?,
        ))
    }

    /// Human-readable report: metrics, timings, then one line per step.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "steps {}  MAE {:.6}  RMSE {:.6}",
            self.forecasts.len(),
            self.mae,
            self.rmse
        ));
        if let (Some(m), Some(s)) = (self.mase, self.seasonal_period) {
            out.push_str(&format!("  MASE(s={s}) {m:.6}"));
        }
        out.push('\n');
        out.push_str(&format!(
            "total {:.3}s over {} window fits\n",
            self.total_secs,
            self.fit_secs.len()
        ));
        out.push_str("step  forecast  actual\n");
        for (i, (f, a)) in self.forecasts.iter().zip(&self.actuals).enumerate() {
            out.push_str(&format!("{:>4}  {f:.6}  {a:.6}\n", i + 1));
        }
        out
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        out.write_all(body.as_bytes())
            .map_err(|e| Error::io("backtest report", e))
    }
}

/// Warm-started refit: parameters start from `prev` (optimizer moments start
/// fresh) and train on the window. `epochs = 0` in the update plan means no
/// refit at all and returns `prev` unchanged.
pub fn warm_start_fit(
    prev: &MoeParameters,
    window: &SupervisedSet,
    config: &ModelConfig,
    update_plan: &TrainPlan,
    freeze_hidden: bool,
) -> Result<MoeParameters> {
    prev.validate_shapes(config)?;
    if update_plan.epochs == 0 {
        return Ok(prev.clone());
    }
    let plan = TrainPlan {
        freeze_hidden: freeze_hidden || update_plan.freeze_hidden,
        ..update_plan.clone()
    };
    let (params, _) = fit(window, config, &plan, Some(prev.clone()), None)?;
    Ok(params)
}

/// Lag-embed one contiguous window of the series.
fn window_supervised(series: &[f64], end: usize, window: usize, m: usize) -> Result<SupervisedSet> {
    let start = end - window;
    let mut rows = Vec::with_capacity(window - m);
    let mut y = Vec::with_capacity(window - m);
    for t in start + m..end {
        rows.push(series[t - m..t].to_vec());
        y.push(series[t]);
    }
    Ok(SupervisedSet::single_series(Matrix::from_rows(&rows)?, y))
}

/// Run the rolling study over the last `horizon` observations of `series`.
/// Forecasts and metrics are reported on the original scale.
pub fn rolling_forecast(
    series: &[f64],
    config: &ModelConfig,
    plan: &OnlinePlan,
) -> Result<BacktestReport> {
    config.validate()?;
    plan.validate(config)?;
    let len = series.len();
    let h = plan.horizon;
    // Every window, initial or update, must fit before its forecast target.
    let required = plan.initial_window.max(plan.update_window) + h;
    if len < required {
        return Err(Error::InsufficientData {
            required,
            available: len,
        });
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "rolling_forecast input series".into(),
        });
    }

    let started = Instant::now();
    let m = config.input_dim;
    let test_start = len - h;

    // One scale for the whole study, computed on the data before the test
    // block so warm-started parameters never face a shifting input scale.
    let factor = match plan.scale {
        ScaleMode::None => 1.0,
        ScaleMode::MeanAbs => mean_abs_scale(&series[..test_start]),
    };
    let scaled: Vec<f64> = series.iter().map(|v| v / factor).collect();

    let mut forecasts = Vec::with_capacity(h);
    let mut actuals = Vec::with_capacity(h);
    let mut fit_secs = Vec::with_capacity(h);
    let mut params: Option<MoeParameters> = None;

    for (step, target) in (test_start..len).enumerate() {
        let window_started = Instant::now();
        // Per-window seed: deterministic, shared between warm and cold modes.
        let seed_offset = step as u64;

        params = Some(match (&params, plan.mode) {
            (None, _) | (_, RollingMode::ColdStart) => {
                let train = window_supervised(&scaled, target, plan.initial_window, m)?;
                let window_plan = TrainPlan {
                    seed: plan.initial_plan.seed.wrapping_add(seed_offset),
                    ..plan.initial_plan.clone()
                };
                fit(&train, config, &window_plan, None, None)?.0
            }
            (Some(prev), RollingMode::WarmStart) => {
                let train = window_supervised(&scaled, target, plan.update_window, m)?;
                let window_plan = TrainPlan {
                    seed: plan.update_plan.seed.wrapping_add(seed_offset),
                    ..plan.update_plan.clone()
                };
                warm_start_fit(prev, &train, config, &window_plan, plan.freeze_hidden_on_update)?
            }
        });

        let current = params.as_ref().expect("params set above");
        let lags = &scaled[target - m..target];
        let y_hat = forward(current, config, lags)?.y_hat * factor;
        forecasts.push(y_hat);
        actuals.push(series[target]);
        fit_secs.push(window_started.elapsed().as_secs_f64());
    }

    let report_mae = mae(&actuals, &forecasts)?;
    let report_rmse = rmse(&actuals, &forecasts)?;
    let report_mase = match plan.seasonal_period {
        Some(s) => Some(mase(&actuals, &forecasts, &series[..test_start], s)?),
        None => None,
    };

    Ok(BacktestReport {
        forecasts,
        actuals,
        mae: report_mae,
        rmse: report_rmse,
        mase: report_mase,
        seasonal_period: plan.seasonal_period,
        total_secs: started.elapsed().as_secs_f64(),
        fit_secs,
    })
}

/// Search ranges for the seeded random tuner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRanges {
    pub neurons: (usize, usize),
    pub initial_lr: (f64, f64),
    pub update_lr: (f64, f64),
    pub initial_window: (usize, usize),
    pub update_window: (usize, usize),
}

impl Default for SearchRanges {
    /// Daily-data defaults: neurons 1..=50, initial lr 1e-5..1e-2 with the
    /// update lr floored at 1e-4, initial window 730..=3650 (two to ten
    /// years), update window 1..=1095.
    fn default() -> Self {
        SearchRanges {
            neurons: (1, 50),
            initial_lr: (1e-5, 1e-2),
            update_lr: (1e-4, 1e-2),
            initial_window: (730, 3650),
            update_window: (1, 1095),
        }
    }
}

/// Result of one tuning trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchTrial {
    pub neurons: usize,
    pub initial_lr: f64,
    pub update_lr: f64,
    pub initial_window: usize,
    pub update_window: usize,
    pub validation_mae: f64,
}

/// Seeded random search over the rolling hyperparameters. Each trial runs the
/// rolling study on `series` (whose last `plan.horizon` points act as the
/// validation block, so pass data with the real test block already removed)
/// and the trial with the lowest MAE wins. Learning rates are drawn
/// log-uniformly, sizes uniformly.
pub fn random_search(
    series: &[f64],
    config: &ModelConfig,
    plan: &OnlinePlan,
    ranges: &SearchRanges,
    trials: usize,
    seed: u64,
) -> Result<(ModelConfig, OnlinePlan, Vec<SearchTrial>)> {
    if trials == 0 {
        return Err(Error::InvalidConfig {
            reason: "random search needs at least one trial".into(),
        });
    }
    let mut rng = SeededRng::new(seed);
    let log_uniform = |lo: f64, hi: f64, rng: &mut SeededRng| -> f64 {
        (rng.uniform_in(lo.ln(), hi.ln())).exp()
    };
    let mut results = Vec::with_capacity(trials);
    let mut best: Option<(f64, ModelConfig, OnlinePlan)> = None;

    for _ in 0..trials {
        let neurons = ranges.neurons.0 + rng.below(ranges.neurons.1 - ranges.neurons.0 + 1);
        let initial_lr = log_uniform(ranges.initial_lr.0, ranges.initial_lr.1, &mut rng);
        let update_lr = log_uniform(ranges.update_lr.0, ranges.update_lr.1, &mut rng);
        let initial_window = (ranges.initial_window.0
            + rng.below(ranges.initial_window.1 - ranges.initial_window.0 + 1))
        .min(series.len().saturating_sub(plan.horizon));
        let update_window = (ranges.update_window.0
            + rng.below(ranges.update_window.1 - ranges.update_window.0 + 1))
        .max(config.input_dim + 1)
        .min(initial_window);

        let candidate_config = ModelConfig {
            hidden_sizes: vec![neurons; config.num_mlp_experts],
            ..config.clone()
        };
        let candidate_plan = OnlinePlan {
            initial_plan: TrainPlan {
                learning_rate: initial_lr,
                ..plan.initial_plan.clone()
            },
            update_plan: TrainPlan {
                learning_rate: update_lr,
                ..plan.update_plan.clone()
            },
            initial_window,
            update_window,
            ..plan.clone()
        };

        let report = rolling_forecast(series, &candidate_config, &candidate_plan)?;
        results.push(SearchTrial {
            neurons,
            initial_lr,
            update_lr,
            initial_window,
            update_window,
            validation_mae: report.mae,
        });
        let better = best.as_ref().is_none_or(|(b, _, _)| report.mae < *b);
        if better {
            best = Some((report.mae, candidate_config, candidate_plan));
        }
    }
    let (_, best_config, best_plan) = best.expect("at least one trial ran");
    Ok((best_config, best_plan, results))
}
