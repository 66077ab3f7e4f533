//! Command-line pipeline over the moe-forecast library: fixed-scheme
//! training, checkpoint forecasting, rolling backtests, gamma ablations, and
//! forecast-file evaluation.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_ablate, cmd_evaluate, cmd_forecast, cmd_rolling, cmd_train, AblationReport, RollingReport,
    Timings, TrainReport,
};
pub use config::{Overrides, RunConfig};
