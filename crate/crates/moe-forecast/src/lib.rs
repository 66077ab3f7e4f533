//! Adaptive mixture-of-experts forecasting.
//!
//! A small, dependency-light library for one-step-ahead time-series
//! forecasting with a mixture of one linear expert and K MLP experts under a
//! softmax gate. Training minimizes a composite objective: the mixture's MAE
//! blended with per-expert auxiliary MAEs over staggered calibration windows,
//! plus l2/l1 regularization. Forecast studies run either as a single fixed
//! fit or as a rolling window with warm-started incremental refits.
//!
//! Modules follow the pipeline: [`data`] loads and embeds series, [`model`]
//! evaluates the mixture, [`objective`] scores it, [`autograd`] differentiates
//! it, [`training`] optimizes it, [`online`] rolls it forward, and
//! [`evaluation`] measures the results against in-repo baselines.

pub mod autograd;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod online;
pub mod training;

pub use error::{Error, Result};
