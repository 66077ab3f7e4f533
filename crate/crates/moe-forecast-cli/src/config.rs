//! Run configuration: a single TOML file plus flag overrides (flags win).
//!
//! Every command resolves its settings through [`RunConfig`]; the resolved
//! form is embedded in every emitted report together with its SHA-256 hash,
//! so any report can be reproduced from the config it carries.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use moe_forecast::data::{
    monash_lag_horizon, parse_csv, parse_tsf, CsvLayout, Frequency, ScaleMode, TimeSeriesDataset,
    TsfOptions,
};
use moe_forecast::model::{Activation, ModelConfig};
use moe_forecast::objective::{LossWeights, OutputWeightSet};
use moe_forecast::online::{OnlinePlan, RollingMode};
use moe_forecast::training::TrainPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset path.
    pub dataset: Option<PathBuf>,
    /// Input format: "tsf", "csv" (wide), or "csv-long".
    pub format: String,
    /// Frequency for CSV inputs (tsf files declare their own).
    pub frequency: String,
    /// Seasonal period override; 0 means "derive from frequency".
    pub seasonal_period: usize,
    /// Impute missing `?` values in tsf files instead of rejecting them.
    pub impute_missing: bool,
    /// Number of lagged inputs; 0 means "resolve from the Monash table".
    pub lags: usize,
    /// Forecast horizon; 0 means "resolve from the file or Monash table".
    pub horizon: usize,
    /// Input scaling: "mean-abs" or "none".
    pub scale: String,
    /// Root seed; every component derives from it.
    pub seed: u64,
    /// Output directory.
    pub out: PathBuf,
    /// Restrict to one series id (required by rolling studies on
    /// multi-series files).
    pub series_id: Option<String>,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub rolling: RollingSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            format: "tsf".into(),
            frequency: "other".into(),
            seasonal_period: 0,
            impute_missing: false,
            lags: 0,
            horizon: 0,
            scale: "mean-abs".into(),
            seed: 1,
            out: PathBuf::from("out"),
            series_id: None,
            model: ModelSection::default(),
            loss: LossSection::default(),
            train: TrainSection::default(),
            rolling: RollingSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Number of MLP experts K; 0 means "auto": 3 for single-series data,
    /// 1 for multi-series data.
    pub experts: usize,
    /// Hidden sizes; empty means "auto": (20,...) for K = 3, (40) for K = 1.
    /// A single entry is replicated across experts.
    pub hidden: Vec<usize>,
    /// "relu", "tanh", or "leaky-relu".
    pub activation: String,
    pub hidden_leaky_slope: f64,
    pub gate_leaky_slope: f64,
    pub gate_bias: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            experts: 0,
            hidden: Vec::new(),
            activation: "relu".into(),
            hidden_leaky_slope: 0.01,
            gate_leaky_slope: 0.01,
            gate_bias: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// "broad" or "gate-only".
    pub l1_scope: String,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            gamma: 0.25,
            lambda1: 1e-8,
            lambda2: 1e-8,
            l1_scope: "broad".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// "auto" shuffles only when a single MLP expert is used (pooled data);
    /// "on"/"off" force it.
    pub shuffle: String,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            batch_size: 256,
            epochs: 20,
            shuffle: "auto".into(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RollingSection {
    pub initial_window: usize,
    pub update_window: usize,
    pub update_learning_rate: f64,
    pub update_epochs: usize,
    pub freeze_hidden: bool,
    /// Retrain every window from scratch instead of warm starting.
    pub cold_start: bool,
}

impl Default for RollingSection {
    fn default() -> Self {
        RollingSection {
            initial_window: 3650,
            update_window: 365,
            update_learning_rate: 1e-3,
            update_epochs: 20,
            freeze_hidden: false,
            cold_start: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub gammas: Vec<f64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            gammas: vec![0.25, 1.0],
        }
    }
}

/// Flag-level overrides; every field beats the config file when set.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub format: Option<String>,
    pub lags: Option<usize>,
    pub horizon: Option<usize>,
    pub experts: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub gamma: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub scale: Option<String>,
    pub freeze_hidden: bool,
    pub update_window: Option<usize>,
    pub update_lr: Option<f64>,
    pub gammas: Option<Vec<f64>>,
    pub series_id: Option<String>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// SHA-256 of the serialized config, hex-encoded.
    pub fn hash(&self) -> Result<String> {
        let body = self.to_toml()?;
        let digest = Sha256::digest(body.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn apply_overrides(&mut self, ov: &Overrides) {
        if let Some(v) = &ov.dataset {
            self.dataset = Some(v.clone());
        }
        if let Some(v) = &ov.format {
            self.format = v.clone();
        }
        if let Some(v) = ov.lags {
            self.lags = v;
        }
        if let Some(v) = ov.horizon {
            self.horizon = v;
        }
        if let Some(v) = ov.experts {
            self.model.experts = v;
        }
        if let Some(v) = &ov.hidden {
            self.model.hidden = v.clone();
        }
        if let Some(v) = ov.gamma {
            self.loss.gamma = v;
        }
        if let Some(v) = ov.seed {
            self.seed = v;
        }
        if let Some(v) = &ov.out {
            self.out = v.clone();
        }
        if let Some(v) = &ov.scale {
            self.scale = v.clone();
        }
        if ov.freeze_hidden {
            self.rolling.freeze_hidden = true;
        }
        if let Some(v) = ov.update_window {
            self.rolling.update_window = v;
        }
        if let Some(v) = ov.update_lr {
            self.rolling.update_learning_rate = v;
        }
        if let Some(v) = &ov.gammas {
            self.ablate.gammas = v.clone();
        }
        if let Some(v) = &ov.series_id {
            self.series_id = Some(v.clone());
        }
    }

    pub fn scale_mode(&self) -> Result<ScaleMode> {
        match self.scale.as_str() {
            "mean-abs" => Ok(ScaleMode::MeanAbs),
            "none" => Ok(ScaleMode::None),
            other => bail!("unknown scale mode '{other}' (expected mean-abs or none)"),
        }
    }

    fn frequency(&self) -> Result<Frequency> {
        Frequency::from_tsf_token(&self.frequency)
            .ok_or_else(|| anyhow::anyhow!("unknown frequency '{}'", self.frequency))
    }

    /// Load the dataset, apply the series filter, and apply the seasonal
    /// period override.
    pub fn load_dataset(&self) -> Result<TimeSeriesDataset> {
        let path = self
            .dataset
            .as_ref()
            .context("no dataset given (config `dataset` or --dataset)")?;
        let mut dataset = match self.format.as_str() {
            "tsf" => parse_tsf(
                path,
                TsfOptions {
                    impute_missing: self.impute_missing,
                },
            )?,
            "csv" => parse_csv(path, CsvLayout::Wide, self.frequency()?)?,
            "csv-long" => parse_csv(path, CsvLayout::Long, self.frequency()?)?,
            other => bail!("unknown format '{other}' (expected tsf, csv, or csv-long)"),
        };
        if let Some(id) = &self.series_id {
            dataset.series.retain(|s| &s.id == id);
            if dataset.series.is_empty() {
                bail!("series '{id}' not found in {}", path.display());
            }
        }
        if self.seasonal_period > 0 {
            dataset.seasonal_period = self.seasonal_period;
        }
        Ok(dataset)
    }

    /// Lags and horizon: explicit config beats the file's declared horizon,
    /// which beats the Monash lookup keyed by the dataset filename.
    pub fn resolve_lags_horizon(&self, dataset: &TimeSeriesDataset) -> Result<(usize, usize)> {
        let name = self
            .dataset
            .as_ref()
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_default();
        let table = monash_lag_horizon(&name);
        let lags = if self.lags > 0 {
            self.lags
        } else {
            table
                .map(|(l, _)| l)
                .context("cannot resolve lag count: set `lags` (--lags) or use a known Monash dataset name")?
        };
        let horizon = if self.horizon > 0 {
            self.horizon
        } else if let Some(h) = dataset.declared_horizon {
            h
        } else {
            table
                .map(|(_, h)| h)
                .context("cannot resolve horizon: set `horizon` (--horizon) or use a known Monash dataset name")?
        };
        Ok((lags, horizon))
    }

    /// Model architecture for a dataset with the given series count.
    pub fn model_config(&self, lags: usize, num_series: usize) -> Result<ModelConfig> {
        let experts = if self.model.experts > 0 {
            self.model.experts
        } else if num_series == 1 {
            3
        } else {
            1
        };
        let hidden = if self.model.hidden.is_empty() {
            if experts == 1 {
                vec![40]
            } else {
                vec![20; experts]
            }
        } else if self.model.hidden.len() == 1 && experts > 1 {
            vec![self.model.hidden[0]; experts]
        } else if self.model.hidden.len() == experts {
            self.model.hidden.clone()
        } else {
            bail!(
                "hidden has {} entries for {} experts",
                self.model.hidden.len(),
                experts
            );
        };
        let activation = match self.model.activation.as_str() {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "leaky-relu" => Activation::LeakyRelu {
                slope: self.model.hidden_leaky_slope,
            },
            other => bail!("unknown activation '{other}' (expected relu, tanh, or leaky-relu)"),
        };
        Ok(ModelConfig {
            input_dim: lags,
            num_mlp_experts: experts,
            hidden_sizes: hidden,
            hidden_activation: activation,
            gate_leaky_slope: self.model.gate_leaky_slope,
            gate_bias: self.model.gate_bias,
        })
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        let l1_scope = match self.loss.l1_scope.as_str() {
            "broad" => OutputWeightSet::Broad,
            "gate-only" => OutputWeightSet::GateOnly,
            other => bail!("unknown l1_scope '{other}' (expected broad or gate-only)"),
        };
        let weights = LossWeights {
            gamma: self.loss.gamma,
            lambda1: self.loss.lambda1,
            lambda2: self.loss.lambda2,
            l1_scope,
        };
        weights.validate()?;
        Ok(weights)
    }

    /// The fixed-scheme training plan. Shuffling defaults to "only when one
    /// MLP expert is used" so the temporal masks stay meaningful.
    pub fn train_plan(&self, model: &ModelConfig) -> Result<TrainPlan> {
        let shuffle = match self.train.shuffle.as_str() {
            "auto" => model.num_mlp_experts <= 1,
            "on" => true,
            "off" => false,
            other => bail!("unknown shuffle setting '{other}' (expected auto, on, or off)"),
        };
        Ok(TrainPlan {
            learning_rate: self.train.learning_rate,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            loss_weights: self.loss_weights()?,
            seed: self.seed,
            shuffle,
            adam_beta1: self.train.adam_beta1,
            adam_beta2: self.train.adam_beta2,
            adam_epsilon: self.train.adam_epsilon,
            freeze_hidden: false,
        })
    }

    /// The rolling study plan. Window sizes are clamped to the available
    /// history; the caller reports when that happens.
    pub fn online_plan(
        &self,
        model: &ModelConfig,
        horizon: usize,
        series_len: usize,
    ) -> Result<OnlinePlan> {
        let initial_plan = self.train_plan(model)?;
        let mut update_plan = initial_plan.clone();
        update_plan.learning_rate = self.rolling.update_learning_rate;
        update_plan.epochs = self.rolling.update_epochs;

        let min_window = model.input_dim + 1;
        let available = series_len.saturating_sub(horizon);
        let clamp = |w: usize| w.clamp(min_window, available.max(min_window));
        Ok(OnlinePlan {
            initial_plan,
            initial_window: clamp(self.rolling.initial_window),
            update_plan,
            update_window: clamp(self.rolling.update_window),
            horizon,
            freeze_hidden_on_update: self.rolling.freeze_hidden,
            mode: if self.rolling.cold_start {
                RollingMode::ColdStart
            } else {
                RollingMode::WarmStart
            },
            scale: self.scale_mode()?,
            seasonal_period: Some(if self.seasonal_period > 0 {
                self.seasonal_period
            } else {
                1
            }),
        })
    }
}
