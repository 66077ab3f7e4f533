//! The composite training loss: a gamma-weighted base MAE over the mixture
//! output, per-expert auxiliary MAEs with temporal masking, and l2/l1
//! regularization.
//!
//! MLP expert k only pays auxiliary loss on the last `N - floor(pi_k * N)`
//! samples of a chronologically ordered batch, with offsets
//! `pi_k = (k-1)/K` for k = 1..K. The first MLP expert therefore sees the
//! whole batch and later experts see progressively more recent slices.

#![allow(clippy::needless_range_loop)]

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MoeParameters, Prediction};

/// Sign with the kink convention used crate-wide: sign(0) = 0.
#[inline]
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Which parameters the l1 penalty covers.
///
/// The broad set is the default: the linear-expert coefficients, every MLP
/// head (w2 and b2), and the gate layer. `GateOnly` restricts the penalty to
/// the gate layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputWeightSet {
    Broad,
    GateOnly,
}

/// Loss hyperparameters: the base/auxiliary trade-off gamma in [0, 1] and
/// the two regularization coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub l1_scope: OutputWeightSet,
}

impl LossWeights {
    pub fn new(gamma: f64, lambda1: f64, lambda2: f64) -> Result<Self> {
        let weights = LossWeights {
            gamma,
            lambda1,
            lambda2,
            l1_scope: OutputWeightSet::Broad,
        };
        weights.validate()?;
        Ok(weights)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig {
                reason: format!("gamma must lie in [0, 1], got {}", self.gamma),
            });
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::InvalidConfig {
                reason: "regularization coefficients must be nonnegative".into(),
            });
        }
        Ok(())
    }
}

impl Default for LossWeights {
    /// gamma 0.25, both lambdas 1e-8, broad l1 scope.
    fn default() -> Self {
        LossWeights {
            gamma: 0.25,
            lambda1: 1e-8,
            lambda2: 1e-8,
            l1_scope: OutputWeightSet::Broad,
        }
    }
}

/// Mask offsets for the K MLP experts: {0, 1/K, ..., (K-1)/K}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSchedule {
    num_mlp_experts: usize,
    offsets: Vec<f64>,
}

impl MaskSchedule {
    /// Schedule for K MLP experts. K = 0 yields an empty schedule (pure
    /// linear model, nothing to mask).
    pub fn new(num_mlp_experts: usize) -> Self {
        let offsets = (0..num_mlp_experts)
            .map(|k| k as f64 / num_mlp_experts as f64)
            .collect();
        MaskSchedule {
            num_mlp_experts,
            offsets,
        }
    }

    pub fn num_mlp_experts(&self) -> usize {
        self.num_mlp_experts
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }
}

/// First masked-out prefix length for expert k (1-based) in a batch of n:
/// floor(pi_k * n) with pi_k = (k-1)/K, evaluated in exact integer
/// arithmetic. Expert k's auxiliary loss covers samples with 1-based index
/// strictly greater than the returned value.
pub fn mask_start(k: usize, n: usize, schedule: &MaskSchedule) -> Result<usize> {
    let num = schedule.num_mlp_experts;
    if k == 0 || k > num {
        return Err(Error::ExpertIndex {
            index: k,
            num_experts: num,
        });
    }
    if n == 0 {
        return Err(Error::EmptyBatch {
            context: "mask_start".into(),
        });
    }
    let start = (k - 1) * n / num;
    if n - start == 0 {
        // Unreachable for pi_k < 1; kept as a hard guard.
        return Err(Error::EmptyMask {
            expert: k,
            batch_size: n,
        });
    }
    Ok(start)
}

/// Mean absolute error of the mixture output over the batch.
pub fn base_loss(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::EmptyBatch {
            context: "base_loss".into(),
        });
    }
    if y.len() != y_hat.len() {
        return Err(Error::ShapeMismatch {
            context: "base_loss".into(),
            expected: format!("{} predictions", y.len()),
            found: format!("{}", y_hat.len()),
        });
    }
    let total: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / y.len() as f64)
}

/// Per-expert auxiliary losses and their mean.
///
/// `expert_preds[j]` holds expert j's predictions over the batch, linear
/// expert first. The linear part is a plain MAE over all samples; MLP part k
/// averages |error| over the unmasked tail only. Batch rows must be in
/// chronological order for the masks to mean anything.
pub fn aux_loss(
    y: &[f64],
    expert_preds: &[Vec<f64>],
    schedule: &MaskSchedule,
) -> Result<(f64, Vec<f64>)> {
    let n = y.len();
    if n == 0 {
        return Err(Error::EmptyBatch {
            context: "aux_loss".into(),
        });
    }
    if expert_preds.len() != schedule.num_mlp_experts + 1 {
        return Err(Error::ShapeMismatch {
            context: "aux_loss".into(),
            expected: format!("{} expert prediction rows", schedule.num_mlp_experts + 1),
            found: format!("{}", expert_preds.len()),
        });
    }
    for (j, preds) in expert_preds.iter().enumerate() {
        if preds.len() != n {
            return Err(Error::ShapeMismatch {
                context: format!("aux_loss expert {j}"),
                expected: format!("{n} predictions"),
                found: format!("{}", preds.len()),
            });
        }
    }

    let mut parts = Vec::with_capacity(expert_preds.len());
    parts.push(base_loss(y, &expert_preds[0])?);
    for k in 1..=schedule.num_mlp_experts {
        let start = mask_start(k, n, schedule)?;
        let count = n - start;
        let total: f64 = (start..n)
            .map(|i| (y[i] - expert_preds[k][i]).abs())
            .sum();
        parts.push(total / count as f64);
    }
    let aux = parts.iter().sum::<f64>() / parts.len() as f64;
    Ok((aux, parts))
}

/// Regularization pair: `l2 = lambda1 * ||theta||_2^2` over every trainable
/// parameter, `l1 = lambda2 * ||w_out||_1` over the configured output-weight
/// set.
pub fn reg_loss(params: &MoeParameters, weights: &LossWeights) -> (f64, f64) {
    let l2_sum: f64 = params.flatten().iter().map(|v| v * v).sum();
    let l1_sum = l1_norm(params, weights.l1_scope);
    (weights.lambda1 * l2_sum, weights.lambda2 * l1_sum)
}

/// Unweighted l1 norm of the scoped output-weight set. The autograd module
/// mirrors this set when adding l1 subgradients.
pub(crate) fn l1_norm(params: &MoeParameters, scope: OutputWeightSet) -> f64 {
    let gate: f64 = params.gate_w.as_slice().iter().map(|v| v.abs()).sum::<f64>()
        + params.gate_b.iter().map(|v| v.abs()).sum::<f64>();
    match scope {
        OutputWeightSet::GateOnly => gate,
        OutputWeightSet::Broad => {
            let beta: f64 = params.beta.iter().map(|v| v.abs()).sum();
            let heads: f64 = params
                .experts
                .iter()
                .map(|e| e.w2.iter().map(|v| v.abs()).sum::<f64>() + e.b2.abs())
                .sum();
            gate + beta + heads
        }
    }
}

/// All components of one batch loss, plus the weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub base: f64,
    pub aux_linear: f64,
    pub aux_mlp: Vec<f64>,
    pub aux: f64,
    pub reg_l2: f64,
    pub reg_l1: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Assemble the full loss from one batch of predictions.
pub fn total_loss(
    y: &[f64],
    predictions: &[Prediction],
    params: &MoeParameters,
    weights: &LossWeights,
    schedule: &MaskSchedule,
) -> Result<LossBreakdown> {
    weights.validate()?;
    if y.len() != predictions.len() {
        return Err(Error::ShapeMismatch {
            context: "total_loss".into(),
            expected: format!("{} predictions", y.len()),
            found: format!("{}", predictions.len()),
        });
    }
    let y_hat: Vec<f64> = predictions.iter().map(|p| p.y_hat).collect();
    let num_experts = schedule.num_mlp_experts + 1;
    let mut expert_preds = vec![Vec::with_capacity(y.len()); num_experts];
    for p in predictions {
        if p.expert_outputs.len() != num_experts {
            return Err(Error::ShapeMismatch {
                context: "total_loss".into(),
                expected: format!("{num_experts} expert outputs"),
                found: format!("{}", p.expert_outputs.len()),
            });
        }
        for (j, &e) in p.expert_outputs.iter().enumerate() {
            expert_preds[j].push(e);
        }
    }

    let base = base_loss(y, &y_hat)?;
    let (aux, parts) = aux_loss(y, &expert_preds, schedule)?;
    let (reg_l2, reg_l1) = reg_loss(params, weights);
    let total = weights.gamma * base + (1.0 - weights.gamma) * aux + reg_l2 + reg_l1;
    Ok(LossBreakdown {
        base,
        aux_linear: parts[0],
        aux_mlp: parts[1..].to_vec(),
        aux,
        reg_l2,
        reg_l1,
        total,
    })
}
