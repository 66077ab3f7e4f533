//! The mixture-of-experts model: one linear expert, K single-hidden-layer MLP
//! experts, and a softmax gate over all K+1 of them.
//!
//! The gate reads the same input vector as the experts: an affine map to K+1
//! logits, a LeakyReLU, then a softmax. Expert outputs never feed back into
//! the gate. The model head is scalar (one-step-ahead target); longer
//! horizons are produced recursively by the evaluation and online modules.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, init_params, InitScheme, Matrix, SeededRng};

/// Hidden-layer activation for the MLP experts.
///
/// Kink convention used throughout the crate: the derivative of ReLU and
/// LeakyReLU at exactly zero is defined as zero. The analytic gradients and
/// the finite-difference oracle both honor it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    LeakyRelu { slope: f64 },
}

impl Activation {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    *slope
                } else {
                    0.0
                }
            }
        }
    }
}

/// LeakyReLU used by the gate, same kink convention as [`Activation`].
#[inline]
pub(crate) fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
pub(crate) fn leaky_relu_derivative(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        slope
    } else {
        0.0
    }
}

/// Numerically stable softmax. Shift-invariant to 1e-12 and strictly positive.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Architecture description. `num_mlp_experts = 0` degenerates to a pure
/// linear model behind a single always-on gate weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of lagged inputs m.
    pub input_dim: usize,
    /// Number of MLP experts K (the linear expert is always present).
    pub num_mlp_experts: usize,
    /// Hidden width per MLP expert; length must equal `num_mlp_experts`.
    pub hidden_sizes: Vec<usize>,
    /// Hidden activation for the MLP experts.
    pub hidden_activation: Activation,
    /// Negative slope of the gate's LeakyReLU.
    pub gate_leaky_slope: f64,
    /// When false the gate logits omit their bias term (it stays zero).
    pub gate_bias: bool,
}

impl ModelConfig {
    pub fn new(input_dim: usize, hidden_sizes: Vec<usize>) -> Self {
        ModelConfig {
            input_dim,
            num_mlp_experts: hidden_sizes.len(),
            hidden_sizes,
            hidden_activation: Activation::Relu,
            gate_leaky_slope: 0.01,
            gate_bias: true,
        }
    }

    /// Number of experts including the linear one.
    pub fn num_experts(&self) -> usize {
        self.num_mlp_experts + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig {
                reason: "input_dim must be at least 1".into(),
            });
        }
        if self.hidden_sizes.len() != self.num_mlp_experts {
            return Err(Error::InvalidConfig {
                reason: format!(
                    "hidden_sizes has {} entries for {} MLP experts",
                    self.hidden_sizes.len(),
                    self.num_mlp_experts
                ),
            });
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::InvalidConfig {
                reason: "every hidden size must be at least 1".into(),
            });
        }
        if !self.gate_leaky_slope.is_finite() {
            return Err(Error::InvalidConfig {
                reason: "gate_leaky_slope must be finite".into(),
            });
        }
        Ok(())
    }
}

/// Parameters of one MLP expert: a single hidden layer and a scalar head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpExpert {
    /// Hidden weights, h x m.
    pub w1: Matrix,
    /// Hidden biases, length h.
    pub b1: Vec<f64>,
    /// Output weights, length h (the 1 x h head stored flat).
    pub w2: Vec<f64>,
    /// Output bias.
    pub b2: f64,
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeParameters {
    /// Linear-expert coefficients, length m.
    pub beta: Vec<f64>,
    /// K MLP experts.
    pub experts: Vec<MlpExpert>,
    /// Gate weights, (K+1) x m.
    pub gate_w: Matrix,
    /// Gate biases, length K+1.
    pub gate_b: Vec<f64>,
}

impl MoeParameters {
    /// Fresh parameters: fan-in uniform for hidden layers, zeros for biases
    /// and the linear expert, small uniform for the gate.
    pub fn init(config: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let m = config.input_dim;
        let mut experts = Vec::with_capacity(config.num_mlp_experts);
        for &h in &config.hidden_sizes {
            let w1 = init_params(h, m, InitScheme::UniformKaiming, rng)?;
            let w2 = init_params(1, h, InitScheme::UniformKaiming, rng)?;
            experts.push(MlpExpert {
                w1,
                b1: vec![0.0; h],
                w2: w2.as_slice().to_vec(),
                b2: 0.0,
            });
        }
        let gate_w = init_params(config.num_experts(), m, InitScheme::SmallUniform, rng)?;
        Ok(MoeParameters {
            beta: vec![0.0; m],
            experts,
            gate_w,
            gate_b: vec![0.0; config.num_experts()],
        })
    }

    /// All-zero parameters with the same shapes; gradient and optimizer
    /// buffers start from this.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let m = config.input_dim;
        let experts = config
            .hidden_sizes
            .iter()
            .map(|&h| {
                Ok(MlpExpert {
                    w1: Matrix::zeros(h, m)?,
                    b1: vec![0.0; h],
                    w2: vec![0.0; h],
                    b2: 0.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MoeParameters {
            beta: vec![0.0; m],
            experts,
            gate_w: Matrix::zeros(config.num_experts(), m)?,
            gate_b: vec![0.0; config.num_experts()],
        })
    }

    /// Check shape congruence against a config.
    pub fn validate_shapes(&self, config: &ModelConfig) -> Result<()> {
        let m = config.input_dim;
        let mismatch = |expected: String, found: String| Error::ShapeMismatch {
            context: "MoeParameters".into(),
            expected,
            found,
        };
        if self.beta.len() != m {
            return Err(mismatch(format!("beta length {m}"), format!("{}", self.beta.len())));
        }
        if self.experts.len() != config.num_mlp_experts {
            return Err(mismatch(
                format!("{} experts", config.num_mlp_experts),
                format!("{}", self.experts.len()),
            ));
        }
        for (k, (expert, &h)) in self.experts.iter().zip(&config.hidden_sizes).enumerate() {
            if expert.w1.rows() != h || expert.w1.cols() != m {
                return Err(mismatch(
                    format!("expert {k} w1 {h}x{m}"),
                    format!("{}x{}", expert.w1.rows(), expert.w1.cols()),
                ));
            }
            if expert.b1.len() != h || expert.w2.len() != h {
                return Err(mismatch(
                    format!("expert {k} b1/w2 length {h}"),
                    format!("{}/{}", expert.b1.len(), expert.w2.len()),
                ));
            }
        }
        if self.gate_w.rows() != config.num_experts() || self.gate_w.cols() != m {
            return Err(mismatch(
                format!("gate_w {}x{m}", config.num_experts()),
                format!("{}x{}", self.gate_w.rows(), self.gate_w.cols()),
            ));
        }
        if self.gate_b.len() != config.num_experts() {
            return Err(mismatch(
                format!("gate_b length {}", config.num_experts()),
                format!("{}", self.gate_b.len()),
            ));
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        let expert_count: usize = self
            .experts
            .iter()
            .map(|e| e.w1.as_slice().len() + e.b1.len() + e.w2.len() + 1)
            .sum();
        self.beta.len() + expert_count + self.gate_w.as_slice().len() + self.gate_b.len()
    }

    /// Flatten every parameter into one vector. Order: beta, then per expert
    /// (w1 row-major, b1, w2, b2), then gate_w row-major, then gate_b.
    /// `unflatten` inverts this exactly.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(&self.beta);
        for e in &self.experts {
            out.extend_from_slice(e.w1.as_slice());
            out.extend_from_slice(&e.b1);
            out.extend_from_slice(&e.w2);
            out.push(e.b2);
        }
        out.extend_from_slice(self.gate_w.as_slice());
        out.extend_from_slice(&self.gate_b);
        out
    }

    /// Rebuild parameters from a flat vector produced by [`flatten`].
    ///
    /// [`flatten`]: MoeParameters::flatten
    pub fn unflatten(config: &ModelConfig, flat: &[f64]) -> Result<Self> {
        let mut params = MoeParameters::zeros(config)?;
        let expected = params.num_params();
        if flat.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "MoeParameters::unflatten".into(),
                expected: format!("{expected} values"),
                found: format!("{}", flat.len()),
            });
        }
        params.copy_from_flat(flat);
        Ok(params)
    }

    /// Overwrite every parameter from a flat vector of matching length.
    pub(crate) fn copy_from_flat(&mut self, flat: &[f64]) {
        debug_assert_eq!(flat.len(), self.num_params());
        fn take(at: &mut usize, dst: &mut [f64], from: &[f64]) {
            dst.copy_from_slice(&from[*at..*at + dst.len()]);
            *at += dst.len();
        }
        let mut at = 0;
        take(&mut at, &mut self.beta, flat);
        for e in &mut self.experts {
            take(&mut at, e.w1.as_mut_slice(), flat);
            take(&mut at, &mut e.b1, flat);
            take(&mut at, &mut e.w2, flat);
            e.b2 = flat[at];
            at += 1;
        }
        take(&mut at, self.gate_w.as_mut_slice(), flat);
        take(&mut at, &mut self.gate_b, flat);
        debug_assert_eq!(at, flat.len());
    }

    pub fn all_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// One forward evaluation: the mixture output, each expert's raw output
/// (linear expert first), and the gate weights over the K+1 experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub y_hat: f64,
    pub expert_outputs: Vec<f64>,
    pub gate_weights: Vec<f64>,
}

/// Intermediates of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ForwardTrace {
    /// Hidden pre-activations per MLP expert.
    pub z: Vec<Vec<f64>>,
    /// Hidden activations per MLP expert.
    pub a: Vec<Vec<f64>>,
    /// Gate logits before the LeakyReLU.
    pub gate_pre: Vec<f64>,
    /// Expert outputs, linear first.
    pub expert_outputs: Vec<f64>,
    /// Softmax gate weights.
    pub gate_weights: Vec<f64>,
    pub y_hat: f64,
}

pub(crate) fn forward_trace(
    params: &MoeParameters,
    config: &ModelConfig,
    x: &[f64],
) -> Result<ForwardTrace> {
    if x.len() != config.input_dim {
        return Err(Error::ShapeMismatch {
            context: "forward".into(),
            expected: format!("input of length {}", config.input_dim),
            found: format!("{}", x.len()),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "forward input".into(),
        });
    }

    let num = config.num_experts();
    let mut expert_outputs = Vec::with_capacity(num);
    expert_outputs.push(dot(&params.beta, x));

    let mut z_all = Vec::with_capacity(config.num_mlp_experts);
    let mut a_all = Vec::with_capacity(config.num_mlp_experts);
    for expert in &params.experts {
        let mut z = expert.w1.matvec(x)?;
        for (zi, bi) in z.iter_mut().zip(&expert.b1) {
            *zi += bi;
        }
        let a: Vec<f64> = z.iter().map(|&v| config.hidden_activation.apply(v)).collect();
        expert_outputs.push(dot(&expert.w2, &a) + expert.b2);
        z_all.push(z);
        a_all.push(a);
    }

    let mut gate_pre = params.gate_w.matvec(x)?;
    if config.gate_bias {
        for (u, b) in gate_pre.iter_mut().zip(&params.gate_b) {
            *u += b;
        }
    }
    let gate_post: Vec<f64> = gate_pre
        .iter()
        .map(|&u| leaky_relu(u, config.gate_leaky_slope))
        .collect();
    let gate_weights = softmax(&gate_post);
    let y_hat = dot(&gate_weights, &expert_outputs);

    if !y_hat.is_finite() {
        return Err(Error::NonFinite {
            context: "forward output".into(),
        });
    }

    Ok(ForwardTrace {
        z: z_all,
        a: a_all,
        gate_pre,
        expert_outputs,
        gate_weights,
        y_hat,
    })
}

/// Evaluate the mixture on one input vector.
pub fn forward(params: &MoeParameters, config: &ModelConfig, x: &[f64]) -> Result<Prediction> {
    let trace = forward_trace(params, config, x)?;
    Ok(Prediction {
        y_hat: trace.y_hat,
        expert_outputs: trace.expert_outputs,
        gate_weights: trace.gate_weights,
    })
}

/// Gate weights alone: softmax(LeakyReLU(gate_w x + gate_b)).
pub fn gate_forward(params: &MoeParameters, config: &ModelConfig, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != config.input_dim {
        return Err(Error::ShapeMismatch {
            context: "gate_forward".into(),
            expected: format!("input of length {}", config.input_dim),
            found: format!("{}", x.len()),
        });
    }
    let mut pre = params.gate_w.matvec(x)?;
    if config.gate_bias {
        for (u, b) in pre.iter_mut().zip(&params.gate_b) {
            *u += b;
        }
    }
    let post: Vec<f64> = pre
        .iter()
        .map(|&u| leaky_relu(u, config.gate_leaky_slope))
        .collect();
    Ok(softmax(&post))
}

/// Row-wise forward over a batch, order preserving.
pub fn forward_batch(
    params: &MoeParameters,
    config: &ModelConfig,
    x: &Matrix,
) -> Result<Vec<Prediction>> {
    (0..x.rows()).map(|i| forward(params, config, x.row(i))).collect()
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: ModelConfig,
    parameters: MoeParameters,
}

/// Write config and parameters to a versioned JSON checkpoint. JSON floats
/// are emitted in shortest round-trip form, so a load returns bit-identical
/// parameters.
pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &MoeParameters) -> Result<()> {
    params.validate_shapes(config)?;
    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config: config.clone(),
        parameters: params.clone(),
    };
    let body = serde_json::to_string_pretty(&checkpoint)?;
    fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, MoeParameters)> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let checkpoint: Checkpoint = serde_json::from_str(&body)?;
    if checkpoint.format_version != CHECKPOINT_VERSION {
        return Err(Error::InvalidConfig {
            reason: format!(
                "unsupported checkpoint version {} (this build reads {})",
                checkpoint.format_version, CHECKPOINT_VERSION
            ),
        });
    }
    checkpoint.parameters.validate_shapes(&checkpoint.config)?;
    Ok((checkpoint.config, checkpoint.parameters))
}
