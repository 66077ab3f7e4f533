//! Analytic gradients of the composite loss, and a central finite-difference
//! oracle to check them against.
//!
//! The architecture is small and fixed, so the backward pass is written by
//! hand rather than through a tape. Kink convention (shared with the model
//! and objective modules): the derivative of |r| at r = 0 and of
//! ReLU/LeakyReLU at 0 is taken to be 0.

#![allow(clippy::needless_range_loop)]

use crate::error::{Error, Result};
use crate::model::{
    forward_batch, forward_trace, leaky_relu_derivative, ModelConfig, MoeParameters,
};
use crate::numerics::Matrix;
use crate::objective::{
    base_loss, mask_start, reg_loss, sign, total_loss, LossBreakdown, LossWeights, MaskSchedule,
    OutputWeightSet,
};

/// Gradient of the loss with respect to every parameter; same tensor layout
/// as the parameters themselves, so `flatten`/`unflatten` apply unchanged.
pub type Gradient = MoeParameters;

/// Backward pass over one batch: returns the loss breakdown and the exact
/// gradient of its total. Rows of `x` must be in chronological order whenever
/// more than one MLP expert is masked.
pub fn backward(
    params: &MoeParameters,
    config: &ModelConfig,
    x: &Matrix,
    y: &[f64],
    weights: &LossWeights,
    schedule: &MaskSchedule,
) -> Result<(LossBreakdown, Gradient)> {
    weights.validate()?;
    params.validate_shapes(config)?;
    let n = x.rows();
    if n == 0 || y.is_empty() {
        return Err(Error::EmptyBatch {
            context: "backward".into(),
        });
    }
    if y.len() != n {
        return Err(Error::ShapeMismatch {
            context: "backward".into(),
            expected: format!("{n} targets"),
            found: format!("{}", y.len()),
        });
    }
    if schedule.num_mlp_experts() != config.num_mlp_experts {
        return Err(Error::ShapeMismatch {
            context: "backward mask schedule".into(),
            expected: format!("{} MLP experts", config.num_mlp_experts),
            found: format!("{}", schedule.num_mlp_experts()),
        });
    }

    let num_mlp = config.num_mlp_experts;
    let num_experts = config.num_experts();
    let starts: Vec<usize> = (1..=num_mlp)
        .map(|k| mask_start(k, n, schedule))
        .collect::<Result<_>>()?;

    let mut grad = Gradient::zeros(config)?;
    let mut y_hat = Vec::with_capacity(n);
    let mut expert_preds = vec![Vec::with_capacity(n); num_experts];

    let gamma = weights.gamma;
    let aux_weight = (1.0 - gamma) / num_experts as f64;

    for i in 0..n {
        let xi = x.row(i);
        let trace = forward_trace(params, config, xi)?;
        y_hat.push(trace.y_hat);
        for (j, &e) in trace.expert_outputs.iter().enumerate() {
            expert_preds[j].push(e);
        }

        // d total / d y_hat through the base MAE.
        let d_yhat = gamma * (-sign(y[i] - trace.y_hat)) / n as f64;

        // Expert-output gradients: base path through the mixture weights plus
        // the expert's own (possibly masked) auxiliary term.
        let mut d_expert = vec![0.0; num_experts];
        for j in 0..num_experts {
            d_expert[j] = d_yhat * trace.gate_weights[j];
        }
        d_expert[0] += aux_weight * (-sign(y[i] - trace.expert_outputs[0])) / n as f64;
        for k in 1..=num_mlp {
            let start = starts[k - 1];
            if i + 1 > start {
                let count = (n - start) as f64;
                d_expert[k] +=
                    aux_weight * (-sign(y[i] - trace.expert_outputs[k])) / count;
            }
        }

        // Gate path. Only the base term flows through the gate weights:
        // d y_hat / d v_j = w_j (e_j - y_hat), then through the LeakyReLU.
        for j in 0..num_experts {
            let d_v = d_yhat * trace.gate_weights[j] * (trace.expert_outputs[j] - trace.y_hat);
            let d_u = d_v * leaky_relu_derivative(trace.gate_pre[j], config.gate_leaky_slope);
            if d_u != 0.0 {
                for (c, &xc) in xi.iter().enumerate() {
                    grad.gate_w.add_at(j, c, d_u * xc);
                }
                if config.gate_bias {
                    grad.gate_b[j] += d_u;
                }
            }
        }

        // Linear expert.
        if d_expert[0] != 0.0 {
            for (gb, &xc) in grad.beta.iter_mut().zip(xi) {
                *gb += d_expert[0] * xc;
            }
        }

        // MLP experts.
        for k in 0..num_mlp {
            let g = d_expert[k + 1];
            if g == 0.0 {
                continue;
            }
            let expert = &params.experts[k];
            let ge = &mut grad.experts[k];
            let z = &trace.z[k];
            let a = &trace.a[k];
            ge.b2 += g;
            for (j, (&aj, &zj)) in a.iter().zip(z).enumerate() {
                ge.w2[j] += g * aj;
                let delta = g * expert.w2[j] * config.hidden_activation.derivative(zj);
                if delta != 0.0 {
                    ge.b1[j] += delta;
                    for (c, &xc) in xi.iter().enumerate() {
                        ge.w1.add_at(j, c, delta * xc);
                    }
                }
            }
        }
    }

    add_reg_gradients(&mut grad, params, weights);

    // Assemble the loss from the quantities the forward pass produced.
    let base = base_loss(y, &y_hat)?;
    let (aux, parts) = crate::objective::aux_loss(y, &expert_preds, schedule)?;
    let (reg_l2, reg_l1) = reg_loss(params, weights);
    let total = gamma * base + (1.0 - gamma) * aux + reg_l2 + reg_l1;
    let breakdown = LossBreakdown {
        base,
        aux_linear: parts[0],
        aux_mlp: parts[1..].to_vec(),
        aux,
        reg_l2,
        reg_l1,
        total,
    };

    check_finite(&grad)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite {
            context: "backward loss".into(),
        });
    }
    Ok((breakdown, grad))
}

/// l2 gradient on every parameter, l1 subgradient on the scoped output
/// weights. Mirrors `objective::reg_loss` term for term; gate biases stay in
/// the penalty even when the forward pass omits them, since they remain part
/// of the parameter vector.
fn add_reg_gradients(grad: &mut Gradient, params: &MoeParameters, weights: &LossWeights) {
    let l2 = weights.lambda1;
    let l1 = weights.lambda2;
    let broad = weights.l1_scope == OutputWeightSet::Broad;

    for (g, p) in grad.beta.iter_mut().zip(&params.beta) {
        *g += 2.0 * l2 * p;
        if broad {
            *g += l1 * sign(*p);
        }
    }
    for (ge, pe) in grad.experts.iter_mut().zip(&params.experts) {
        for (g, p) in ge.w1.as_mut_slice().iter_mut().zip(pe.w1.as_slice()) {
            *g += 2.0 * l2 * p;
        }
        for (g, p) in ge.b1.iter_mut().zip(&pe.b1) {
            *g += 2.0 * l2 * p;
        }
        for (g, p) in ge.w2.iter_mut().zip(&pe.w2) {
            *g += 2.0 * l2 * p;
            if broad {
                *g += l1 * sign(*p);
            }
        }
        ge.b2 += 2.0 * l2 * pe.b2;
        if broad {
            ge.b2 += l1 * sign(pe.b2);
        }
    }
    for (g, p) in grad.gate_w.as_mut_slice().iter_mut().zip(params.gate_w.as_slice()) {
        *g += 2.0 * l2 * p + l1 * sign(*p);
    }
    for (g, p) in grad.gate_b.iter_mut().zip(&params.gate_b) {
        *g += 2.0 * l2 * p + l1 * sign(*p);
    }
}

fn check_finite(grad: &Gradient) -> Result<()> {
    let bad = |context: &str| Error::NonFinite {
        context: format!("gradient {context}"),
    };
    if grad.beta.iter().any(|v| !v.is_finite()) {
        return Err(bad("beta"));
    }
    for (k, e) in grad.experts.iter().enumerate() {
        if !e.w1.all_finite() || e.b1.iter().any(|v| !v.is_finite()) {
            return Err(bad(&format!("expert {k} hidden layer")));
        }
        if e.w2.iter().any(|v| !v.is_finite()) || !e.b2.is_finite() {
            return Err(bad(&format!("expert {k} head")));
        }
    }
    if !grad.gate_w.all_finite() || grad.gate_b.iter().any(|v| !v.is_finite()) {
        return Err(bad("gate"));
    }
    Ok(())
}

/// Central finite differences on the flattened parameters:
/// (L(theta + h e_i) - L(theta - h e_i)) / 2h per coordinate. Evaluates the
/// loss through the forward path only, so it is independent of `backward`.
pub fn fd_gradient(
    params: &MoeParameters,
    config: &ModelConfig,
    x: &Matrix,
    y: &[f64],
    weights: &LossWeights,
    schedule: &MaskSchedule,
    step: f64,
) -> Result<Gradient> {
    if step <= 0.0 {
        return Err(Error::InvalidConfig {
            reason: format!("finite-difference step must be positive, got {step}"),
        });
    }
    let mut flat = params.flatten();
    let mut scratch = params.clone();
    let mut grad_flat = vec![0.0; flat.len()];

    let eval = |scratch: &mut MoeParameters, flat: &[f64]| -> Result<f64> {
        scratch.copy_from_flat(flat);
        let predictions = forward_batch(scratch, config, x)?;
        Ok(total_loss(y, &predictions, scratch, weights, schedule)?.total)
    };

    for i in 0..flat.len() {
        let original = flat[i];
        flat[i] = original + step;
        let plus = eval(&mut scratch, &flat)?;
        flat[i] = original - step;
        let minus = eval(&mut scratch, &flat)?;
        flat[i] = original;
        grad_flat[i] = (plus - minus) / (2.0 * step);
    }
    Gradient::unflatten(config, &grad_flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;
    use crate::numerics::SeededRng;

    fn random_params(config: &ModelConfig, seed: u64) -> MoeParameters {
        let mut rng = SeededRng::new(seed);
        let mut p = MoeParameters::init(config, &mut rng).unwrap();
        for v in p.beta.iter_mut() {
            *v = rng.uniform_in(-0.8, 0.8);
        }
        for e in p.experts.iter_mut() {
            for v in e.b1.iter_mut() {
                *v = rng.uniform_in(-0.4, 0.4);
            }
            e.b2 = rng.uniform_in(-0.4, 0.4);
        }
        for v in p.gate_b.iter_mut() {
            *v = rng.uniform_in(-0.4, 0.4);
        }
        p
    }

    fn random_batch(m: usize, n: usize, seed: u64) -> (Matrix, Vec<f64>) {
        let mut rng = SeededRng::new(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| rng.uniform_in(-1.5, 1.5)).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.5, 1.5)).collect();
        (Matrix::from_rows(&rows).unwrap(), y)
    }

    fn max_rel_error(analytic: &Gradient, numeric: &Gradient) -> f64 {
        analytic
            .flatten()
            .iter()
            .zip(numeric.flatten())
            .map(|(g, fd)| (g - fd).abs() / (1.0 + g.abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn pure_linear_mae_gradient_closed_form() {
        // gamma = 1, no regularization, K = 0, one sample:
        // dL/dbeta = -sign(y - y_hat) * x.
        let config = ModelConfig::new(3, vec![]);
        let mut params = MoeParameters::zeros(&config).unwrap();
        params.beta = vec![0.5, -0.5, 1.0];
        let x = Matrix::from_rows(&[vec![1.0, 2.0, -1.0]]).unwrap();
        let y = vec![3.0]; // y_hat = 0.5 + (-1.0) + (-1.0) = -1.5, residual > 0
        let weights = LossWeights::new(1.0, 0.0, 0.0).unwrap();
        let schedule = MaskSchedule::new(0);
        let (_, grad) = backward(&params, &config, &x, &y, &weights, &schedule).unwrap();
        assert_eq!(grad.beta, vec![-1.0, -2.0, 1.0]);
    }

    #[test]
    fn zero_residual_batch_gives_zero_data_gradient() {
        let config = ModelConfig::new(2, vec![2]);
        let mut params = MoeParameters::zeros(&config).unwrap();
        params.beta = vec![1.0, 0.0];
        // With zero MLP and uniform gate, y_hat = x0 / 2; pick targets equal
        // to every expert's own output as well: x0 = 0 makes everything 0.
        let x = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, -2.0]]).unwrap();
        let y = vec![0.0, 0.0];
        let weights = LossWeights::new(0.5, 0.0, 0.0).unwrap();
        let schedule = MaskSchedule::new(1);
        let (breakdown, grad) = backward(&params, &config, &x, &y, &weights, &schedule).unwrap();
        assert_eq!(breakdown.total, 0.0);
        assert!(grad.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences_across_gammas() {
        let config = ModelConfig {
            input_dim: 5,
            num_mlp_experts: 2,
            hidden_sizes: vec![3, 4],
            hidden_activation: Activation::Relu,
            gate_leaky_slope: 0.01,
            gate_bias: true,
        };
        let params = random_params(&config, 101);
        let (x, y) = random_batch(5, 16, 202);
        let schedule = MaskSchedule::new(2);
        for gamma in [0.0, 0.25, 1.0] {
            let weights = LossWeights::new(gamma, 1e-4, 1e-4).unwrap();
            let (_, grad) = backward(&params, &config, &x, &y, &weights, &schedule).unwrap();
            let fd = fd_gradient(&params, &config, &x, &y, &weights, &schedule, 1e-6).unwrap();
            let err = max_rel_error(&grad, &fd);
            assert!(err < 1e-4, "gamma={gamma}: max relative error {err}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_without_gate_bias() {
        // Disabled gate bias with nonzero stored values: the forward pass
        // ignores them, regularization still sees them, and the analytic
        // gradient must agree with finite differences on both counts.
        let config = ModelConfig {
            input_dim: 3,
            num_mlp_experts: 1,
            hidden_sizes: vec![3],
            hidden_activation: Activation::Tanh,
            gate_leaky_slope: 0.01,
            gate_bias: false,
        };
        let mut params = random_params(&config, 606);
        params.gate_b = vec![0.3, -0.7];
        let (x, y) = random_batch(3, 8, 707);
        let schedule = MaskSchedule::new(1);
        let weights = LossWeights::new(0.25, 1e-3, 1e-3).unwrap();
        let (_, grad) = backward(&params, &config, &x, &y, &weights, &schedule).unwrap();
        let fd = fd_gradient(&params, &config, &x, &y, &weights, &schedule, 1e-6).unwrap();
        let err = max_rel_error(&grad, &fd);
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn gradient_matches_finite_differences_tanh_tight() {
        let config = ModelConfig {
            input_dim: 5,
            num_mlp_experts: 2,
            hidden_sizes: vec![3, 4],
            hidden_activation: Activation::Tanh,
            gate_leaky_slope: 0.01,
            gate_bias: true,
        };
        let params = random_params(&config, 303);
        let (x, y) = random_batch(5, 16, 404);
        let schedule = MaskSchedule::new(2);
        let weights = LossWeights::new(0.25, 1e-4, 0.0).unwrap();
        let (_, grad) = backward(&params, &config, &x, &y, &weights, &schedule).unwrap();
        let fd = fd_gradient(&params, &config, &x, &y, &weights, &schedule, 1e-6).unwrap();
        let err = max_rel_error(&grad, &fd);
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn fd_is_exact_on_a_quadratic() {
        // With x = 0 and y = 0 every data term vanishes identically, so the
        // loss is the pure quadratic lambda1 * beta^2; central differences
        // are exact there (no cubic term).
        let config = ModelConfig::new(1, vec![]);
        let mut params = MoeParameters::zeros(&config).unwrap();
        params.beta[0] = 1.7;
        let x = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let y = vec![0.0];
        let weights = LossWeights::new(1.0, 0.25, 0.0).unwrap();
        let schedule = MaskSchedule::new(0);
        let fd = fd_gradient(&params, &config, &x, &y, &weights, &schedule, 1e-3).unwrap();
        assert!((fd.beta[0] - 2.0 * 0.25 * 1.7).abs() < 1e-10);
    }

    #[test]
    fn halving_step_shrinks_fd_error_fourfold() {
        let config = ModelConfig {
            input_dim: 4,
            num_mlp_experts: 1,
            hidden_sizes: vec![3],
            hidden_activation: Activation::Tanh,
            gate_leaky_slope: 0.01,
            gate_bias: true,
        };
        let params = random_params(&config, 505);
        let (x, y) = random_batch(4, 8, 606);
        let schedule = MaskSchedule::new(1);
        let weights = LossWeights::new(0.25, 1e-4, 0.0).unwrap();
        let (_, grad) = backward(&params, &config, &x, &y, &weights, &schedule).unwrap();
        let err_at = |h: f64| {
            let fd = fd_gradient(&params, &config, &x, &y, &weights, &schedule, h).unwrap();
            grad.flatten()
                .iter()
                .zip(fd.flatten())
                .map(|(g, f)| (g - f).abs())
                .fold(0.0, f64::max)
        };
        let coarse = err_at(2e-3);
        let fine = err_at(1e-3);
        let ratio = coarse / fine;
        assert!(
            (2.5..6.0).contains(&ratio),
            "expected ~4x reduction, got {ratio} (coarse {coarse}, fine {fine})"
        );
    }

    #[test]
    fn gradient_is_linear_in_gamma() {
        let config = ModelConfig::new(3, vec![2, 2]);
        let params = random_params(&config, 707);
        let (x, y) = random_batch(3, 9, 808);
        let schedule = MaskSchedule::new(2);
        let grad_at = |gamma: f64| {
            let weights = LossWeights::new(gamma, 1e-3, 1e-3).unwrap();
            backward(&params, &config, &x, &y, &weights, &schedule)
                .unwrap()
                .1
                .flatten()
        };
        let g0 = grad_at(0.0);
        let g1 = grad_at(1.0);
        let gmid = grad_at(0.3);
        for ((a, b), m) in g1.iter().zip(&g0).zip(&gmid) {
            let expected = 0.3 * a + 0.7 * b;
            assert!((m - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_samples_do_not_reach_masked_expert() {
        // gamma = 0 leaves only the auxiliary path, so expert 2's parameters
        // must ignore the first half of the batch entirely (K = 2 puts its
        // mask start at N/2), and the gate gets no gradient at all.
        let config = ModelConfig::new(2, vec![2, 2]);
        let params = random_params(&config, 909);
        let schedule = MaskSchedule::new(2);
        let weights = LossWeights::new(0.0, 0.0, 0.0).unwrap();
        let (x, y) = random_batch(2, 8, 111);
        let (_, grad_a) = backward(&params, &config, &x, &y, &weights, &schedule).unwrap();

        // Corrupt the masked-out prefix (first 4 samples) for expert 2.
        let mut rows: Vec<Vec<f64>> = (0..8).map(|i| x.row(i).to_vec()).collect();
        let mut y2 = y.clone();
        for i in 0..4 {
            rows[i][0] += 0.37;
            y2[i] -= 1.3;
        }
        let x2 = Matrix::from_rows(&rows).unwrap();
        let (_, grad_b) = backward(&params, &config, &x2, &y2, &weights, &schedule).unwrap();

        assert_eq!(grad_a.experts[1].w1, grad_b.experts[1].w1);
        assert_eq!(grad_a.experts[1].b1, grad_b.experts[1].b1);
        assert_eq!(grad_a.experts[1].w2, grad_b.experts[1].w2);
        assert_eq!(grad_a.experts[1].b2, grad_b.experts[1].b2);
        assert!(grad_a.gate_w.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_loss_equals_forward_loss() {
        let config = ModelConfig::new(3, vec![2]);
        let params = random_params(&config, 121);
        let (x, y) = random_batch(3, 6, 131);
        let schedule = MaskSchedule::new(1);
        let weights = LossWeights::default();
        let (breakdown, _) = backward(&params, &config, &x, &y, &weights, &schedule).unwrap();
        let predictions = forward_batch(&params, &config, &x).unwrap();
        let direct = total_loss(&y, &predictions, &params, &weights, &schedule).unwrap();
        assert_eq!(breakdown, direct);
    }

    #[test]
    fn empty_batch_rejected() {
        let config = ModelConfig::new(2, vec![]);
        let params = MoeParameters::zeros(&config).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let weights = LossWeights::default();
        let schedule = MaskSchedule::new(0);
        let err = backward(&params, &config, &x, &[], &weights, &schedule).unwrap_err();
        assert!(matches!(
            err,
            Error::EmptyBatch { .. } | Error::ShapeMismatch { .. }
        ));
    }
}
