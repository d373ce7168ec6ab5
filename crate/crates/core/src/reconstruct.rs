//! Recovering a post-attention intermediate state from a layer output.
//!
//! Given `z`, find `y` with `MLP(y) ≈ z` by gradient descent on
//! `‖MLP(y) − z‖²`. The gradient is computed analytically through the down
//! projection, the gate/up product, the activation, the normalization Jacobian
//! and the residual identity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mlp_pass, LayerWeights, ModelConfig};

/// Default stopping loss per hidden dimension.
pub const DEFAULT_LOSS_TOL_PER_DIM: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Start from the target output itself.
    AtOutput,
    Zero,
    Custom(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionConfig {
    /// Initial (and maximum) step size α.
    pub step: f64,
    pub max_iters: usize,
    pub loss_tol: f64,
    pub init: InitMode,
    /// Step multiplier after a rejected step, in `(0, 1)`.
    pub backtrack_factor: f64,
}

impl ReconstructionConfig {
    pub fn for_hidden_size(d: usize) -> Self {
        Self {
            step: 0.1,
            max_iters: 5000,
            loss_tol: DEFAULT_LOSS_TOL_PER_DIM * d as f64,
            init: InitMode::AtOutput,
            backtrack_factor: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("step must be positive, got {}", self.step)));
        }
        if self.loss_tol.is_nan() || self.loss_tol <= 0.0 {
            return Err(Error::Config(format!("loss_tol must be positive, got {}", self.loss_tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::Config(format!(
                "backtrack_factor must lie in (0, 1), got {}",
                self.backtrack_factor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub y_star: Vec<f64>,
    /// `‖MLP(y_star) − z‖²`.
    pub final_loss: f64,
    /// Descent steps attempted, accepted or not.
    pub iterations: usize,
    pub converged: bool,
}

/// `‖MLP(y) − z‖²` and its gradient with respect to `y`.
pub fn mlp_loss_and_grad(w: &LayerWeights, cfg: &ModelConfig, y: &[f64], z: &[f64]) -> (f64, Vec<f64>) {
    let pass = mlp_pass(y, w, cfg);
    let resid: Vec<f64> = pass.out.iter().zip(z).map(|(o, t)| o - t).collect();
    let loss: f64 = resid.iter().map(|r| r * r).sum();

    let d_out: Vec<f64> = resid.iter().map(|r| 2.0 * r).collect();
    // Back through W_down: p-vector.
    let d_act = w.w_down.mul_vec(&d_out);
    let act = cfg.activation;
    let d_gate: Vec<f64> = d_act
        .iter()
        .zip(pass.gate.iter().zip(&pass.up))
        .map(|(da, (&g, &u))| da * u * act.derivative(g))
        .collect();
    let d_up: Vec<f64> = d_act.iter().zip(&pass.gate).map(|(da, &g)| da * act.apply(g)).collect();
    let d_h: Vec<f64> = w
        .w_gate
        .mul_vec(&d_gate)
        .into_iter()
        .zip(w.w_up.mul_vec(&d_up))
        .map(|(a, b)| a + b)
        .collect();

    // h_i = γ_i y_i s⁻¹ with s = √(c‖y‖² + ε):
    // ∂L/∂y_j = γ_j ∂h_j s⁻¹ − c y_j s⁻³ Σ_i ∂h_i γ_i y_i
    let inv = pass.inv_norm;
    let c = cfg.norm_mode.factor(y.len());
    let proj: f64 = d_h.iter().zip(&w.mlp_norm).zip(y).map(|((dh, g), v)| dh * g * v).sum();
    let radial = c * proj * inv * inv * inv;
    let grad = (0..y.len())
        .map(|j| d_out[j] + w.mlp_norm[j] * d_h[j] * inv - radial * y[j])
        .collect();
    (loss, grad)
}

/// `‖MLP(y) − z‖²` alone.
pub fn mlp_loss(w: &LayerWeights, cfg: &ModelConfig, y: &[f64], z: &[f64]) -> f64 {
    let out = mlp_pass(y, w, cfg).out;
    out.iter().zip(z).map(|(o, t)| (o - t) * (o - t)).sum()
}

/// Inverts the residual MLP at `z` by backtracking gradient descent.
pub fn invert_mlp(
    w: &LayerWeights,
    cfg: &ModelConfig,
    z: &[f64],
    rcfg: &ReconstructionConfig,
) -> Result<ReconstructionResult> {
    invert_mlp_logged(w, cfg, z, rcfg).map(|(r, _)| r)
}

/// As [`invert_mlp`], also returning the loss of every accepted iterate (starting point first).
pub fn invert_mlp_logged(
    w: &LayerWeights,
    cfg: &ModelConfig,
    z: &[f64],
    rcfg: &ReconstructionConfig,
) -> Result<(ReconstructionResult, Vec<f64>)> {
    rcfg.validate()?;
    let d = z.len();
    let mut y = match &rcfg.init {
        InitMode::AtOutput => z.to_vec(),
        InitMode::Zero => vec![0.0; d],
        InitMode::Custom(v) if v.len() == d => v.clone(),
        InitMode::Custom(v) => {
            return Err(Error::ShapeMismatch(format!(
                "custom initial point has length {}, expected {d}",
                v.len()
            )))
        }
    };
    let (mut loss, mut grad) = mlp_loss_and_grad(w, cfg, &y, z);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("initial reconstruction loss is {loss}")));
    }
    let mut log = vec![loss];
    let mut step = rcfg.step;
    let min_step = rcfg.step * 1e-30;
    let regrow = rcfg.backtrack_factor.sqrt();
    let mut iterations = 0;
    while loss > rcfg.loss_tol && iterations < rcfg.max_iters {
        iterations += 1;
        let trial: Vec<f64> = y.iter().zip(&grad).map(|(v, g)| v - step * g).collect();
        let (trial_loss, trial_grad) = mlp_loss_and_grad(w, cfg, &trial, z);
        if trial_loss.is_finite() && trial_loss < loss {
            y = trial;
            loss = trial_loss;
            grad = trial_grad;
            log.push(loss);
            step = (step / regrow).min(rcfg.step);
        } else {
            step *= rcfg.backtrack_factor;
            if step < min_step {
                // Roundoff floor: no representable descent step remains.
                break;
            }
        }
    }
    let result = ReconstructionResult { converged: loss <= rcfg.loss_tol, y_star: y, final_loss: loss, iterations };
    Ok((result, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_model, mlp_forward_row, Model};
    use crate::numerics::{finite_diff_gradient, max_relative_error, norm, random_matrix, Matrix, SeededRng};

    fn model(d: usize, p: usize) -> Model {
        generate_model(&ModelConfig::new(d, p, 1, 4 * d), 21).unwrap()
    }

    #[test]
    fn zero_at_exact_output() {
        let m = model(16, 40);
        let w = &m.layers[0];
        let y = m.embedding.row(3).to_vec();
        let z = mlp_forward_row(&y, w, &m.config);
        let (loss, grad) = mlp_loss_and_grad(w, &m.config, &y, &z);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = model(16, 40);
        let w = &m.layers[0];
        let mut rng = SeededRng::new(8, 0);
        for _ in 0..10 {
            let y = random_matrix(&mut rng, 1, 16, 1.0).unwrap().into_vec();
            let z = random_matrix(&mut rng, 1, 16, 1.0).unwrap().into_vec();
            let (_, grad) = mlp_loss_and_grad(w, &m.config, &y, &z);
            let fd = finite_diff_gradient(|v| mlp_loss(w, &m.config, v, &z), &y, 1e-6).unwrap();
            assert!(max_relative_error(&grad, &fd, 1e-8) < 1e-4);
        }
    }

    #[test]
    fn identity_mlp_gradient_is_quadratic() {
        let m = model(16, 40);
        let mut w = m.layers[0].clone();
        w.w_up = Matrix::zeros(16, 40);
        w.w_down = Matrix::zeros(40, 16);
        let y: Vec<f64> = (0..16).map(|i| i as f64 * 0.1 - 0.5).collect();
        let z: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let (_, grad) = mlp_loss_and_grad(&w, &m.config, &y, &z);
        for j in 0..16 {
            assert_eq!(grad[j], 2.0 * (y[j] - z[j]));
        }
        let r = invert_mlp(&w, &m.config, &z, &ReconstructionConfig::for_hidden_size(16)).unwrap();
        assert!(r.converged && r.iterations <= 1);
        assert_eq!(r.y_star, z);
    }

    #[test]
    fn forward_then_invert() {
        let m = model(64, 176);
        let w = &m.layers[0];
        let rcfg = ReconstructionConfig { loss_tol: 1e-16 * 64.0, ..ReconstructionConfig::for_hidden_size(64) };
        for t in 0..8 {
            let y0 = m.embedding.row(t).to_vec();
            let z = mlp_forward_row(&y0, w, &m.config);
            let (r, log) = invert_mlp_logged(w, &m.config, &z, &rcfg).unwrap();
            assert!(r.converged);
            assert!(r.final_loss <= 1e-16 * 64.0);
            assert_eq!(r.final_loss, mlp_loss(w, &m.config, &r.y_star, &z));
            let err: Vec<f64> = r.y_star.iter().zip(&y0).map(|(a, b)| a - b).collect();
            assert!(norm(&err) < 1e-6 * norm(&y0));
            assert!(log.windows(2).all(|p| p[1] <= p[0]));
        }
    }

    #[test]
    fn gelu_inverts() {
        let mut cfg = ModelConfig::new(32, 88, 1, 64);
        cfg.activation = crate::model::Activation::Gelu;
        let m = generate_model(&cfg, 2).unwrap();
        let w = &m.layers[0];
        let y0 = m.embedding.row(5).to_vec();
        let z = mlp_forward_row(&y0, w, &cfg);
        let r = invert_mlp(w, &cfg, &z, &ReconstructionConfig::for_hidden_size(32)).unwrap();
        assert!(r.converged);
        let err: Vec<f64> = r.y_star.iter().zip(&y0).map(|(a, b)| a - b).collect();
        assert!(norm(&err) < 1e-5 * norm(&y0));
    }

    #[test]
    fn mean_squares_gradient() {
        // At the generator's weight scale this mode is far from the identity, so only
        // the gradient is checked here.
        for act in [crate::model::Activation::Silu, crate::model::Activation::Gelu] {
            let mut cfg = ModelConfig::new(32, 88, 1, 64);
            cfg.activation = act;
            cfg.norm_mode = crate::model::NormMode::MeanSquares;
            let m = generate_model(&cfg, 2).unwrap();
            let w = &m.layers[0];
            let z = mlp_forward_row(m.embedding.row(5), w, &cfg);
            let y = m.embedding.row(6);
            let fd = finite_diff_gradient(|v| mlp_loss(w, &cfg, v, &z), y, 1e-6).unwrap();
            let (_, g) = mlp_loss_and_grad(w, &cfg, y, &z);
            assert!(max_relative_error(&g, &fd, 1e-8) < 1e-4);
        }
    }

    #[test]
    fn bad_config_and_budget() {
        let m = model(16, 40);
        let w = &m.layers[0];
        let z = m.embedding.row(0).to_vec();
        let mut rcfg = ReconstructionConfig::for_hidden_size(16);
        rcfg.backtrack_factor = 1.0;
        assert!(matches!(invert_mlp(w, &m.config, &z, &rcfg), Err(Error::Config(_))));
        let rcfg = ReconstructionConfig { max_iters: 1, init: InitMode::Zero, ..ReconstructionConfig::for_hidden_size(16) };
        let r = invert_mlp(w, &m.config, &z, &rcfg).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
        let rcfg = ReconstructionConfig { init: InitMode::Custom(vec![0.0; 3]), ..ReconstructionConfig::for_hidden_size(16) };
        assert!(invert_mlp(w, &m.config, &z, &rcfg).is_err());
        let inf = vec![f64::INFINITY; 16];
        assert!(matches!(
            invert_mlp(w, &m.config, &inf, &ReconstructionConfig::for_hidden_size(16)),
            Err(Error::NonFinite(_))
        ));
    }
}
