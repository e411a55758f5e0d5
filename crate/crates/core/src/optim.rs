//! AdamW with decoupled weight decay, and the linear warmup-decay schedule.

use thiserror::Error;

use crate::model::{ModelConfig, Params};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in tensor {0:?}")]
    NonFiniteGradient(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Optimizer hyperparameters. Defaults follow the usual fine-tuning recipe:
/// lr 1e-5, weight decay 1e-2, 10% linear warmup then linear decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 1e-2,
            warmup_frac: 0.10,
            total_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning rate at `step` in [0, total]: linear 0 -> lr over the warmup
/// steps, then linear lr -> 0 over the remainder.
pub fn lr_at(step: usize, config: &OptimConfig) -> f64 {
    let total = config.total_steps as f64;
    let warmup = config.warmup_frac * total;
    let s = step as f64;
    if s <= warmup {
        config.lr * s / warmup
    } else {
        config.lr * (total - s) / (total - warmup)
    }
}

/// Adam moment estimates, shaped like the parameters they track.
pub struct AdamState<S> {
    m: Params<S>,
    v: Params<S>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: &ModelConfig) -> Result<Self, OptimError> {
        Ok(Self { m: Params::zeros(config)?, v: Params::zeros(config)?, step: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update: bias-corrected Adam moments on the gradient step, with
/// weight decay `lr * wd * theta` applied separately.
pub fn adamw_step<S: Scalar>(
    params: &mut Params<S>,
    grads: &Params<S>,
    state: &mut AdamState<S>,
    lr: f64,
    config: &OptimConfig,
) -> Result<(), OptimError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let (b1, b2) = (config.beta1, config.beta2);

    // Gradients are immutable here; pair them by tensor order.
    let grad_tensors = grads.named_tensors();
    let mut param_tensors = params.tensors_mut();
    let mut m_tensors = state.m.tensors_mut();
    let mut v_tensors = state.v.tensors_mut();
    for (((p, g), m), v) in param_tensors
        .iter_mut()
        .zip(&grad_tensors)
        .zip(m_tensors.iter_mut())
        .zip(v_tensors.iter_mut())
    {
        debug_assert_eq!(p.0, g.name);
        for i in 0..p.1.len() {
            let grad = g.data[i].widen();
            if !grad.is_finite() {
                return Err(OptimError::NonFiniteGradient(g.name.clone()));
            }
            let m_new = b1 * m.1[i].widen() + (1.0 - b1) * grad;
            let v_new = b2 * v.1[i].widen() + (1.0 - b2) * grad * grad;
            m.1[i] = S::from_f64_lossy(m_new);
            v.1[i] = S::from_f64_lossy(v_new);
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            let theta = p.1[i].widen();
            let update = lr * m_hat / (v_hat.sqrt() + config.eps) + lr * config.weight_decay * theta;
            p.1[i] = S::from_f64_lossy(theta - update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn opt_config(lr: f64, wd: f64, total: usize) -> OptimConfig {
        OptimConfig { lr, weight_decay: wd, total_steps: total, ..OptimConfig::default() }
    }

    #[test]
    fn lr_anchor_points() {
        let cfg = opt_config(1e-5, 0.0, 1000);
        assert_eq!(lr_at(50, &cfg), 5e-6);
        assert_eq!(lr_at(100, &cfg), 1e-5);
        assert_eq!(lr_at(1000, &cfg), 0.0);
        assert_eq!(lr_at(0, &cfg), 0.0);
    }

    #[test]
    fn lr_is_piecewise_linear_and_peaks_at_warmup() {
        let cfg = opt_config(2e-4, 0.0, 400);
        let peak_step = (cfg.warmup_frac * cfg.total_steps as f64) as usize;
        let max = (0..=400).map(|s| lr_at(s, &cfg)).fold(0.0f64, f64::max);
        assert_relative_eq!(max, cfg.lr, epsilon = 1e-18);
        assert_relative_eq!(lr_at(peak_step, &cfg), cfg.lr, epsilon = 1e-18);
        // Continuity at the knee.
        let before = lr_at(peak_step - 1, &cfg);
        let after = lr_at(peak_step + 1, &cfg);
        assert!(before < cfg.lr && after < cfg.lr);
    }

    fn scalar_model() -> (ModelConfig, Params<f64>, Params<f64>) {
        // Smallest valid config; treat one bias entry as "the scalar".
        let cfg = ModelConfig {
            vocab_size: 2,
            d_model: 1,
            n_layers: 1,
            n_heads: 1,
            d_ff: 1,
            max_len: 1,
            seed: 0,
        };
        let params = Params::<f64>::zeros(&cfg).unwrap();
        let grads = Params::<f64>::zeros(&cfg).unwrap();
        (cfg, params, grads)
    }

    #[test]
    fn zero_gradients_zero_decay_leave_params_unchanged() {
        let (cfg, mut params, grads) = scalar_model();
        let mut before = params.clone();
        let mut state = AdamState::new(&cfg).unwrap();
        let opt = opt_config(1e-3, 0.0, 10);
        adamw_step(&mut params, &grads, &mut state, 1e-3, &opt).unwrap();
        assert_eq!(
            params.tensors_mut().iter().map(|t| t.1.to_vec()).collect::<Vec<_>>(),
            before.tensors_mut().iter().map(|t| t.1.to_vec()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn single_step_matches_closed_form() {
        // One step on a scalar with g = 1: after bias correction
        // m_hat = 1, v_hat = 1, so the update is lr / (1 + eps).
        let (cfg, mut params, mut grads) = scalar_model();
        params.out_bias[0] = 0.5;
        grads.out_bias[0] = 1.0;
        let mut state = AdamState::new(&cfg).unwrap();
        let opt = opt_config(1e-3, 0.0, 10);
        adamw_step(&mut params, &grads, &mut state, opt.lr, &opt).unwrap();
        let expected = 0.5 - opt.lr * (1.0 / (1.0 + opt.eps));
        assert_relative_eq!(params.out_bias[0], expected, epsilon = 1e-8);
    }

    #[test]
    fn weight_decay_shrinks_params_with_zero_gradients() {
        let (cfg, mut params, grads) = scalar_model();
        params.out_bias[0] = 2.0;
        let mut state = AdamState::new(&cfg).unwrap();
        let opt = opt_config(1e-2, 1e-1, 10);
        adamw_step(&mut params, &grads, &mut state, opt.lr, &opt).unwrap();
        let expected = 2.0 * (1.0 - opt.lr * opt.weight_decay);
        assert_relative_eq!(params.out_bias[0], expected, epsilon = 1e-12);
        adamw_step(&mut params, &grads, &mut state, opt.lr, &opt).unwrap();
        let expected2 = expected * (1.0 - opt.lr * opt.weight_decay);
        assert_relative_eq!(params.out_bias[0], expected2, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let (cfg, mut params, mut grads) = scalar_model();
        grads.out_bias[0] = f64::NAN;
        let mut state = AdamState::new(&cfg).unwrap();
        let opt = opt_config(1e-3, 0.0, 10);
        assert!(matches!(
            adamw_step(&mut params, &grads, &mut state, opt.lr, &opt),
            Err(OptimError::NonFiniteGradient(_))
        ));
    }
}
