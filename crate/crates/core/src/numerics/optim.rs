//! Adam optimizer and cosine learning-rate schedule.

use crate::error::{CoreError, Result};

use super::{Scalar, Tensor};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment accumulators plus the shared step
/// counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &[Tensor<S>]) -> Self {
        OptimizerState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam step over a flat parameter list, in place.
pub fn adam_update<S: Scalar>(
    params: &mut [Tensor<S>],
    grads: &[Tensor<S>],
    state: &mut OptimizerState<S>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(CoreError::contract("adam learning rate must be positive"));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(CoreError::contract(format!(
            "adam: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step;
    let b1 = S::of(cfg.beta1);
    let b2 = S::of(cfg.beta2);
    let one = S::one();
    let bias1 = S::of(1.0 - cfg.beta1.powi(t as i32));
    let bias2 = S::of(1.0 - cfg.beta2.powi(t as i32));
    let lr_s = S::of(lr);
    let eps = S::of(cfg.eps);

    for i in 0..params.len() {
        if params[i].shape() != grads[i].shape() {
            return Err(CoreError::contract(format!(
                "adam shape mismatch at parameter {}: {:?} vs grad {:?}",
                i,
                params[i].shape(),
                grads[i].shape()
            )));
        }
        let p = params[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads[i].data();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            p[j] -= lr_s * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine decay from `lr_start` at step 0 to `lr_end` at `total_steps`.
/// Steps beyond the total clamp to `lr_end`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_start: f64, lr_end: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return lr_end;
    }
    let ratio = step as f64 / total_steps as f64;
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * ratio).cos())
}
