//! AdamW with a cosine learning-rate decay and no warmup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

impl AdamWConfig {
    /// Learning rate after `step` completed updates out of `total_steps`.
    pub fn cosine_lr(&self, step: u64, total_steps: u64) -> f64 {
        if total_steps == 0 {
            return self.lr;
        }
        let frac = (step.min(total_steps)) as f64 / total_steps as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// First and second moment estimates plus the number of completed updates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R> {
    pub m: Vec<R>,
    pub v: Vec<R>,
    pub step: u64,
}

impl<R: Real> AdamState<R> {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![R::zero(); n], v: vec![R::zero(); n], step: 0 }
    }
}

/// One decoupled-weight-decay Adam step at learning rate `lr`.
pub fn adamw_update<R: Real>(
    params: &mut [R],
    grads: &[R],
    state: &mut AdamState<R>,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Mismatch(format!(
            "optimizer shapes differ: {} params, {} grads, {}/{} moments",
            n,
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (R::of(cfg.beta1), R::of(cfg.beta2));
    let (c1, c2) = (R::one() - b1, R::one() - b2);
    let bc1 = R::of(1.0 - cfg.beta1.powi(t));
    let bc2 = R::of(1.0 - cfg.beta2.powi(t));
    let lr_r = R::of(lr);
    let decay = R::one() - R::of(lr * cfg.weight_decay);
    let eps = R::of(cfg.eps);
    for i in 0..n {
        let g = grads[i];
        let m = b1 * state.m[i] + c1 * g;
        let v = b2 * state.v[i] + c2 * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let update = (m / bc1) / ((v / bc2).sqrt() + eps);
        params[i] = params[i] * decay - lr_r * update;
    }
    Ok(())
}
