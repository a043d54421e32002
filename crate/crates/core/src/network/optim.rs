//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::{GradientSet, ParamSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Running first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// `θ ← θ − α · m̂ / (√v̂ + ε)`.
pub fn optimizer_step(params: &mut ParamSet, grads: &GradientSet, lr: f64, state: &mut AdamState) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(Error::Shape("gradient layout does not match parameters".into()));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Numeric(format!("gradient of {name}")));
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    let moments = state.m.tensors_mut().iter_mut().zip(state.v.tensors_mut().iter_mut());
    for ((p, g), (m, v)) in params.tensors_mut().iter_mut().zip(grads.tensors()).zip(moments) {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
            v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
            let mhat = m.data[i] / c1;
            let vhat = v.data[i] / c2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
