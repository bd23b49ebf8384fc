use serde::{Deserialize, Serialize};

use super::{Params, PARAM_NAMES};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// First and second moment estimates plus the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub first: Params<T>,
    pub second: Params<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(d: usize, m: usize) -> Self {
        AdamState {
            first: Params::zeros(d, m),
            second: Params::zeros(d, m),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified.
pub fn adam_step<T: Real>(
    params: &mut Params<T>,
    grads: &Params<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Param(format!("learning rate must be positive, got {lr}")));
    }
    for (name, g) in PARAM_NAMES.iter().zip(grads.slices()) {
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient in {name} at index {pos}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let (c1, c2) = (T::from_f64_lossy(c1), T::from_f64_lossy(c2));
    let (lr, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(cfg.eps));

    let grads = grads.slices();
    for (((p, g), m), v) in params
        .slices_mut()
        .into_iter()
        .zip(grads)
        .zip(state.first.slices_mut())
        .zip(state.second.slices_mut())
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
