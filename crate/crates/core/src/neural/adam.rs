use serde::{Deserialize, Serialize};

use super::unet::NetworkParams;
use crate::error::{Error, Result};
use crate::real::Real;

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R> {
    pub first_moment: NetworkParams<R>,
    pub second_moment: NetworkParams<R>,
    pub step_count: u64,
    pub hyper: AdamHyper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub learning_rate: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            learning_rate: 1e-4,
            epsilon: 1e-8,
        }
    }
}

impl<R: Real> AdamState<R> {
    pub fn new(params: &NetworkParams<R>, hyper: AdamHyper) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step_count: 0,
            hyper,
        }
    }
}

/// One bias-corrected Adam update. Fails before touching anything if a
/// gradient is not finite.
pub fn adam_step<R: Real>(
    params: &mut NetworkParams<R>,
    grads: &NetworkParams<R>,
    state: &mut AdamState<R>,
) -> Result<()> {
    params.validate()?;
    grads.validate()?;
    for (name, _, g) in grads.tensors() {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient {name}[{i}] = {}", g[i])));
        }
    }
    state.step_count += 1;
    let h = state.hyper;
    let t = state.step_count as i32;
    let (b1, b2) = (R::c(h.beta1), R::c(h.beta2));
    let c1 = R::c(1.0 - h.beta1.powi(t));
    let c2 = R::c(1.0 - h.beta2.powi(t));
    let (lr, eps) = (R::c(h.learning_rate), R::c(h.epsilon));
    let mut m = state.first_moment.tensors_mut();
    let mut v = state.second_moment.tensors_mut();
    for (((_, _, p), (_, _, g)), ((_, _, m), (_, _, v))) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(m.iter_mut().zip(v.iter_mut()))
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (R::one() - b1) * g[i];
            v[i] = b2 * v[i] + (R::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
