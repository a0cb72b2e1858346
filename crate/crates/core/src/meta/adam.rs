use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

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

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter in place.
pub fn adam_step(
    params: &mut [Tensor],
    names: &[String],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::validation(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: params[i].shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            let name = names.get(i).map_or("?", String::as_str);
            return Err(Error::Numerical(format!("non-finite gradient for parameter {name}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for k in 0..p.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
