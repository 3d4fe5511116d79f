use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

pub const DEFAULT_LR: f64 = 1e-3;

/// First and second moment estimates, one pair per parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix>, config: AdamConfig) -> Self {
        let m: Vec<Matrix> = params
            .into_iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        let v = m.clone();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn first_moment(&self, i: usize) -> &Matrix {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Matrix {
        &self.v[i]
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TensorError> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(TensorError::Invalid(format!("learning rate {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::Invalid(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(TensorError::Shape {
                op: "adam_step",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].as_slice();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = p.data_mut();
        for j in 0..g.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            w[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        if !w.iter().all(|x| x.is_finite()) {
            return Err(TensorError::NonFinite("adam_step"));
        }
    }
    Ok(())
}
