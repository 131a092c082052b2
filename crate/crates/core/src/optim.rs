//! Adam with bias correction and a constant learning rate.

use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

/// Learning rate of the segmentation track.
pub const SEGMENTATION_LR: f64 = 1e-4;
/// Learning rate of the classification track.
pub const CLASSIFICATION_LR: f64 = 1e-5;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &Model, lr: f64) -> Self {
        Self::for_params(model.parameters(), lr)
    }

    pub fn for_params(params: &[(String, Tensor)], lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Rebuilds a state from serialized parts; moments must be aligned.
    pub fn from_parts(
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::invalid("adam moment buffers are not aligned"));
        }
        Ok(AdamState { lr, beta1, beta2, eps, t, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }
}

/// The learning rate never changes during training.
pub fn constant_lr_schedule(state: &AdamState) -> f64 {
    state.lr
}

pub fn adam_step(model: &Model, state: &mut AdamState) -> Result<()> {
    adam_step_params(model.parameters(), state)
}

/// One Adam update over `params`, then clears their gradients.
pub fn adam_step_params(params: &[(String, Tensor)], state: &mut AdamState) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "optimizer tracks {} parameters, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    for ((name, t), m) in params.iter().zip(&state.m) {
        if t.grad_ref().is_none() {
            return Err(Error::MissingGradient(name.clone()));
        }
        if m.len() != t.numel() {
            return Err(Error::invalid(format!("moment buffer for `{name}` has the wrong length")));
        }
    }

    state.t += 1;
    let lr = constant_lr_schedule(state);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let t = state.t as f64;
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for (((_, param), m), v) in params.iter().zip(&mut state.m).zip(&mut state.v) {
        {
            let grad = param.grad_ref();
            let g = grad.as_ref().expect("checked above");
            let mut theta = param.data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        param.zero_grad();
    }
    Ok(())
}
