use super::array::ParamSet;
use crate::error::{Error, Result};

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, a)| vec![0.0; a.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Applies one Adam update from the accumulated gradients, then clears them.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::InvalidState("optimizer state does not match parameters".into()));
    }
    if let Some(id) = params.ids().find(|&id| params.get(id).grad.is_none()) {
        return Err(Error::InvalidState(format!(
            "parameter {} has no gradient",
            params.name(id)
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (i, p) in params.arrays_mut().iter_mut().enumerate() {
        let g = p.grad.take().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p.values[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
