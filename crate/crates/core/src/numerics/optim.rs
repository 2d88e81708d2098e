use serde::{Deserialize, Serialize};

use super::{NumericsError, Params};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-3 }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &Params, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self { config, m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One AdamW step using the gradients stored in `params`. Weight decay is
/// decoupled: `p -= lr * wd * p` before the bias-corrected Adam update.
pub fn adamw_step(params: &mut Params, state: &mut OptimizerState, lr: f64) -> Result<(), NumericsError> {
    if state.m.len() != params.len() {
        return Err(NumericsError::ShapeMismatch(format!(
            "optimizer tracks {} tensors, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate().map(|(i, (_, p))| (i, p)) {
        if state.m[i].len() != p.value.numel() || p.grad.numel() != p.value.numel() {
            return Err(NumericsError::ShapeMismatch(format!("optimizer state for {}", p.name)));
        }
    }
    let c = state.config;
    state.t += 1;
    let bc1 = 1.0 - c.beta1.powi(state.t as i32);
    let bc2 = 1.0 - c.beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = p.grad.data().to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            *w -= lr * c.weight_decay * *w;
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + c.eps);
        }
        if !p.value.is_finite() {
            return Err(NumericsError::NonFiniteValue(p.name.clone()));
        }
    }
    Ok(())
}
