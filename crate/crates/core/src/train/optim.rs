use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment buffers and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl OptimState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// Matrices are decayed; vectors (biases, norms) and the state-matrix logs are not.
pub fn decays(name: &str, value: &Tensor<f32>) -> bool {
    value.shape().len() >= 2 && !name.ends_with("a_log") && name != "pos_embed"
}

/// Names the first parameter whose gradient holds a NaN or infinity.
pub fn check_finite(grads: &ParamStore<f32>) -> Result<()> {
    match grads.iter().find(|(_, g)| !g.all_finite()) {
        Some((name, _)) => Err(Error::Numeric(format!("non-finite gradient in {name}"))),
        None => Ok(()),
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamStore<f32>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale((max_norm / (norm + 1e-6)) as f32);
    }
    norm
}

impl AdamW {
    /// One decoupled-decay Adam update. Nothing is modified when a gradient is non-finite.
    pub fn step(&self, params: &mut ParamStore<f32>, grads: &ParamStore<f32>, state: &mut OptimState, lr: f64) -> Result<()> {
        check_finite(grads)?;
        for (name, g) in grads.iter() {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "gradient of {name} is {:?}, parameter is {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = self.eps as f32;
        for (name, p) in params.iter_mut() {
            let Ok(g) = grads.get(name) else { continue };
            let decay = if decays(name, p) { (1.0 - lr * self.weight_decay) as f32 } else { 1.0 };
            let m = state.m.get_mut(name).ok_or_else(|| Error::Contract(format!("no first moment for {name}")))?;
            let m = m.data_mut();
            let v = state.v.get_mut(name).ok_or_else(|| Error::Contract(format!("no second moment for {name}")))?;
            let v = v.data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *p *= decay;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
