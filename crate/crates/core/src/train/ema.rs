use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Shadow copy of the parameters, updated as an exponential moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    pub shadow: ParamStore<f32>,
    pub updates: u64,
}

impl Ema {
    pub fn new(params: &ParamStore<f32>) -> Self {
        Self {
            shadow: params.clone(),
            updates: 0,
        }
    }

    /// Decay for the next update: `min(max_decay, (1 + t) / (10 + t))`.
    pub fn warmup_decay(&self, max_decay: f64) -> f64 {
        let t = self.updates as f64;
        max_decay.min((1.0 + t) / (10.0 + t))
    }

    pub fn update(&mut self, params: &ParamStore<f32>, decay: f64) -> Result<()> {
        ema_update(&mut self.shadow, params, decay)?;
        self.updates += 1;
        Ok(())
    }
}

/// `shadow ← decay·shadow + (1 − decay)·params`
pub fn ema_update(shadow: &mut ParamStore<f32>, params: &ParamStore<f32>, decay: f64) -> Result<()> {
    if shadow.len() != params.len() {
        return Err(Error::Contract(format!(
            "shadow holds {} tensors, model {}",
            shadow.len(),
            params.len()
        )));
    }
    let (d, e) = (decay as f32, (1.0 - decay) as f32);
    for (name, s) in shadow.iter_mut() {
        let p = params.get(name)?;
        if p.shape() != s.shape() {
            return Err(Error::Contract(format!("{name}: shadow {:?} vs {:?}", s.shape(), p.shape())));
        }
        for (s, &p) in s.data_mut().iter_mut().zip(p.data()) {
            *s = d * *s + e * p;
        }
    }
    Ok(())
}
