use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warmup to `peak`, then cosine decay to `min` at `total`.
pub fn cosine_lr(step: usize, warmup: usize, total: usize, peak: f64, min: f64) -> Result<f64> {
    if warmup > total {
        return Err(Error::Config(format!("warmup {warmup} exceeds total steps {total}")));
    }
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(peak);
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    Ok(min + 0.5 * (peak - min) * (1.0 + (PI * progress).cos()))
}
