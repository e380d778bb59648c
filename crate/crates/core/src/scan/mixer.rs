use rand::Rng;

use super::{selective_scan, ScanDirection, ScanOptions};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Scope};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Geometry of one selective token mixer (expand = 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixerConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub conv_k: usize,
    pub dt_rank: usize,
    pub scan: ScanOptions,
}

impl MixerConfig {
    /// Defaults for width `d_model`: `k = 4`, `r = max(D/16, 1)`.
    pub fn new(d_model: usize, d_state: usize) -> Self {
        Self {
            d_model,
            d_state,
            conv_k: 4,
            dt_rank: (d_model / 16).max(1),
            scan: ScanOptions::default(),
        }
    }
}

/// Parameter names (without prefix) and shapes.
pub fn mixer_param_shapes(cfg: &MixerConfig) -> Vec<(&'static str, Vec<usize>)> {
    let (d, n, r) = (cfg.d_model, cfg.d_state, cfg.dt_rank);
    vec![
        ("a_log", vec![d, n]),
        ("b_delta", vec![d]),
        ("conv_w", vec![d, cfg.conv_k]),
        ("w_b", vec![d, n]),
        ("w_c", vec![d, n]),
        ("w_delta_down", vec![d, r]),
        ("w_delta_up", vec![r, d]),
        ("w_gate", vec![d, d]),
        ("w_in", vec![d, d]),
        ("w_out", vec![d, d]),
    ]
}

pub fn mixer_param_count(cfg: &MixerConfig) -> usize {
    let (d, n, r, k) = (cfg.d_model, cfg.d_state, cfg.dt_rank, cfg.conv_k);
    3 * d * d + 3 * d * n + 2 * d * r + d * k + d
}

fn uniform<T: Element>(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Inserts freshly initialized mixer parameters under `prefix`.
pub fn init_mixer<T: Element>(store: &mut ParamStore<T>, prefix: &str, cfg: &MixerConfig, rng: &mut impl Rng) {
    let (d, n, r) = (cfg.d_model, cfg.d_state, cfg.dt_rank);
    for (name, shape) in mixer_param_shapes(cfg) {
        let value = match name {
            "a_log" => {
                let data = (0..d * n).map(|i| T::lit(((i % n) as f64 + 1.0).ln())).collect();
                Tensor::new(shape, data).expect("shape matches data")
            }
            "b_delta" => {
                let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
                let data = (0..d)
                    .map(|_| {
                        let dt = rng.gen_range(lo..hi).exp();
                        // inverse softplus
                        T::lit(dt + (-(-dt).exp_m1()).ln())
                    })
                    .collect();
                Tensor::new(shape, data).expect("shape matches data")
            }
            "conv_w" => uniform(rng, shape, 1.0 / (cfg.conv_k as f64).sqrt()),
            "w_delta_up" => uniform(rng, shape, 1.0 / (r as f64).sqrt()),
            _ => uniform(rng, shape, 1.0 / (d as f64).sqrt()),
        };
        store.insert(format!("{prefix}{name}"), value);
    }
}

fn forward_inner<T: Element>(tape: &mut Tape<T>, x: Var, p: &Scope<'_>, cfg: &MixerConfig) -> Result<Var> {
    let xi = tape.matmul(x, p.var("w_in")?)?;
    let conv = tape.depthwise_conv1d(xi, p.var("conv_w")?)?;
    let u = tape.silu(conv);

    let low = tape.matmul(u, p.var("w_delta_down")?)?;
    let dl = tape.matmul(low, p.var("w_delta_up")?)?;
    let dl = tape.add(dl, p.var("b_delta")?)?;
    let delta = tape.softplus(dl);
    let bm = tape.matmul(u, p.var("w_b")?)?;
    let cm = tape.matmul(u, p.var("w_c")?)?;
    let ea = tape.exp(p.var("a_log")?);
    let a = tape.neg(ea);

    let y = selective_scan(tape, u, delta, a, bm, cm, &cfg.scan)?;
    let g = tape.matmul(x, p.var("w_gate")?)?;
    let g = tape.silu(g);
    let yg = tape.mul(y, g)?;
    tape.matmul(yg, p.var("w_out")?)
}

/// Selective SSM token mixer over `x: [B, L, D]`.
///
/// `Reverse` runs the same pipeline on the time-reversed sequence and
/// reverses the result back.
pub fn mamba_mixer_forward<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    p: &Scope<'_>,
    cfg: &MixerConfig,
    direction: ScanDirection,
) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 3 || s[2] != cfg.d_model {
        return Err(Error::dim(format!("mixer input {s:?} must be [B, L, {}]", cfg.d_model)));
    }
    match direction {
        ScanDirection::Forward => forward_inner(tape, x, p, cfg),
        ScanDirection::Reverse => {
            let rev: Vec<usize> = (0..s[1]).rev().collect();
            let xr = tape.permute_seq(x, &rev)?;
            let y = forward_inner(tape, xr, p, cfg)?;
            tape.permute_seq(y, &rev)
        }
    }
}
