//! MambaMLP blocks, encoder assembly and parameter accounting.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ModelConfig, ScanMode};
use crate::error::{Error, Result};
use crate::layout::{order_permutation, OrderKind};
use crate::params::{Bound, ParamStore, Scope};
use crate::scan::{init_mixer, mamba_mixer_forward, mixer_param_count, MixerConfig, ScanDirection};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Shape of one MambaMLP block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSpec {
    pub mixer: MixerConfig,
    pub ff: usize,
    pub scans: usize,
}

impl BlockSpec {
    pub fn new(cfg: &ModelConfig, width: usize, scans: usize) -> Self {
        Self {
            mixer: cfg.mixer(width),
            ff: ModelConfig::ff_dim(width),
            scans,
        }
    }

    pub fn width(&self) -> usize {
        self.mixer.d_model
    }

    pub fn param_count(&self) -> usize {
        let d = self.width();
        4 * d + self.scans * mixer_param_count(&self.mixer) + 3 * d * self.ff
    }
}

pub(crate) fn uniform<T: Element>(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

pub(crate) fn normal<T: Element>(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Linear layer weight `[fan_in, fan_out]` with `U(±1/√fan_in)`.
pub(crate) fn linear_weight<T: Element>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    uniform(rng, vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
}

pub(crate) fn init_norm<T: Element>(store: &mut ParamStore<T>, prefix: &str, width: usize) {
    store.insert(format!("{prefix}gamma"), Tensor::full([width], T::one()));
    store.insert(format!("{prefix}beta"), Tensor::zeros([width]));
}

pub(crate) fn norm<T: Element>(tape: &mut Tape<T>, x: Var, p: &Scope<'_>) -> Result<Var> {
    tape.layer_norm(x, p.var("gamma")?, p.var("beta")?, LN_EPS)
}

/// `x · w + b`
pub(crate) fn linear<T: Element>(tape: &mut Tape<T>, x: Var, p: &Scope<'_>) -> Result<Var> {
    let y = tape.matmul(x, p.var("w")?)?;
    tape.add(y, p.var("b")?)
}

pub fn init_block<T: Element>(store: &mut ParamStore<T>, prefix: &str, spec: &BlockSpec, rng: &mut impl Rng) {
    let (d, ff) = (spec.width(), spec.ff);
    init_norm(store, &format!("{prefix}norm1."), d);
    for s in 0..spec.scans {
        init_mixer(store, &format!("{prefix}mixer.{s}."), &spec.mixer, rng);
    }
    init_norm(store, &format!("{prefix}norm2."), d);
    store.insert(format!("{prefix}mlp.w_up"), linear_weight(rng, d, ff));
    store.insert(format!("{prefix}mlp.w_gate"), linear_weight(rng, d, ff));
    store.insert(format!("{prefix}mlp.w_down"), linear_weight(rng, ff, d));
}

/// `(silu(x·w_gate) ⊙ (x·w_up)) · w_down`
pub fn swiglu_forward<T: Element>(tape: &mut Tape<T>, x: Var, p: &Scope<'_>) -> Result<Var> {
    let g = tape.matmul(x, p.var("w_gate")?)?;
    let g = tape.silu(g);
    let up = tape.matmul(x, p.var("w_up")?)?;
    let h = tape.mul(g, up)?;
    tape.matmul(h, p.var("w_down")?)
}

fn mlp_residual<T: Element>(tape: &mut Tape<T>, x: Var, p: &Scope<'_>) -> Result<Var> {
    let h = norm(tape, x, &p.sub("norm2."))?;
    let m = swiglu_forward(tape, h, &p.sub("mlp."))?;
    tape.add(x, m)
}

/// Causal block: `x + mixer(LN(x))`, then `+ swiglu(LN(·))`.
pub fn block_forward_pretrain<T: Element>(tape: &mut Tape<T>, x: Var, p: &Scope<'_>, spec: &BlockSpec) -> Result<Var> {
    if p.has("mixer.1.w_in") {
        return Err(Error::Contract(format!(
            "{}: pretrain blocks take a single scan, found directional copies",
            p.prefix()
        )));
    }
    let h = norm(tape, x, &p.sub("norm1."))?;
    let m = mamba_mixer_forward(tape, h, &p.sub("mixer.0."), &spec.mixer, ScanDirection::Forward)?;
    let x = tape.add(x, m)?;
    mlp_residual(tape, x, p)
}

/// Visiting orders of the four scans over a raster `rows × cols` grid:
/// row-major forward, row-major backward, column-major forward, column-major backward.
pub fn cross_scan_orders(rows: usize, cols: usize) -> [Vec<usize>; 4] {
    let col = order_permutation(rows, cols, OrderKind::ColForward);
    let mut col_rev = col.clone();
    col_rev.reverse();
    [(0..rows * cols).collect(), (0..rows * cols).rev().collect(), col, col_rev]
}

/// Bidirectional block over a raster token grid; the four scans are averaged.
pub fn block_forward_finetune<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    p: &Scope<'_>,
    spec: &BlockSpec,
    grid: (usize, usize),
) -> Result<Var> {
    let l = tape.shape(x).get(1).copied().unwrap_or(0);
    if l != grid.0 * grid.1 {
        return Err(Error::dim(format!("sequence length {l} != grid {}x{}", grid.0, grid.1)));
    }
    if !p.has("mixer.3.w_in") {
        return Err(Error::Contract(format!("{}: finetune blocks need four scans", p.prefix())));
    }
    let h = norm(tape, x, &p.sub("norm1."))?;
    let orders = cross_scan_orders(grid.0, grid.1);
    let mut acc: Option<Var> = None;
    for (s, order) in orders.iter().enumerate() {
        let mp = p.sub(&format!("mixer.{s}."));
        let y = match s {
            0 => mamba_mixer_forward(tape, h, &mp, &spec.mixer, ScanDirection::Forward)?,
            1 => mamba_mixer_forward(tape, h, &mp, &spec.mixer, ScanDirection::Reverse)?,
            _ => {
                let inv = crate::layout::invert_permutation(order).expect("scan order is a permutation");
                let hs = tape.permute_seq(h, order)?;
                let ys = mamba_mixer_forward(tape, hs, &mp, &spec.mixer, ScanDirection::Forward)?;
                tape.permute_seq(ys, &inv)?
            }
        };
        acc = Some(match acc {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
    }
    let m = tape.scale(acc.expect("four scans"), T::lit(0.25));
    let x = tape.add(x, m)?;
    mlp_residual(tape, x, p)
}

/// Exact number of encoder parameters for `cfg`.
pub fn encoder_param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.width;
    let spec = BlockSpec::new(cfg, d, cfg.scan_mode.scans());
    cfg.token_dim() * d + d + cfg.seq_len() * d + cfg.depth * spec.param_count()
}

pub fn head_param_count(cfg: &ModelConfig) -> usize {
    2 * cfg.width + cfg.width * cfg.num_classes + cfg.num_classes
}

/// Patch embedding, 2-D positional table and `depth` blocks.
pub fn init_encoder<T: Element>(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let d = cfg.width;
    let mut store = ParamStore::new();
    store.insert("patch_embed.w", linear_weight(rng, cfg.token_dim(), d));
    store.insert("patch_embed.b", Tensor::zeros([d]));
    store.insert("pos_embed", normal(rng, vec![cfg.seq_len(), d], 0.02));
    let spec = BlockSpec::new(cfg, d, cfg.scan_mode.scans());
    for i in 0..cfg.depth {
        init_block(&mut store, &format!("blocks.{i}."), &spec, rng);
    }
    Ok(store)
}

/// Encoder parameters and their analytic count.
pub fn build_encoder<T: Element>(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<(ParamStore<T>, usize)> {
    let store = init_encoder(cfg, rng)?;
    Ok((store, encoder_param_count(cfg)))
}

pub fn init_head<T: Element>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) {
    init_norm(store, "head_norm.", cfg.width);
    store.insert("head.w", normal(rng, vec![cfg.width, cfg.num_classes], 0.02));
    store.insert("head.b", Tensor::zeros([cfg.num_classes]));
}

/// `tokens: [B, L, p²·3]` → embeddings plus the positional rows of `positions`
/// (`B·L` raster patch indices).
pub fn embed<T: Element>(tape: &mut Tape<T>, tokens: Var, positions: &[usize], bound: &Bound) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 || positions.len() != s[0] * s[1] {
        return Err(Error::dim(format!(
            "embed: tokens {s:?} with {} positions",
            positions.len()
        )));
    }
    let e = linear(tape, tokens, &bound.scope("patch_embed."))?;
    let pos = tape.gather_rows(bound.get("pos_embed")?, positions)?;
    let d = tape.shape(pos)[1];
    let pos = tape.reshape(pos, &[s[0], s[1], d])?;
    tape.add(e, pos)
}

/// Runs the encoder blocks in the configured scan mode.
pub fn encoder_blocks<T: Element>(tape: &mut Tape<T>, x: Var, bound: &Bound, cfg: &ModelConfig) -> Result<Var> {
    let spec = BlockSpec::new(cfg, cfg.width, cfg.scan_mode.scans());
    let mut h = x;
    for i in 0..cfg.depth {
        let p = bound.scope(&format!("blocks.{i}."));
        h = match cfg.scan_mode {
            ScanMode::Uni1scan => block_forward_pretrain(tape, h, &p, &spec)?,
            ScanMode::Cross4scan => block_forward_finetune(tape, h, &p, &spec, cfg.grid())?,
        };
    }
    Ok(h)
}

/// Classifier over raster-ordered tokens: mean-pool → LN → linear.
pub fn classify_forward<T: Element>(tape: &mut Tape<T>, tokens: Var, bound: &Bound, cfg: &ModelConfig) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 || s[1] != cfg.seq_len() {
        return Err(Error::dim(format!("classifier input {s:?}, expected [B, {}, _]", cfg.seq_len())));
    }
    let positions: Vec<usize> = (0..s[0]).flat_map(|_| 0..s[1]).collect();
    let x = embed(tape, tokens, &positions, bound)?;
    let h = encoder_blocks(tape, x, bound, cfg)?;
    let pooled = tape.mean_axis(h, 1)?;
    let pooled = norm(tape, pooled, &bound.scope("head_norm."))?;
    linear(tape, pooled, &bound.scope("head."))
}

fn is_decoder(name: &str) -> bool {
    name.starts_with("decoder.")
}

fn is_head(name: &str) -> bool {
    name.starts_with("head.") || name.starts_with("head_norm.")
}

/// Turns a 1-scan pretraining parameter set into a 4-scan classifier.
///
/// Each block's scan is copied into all four directional slots, the decoder
/// is dropped and a fresh head is drawn from `rng`.
pub fn convert_params<T: Element>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<(ModelConfig, ParamStore<T>)> {
    if cfg.scan_mode != ScanMode::Uni1scan {
        return Err(Error::Contract("checkpoint is already a 4-scan model".into()));
    }
    let mut out = ParamStore::new();
    for (name, value) in params.iter() {
        if is_decoder(name) || is_head(name) {
            continue;
        }
        if let Some((block, rest)) = name.split_once(".mixer.0.") {
            for s in 0..4 {
                out.insert(format!("{block}.mixer.{s}.{rest}"), value.clone());
            }
        } else {
            out.insert(name.clone(), value.clone());
        }
    }
    let new_cfg = ModelConfig {
        scan_mode: ScanMode::Cross4scan,
        ..cfg.clone()
    };
    init_head(&mut out, &new_cfg, rng);
    Ok((new_cfg, out))
}
