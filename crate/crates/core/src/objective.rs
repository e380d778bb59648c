//! Next-cluster prediction: targets, decoder and loss.
//!
//! Tokens stay patch-sized. Position `t` predicts the patch `k` positions
//! ahead, `k` being the number of patches per cluster, so every patch of
//! cluster `i + 1` is predicted from clusters `≤ i` (plus the earlier
//! positions of cluster `i`).

use std::path::Path;

use rand::Rng;

use crate::arch::{block_forward_pretrain, embed, encoder_blocks, encoder_param_count, init_block, init_encoder, init_norm, linear, linear_weight, norm, normal, BlockSpec};
use crate::config::{ModelConfig, NormUnit, TargetKind};
use crate::data::{write_ppm, PpmImage};
use crate::error::{Error, Result};
use crate::layout::{patchify_into, unpatchify, ClusterLayout, Image};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const NORM_EPS: f32 = 1e-6;

/// Regression targets for one image, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ArTargets {
    /// `[L − k, p²·3]`; row `t` is the patch at position `t + k`
    pub target: Tensor<f32>,
    pub shift: usize,
    /// `(mean, std)` used to standardize each row; `(0, 1)` for raw pixels
    pub stats: Vec<(f32, f32)>,
}

impl ArTargets {
    pub fn len(&self) -> usize {
        self.target.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn standardize(group: &[f32]) -> (f32, f32) {
    let n = group.len() as f64;
    let mean = group.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = group.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean as f32, (var + NORM_EPS as f64).sqrt() as f32)
}

/// Targets from layout-ordered tokens `[L, p²·3]`.
pub fn targets_from_tokens(tokens: &[f32], layout: &ClusterLayout, kind: TargetKind, unit: NormUnit) -> Result<ArTargets> {
    let (l, dim, k) = (layout.num_patches(), layout.token_dim(), layout.patches_per_cluster());
    if tokens.len() != l * dim {
        return Err(Error::Contract(format!(
            "{} token values for a layout of {l} x {dim}",
            tokens.len()
        )));
    }
    let n = l.saturating_sub(k);
    let mut stats = vec![(0.0f32, 1.0f32); l];
    match kind {
        TargetKind::Dvae => {
            return Err(Error::UnsupportedTarget(
                "dvae targets need an external tokenizer".into(),
            ))
        }
        TargetKind::RawPixel => {}
        TargetKind::NormedPixel => {
            let group = match unit {
                NormUnit::Cluster => k,
                NormUnit::Patch => 1,
            };
            for g in 0..l / group {
                let s = standardize(&tokens[g * group * dim..(g + 1) * group * dim]);
                stats[g * group..(g + 1) * group].fill(s);
            }
        }
    }
    let mut out = Vec::with_capacity(n * dim);
    for t in k..l {
        let (m, s) = stats[t];
        out.extend(tokens[t * dim..(t + 1) * dim].iter().map(|&v| (v - m) / s));
    }
    Ok(ArTargets {
        target: Tensor::new(vec![n, dim], out)?,
        shift: k,
        stats: stats[k..].to_vec(),
    })
}

pub fn build_targets(img: &Image, layout: &ClusterLayout, kind: TargetKind, unit: NormUnit) -> Result<ArTargets> {
    let mut tokens = vec![0.0f32; layout.num_patches() * layout.token_dim()];
    patchify_into(img, layout, &layout.token_positions(), &mut tokens)?;
    targets_from_tokens(&tokens, layout, kind, unit)
}

/// Inputs `[B, L, p²·3]` and stacked targets `[B, L − k, p²·3]` for a batch.
pub fn pretrain_batch(images: &[Image], layout: &ClusterLayout, kind: TargetKind, unit: NormUnit) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (l, dim, k) = (layout.num_patches(), layout.token_dim(), layout.patches_per_cluster());
    let positions = layout.token_positions();
    let mut tokens = vec![0.0f32; images.len() * l * dim];
    let mut targets = Vec::with_capacity(images.len() * l.saturating_sub(k) * dim);
    for (img, chunk) in images.iter().zip(tokens.chunks_mut(l * dim)) {
        patchify_into(img, layout, &positions, chunk)?;
        targets.extend_from_slice(targets_from_tokens(chunk, layout, kind, unit)?.target.data());
    }
    Ok((
        Tensor::new(vec![images.len(), l, dim], tokens)?,
        Tensor::new(vec![images.len(), l.saturating_sub(k), dim], targets)?,
    ))
}

pub fn decoder_param_count(cfg: &ModelConfig) -> usize {
    let (d, w, out) = (cfg.width, cfg.dec_width, cfg.token_dim());
    let spec = BlockSpec::new(cfg, w, 1);
    d * w + w + cfg.dec_depth * spec.param_count() + 2 * w + w * out + out
}

pub fn init_decoder<T: Element>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) {
    let (d, w, out) = (cfg.width, cfg.dec_width, cfg.token_dim());
    store.insert("decoder.proj_in.w", linear_weight(rng, d, w));
    store.insert("decoder.proj_in.b", Tensor::zeros([w]));
    let spec = BlockSpec::new(cfg, w, 1);
    for i in 0..cfg.dec_depth {
        init_block(store, &format!("decoder.blocks.{i}."), &spec, rng);
    }
    init_norm(store, "decoder.norm.", w);
    store.insert("decoder.proj_out.w", normal(rng, vec![w, out], 0.02));
    store.insert("decoder.proj_out.b", Tensor::zeros([out]));
}

/// Encoder plus decoder, ready for pretraining.
pub fn init_pretrain<T: Element>(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ParamStore<T>> {
    let mut store = init_encoder(cfg, rng)?;
    init_decoder(&mut store, cfg, rng);
    Ok(store)
}

pub fn pretrain_param_count(cfg: &ModelConfig) -> usize {
    encoder_param_count(cfg) + decoder_param_count(cfg)
}

/// `[B, L, D]` encoder states → `[B, L, p²·3]` predictions.
pub fn decoder_forward<T: Element>(tape: &mut Tape<T>, h: Var, bound: &Bound, cfg: &ModelConfig) -> Result<Var> {
    let spec = BlockSpec::new(cfg, cfg.dec_width, 1);
    let mut x = linear(tape, h, &bound.scope("decoder.proj_in."))?;
    for i in 0..cfg.dec_depth {
        x = block_forward_pretrain(tape, x, &bound.scope(&format!("decoder.blocks.{i}.")), &spec)?;
    }
    let x = norm(tape, x, &bound.scope("decoder.norm."))?;
    linear(tape, x, &bound.scope("decoder.proj_out."))
}

/// Layout-ordered tokens `[B, L, p²·3]` → predictions `[B, L, p²·3]`.
pub fn pretrain_forward<T: Element>(
    tape: &mut Tape<T>,
    tokens: Var,
    layout: &ClusterLayout,
    bound: &Bound,
    cfg: &ModelConfig,
) -> Result<Var> {
    let b = tape.shape(tokens)[0];
    let positions: Vec<usize> = (0..b).flat_map(|_| layout.token_positions()).collect();
    let x = embed(tape, tokens, &positions, bound)?;
    let h = encoder_blocks(tape, x, bound, cfg)?;
    decoder_forward(tape, h, bound, cfg)
}

/// Mean squared error between the first `L − k` predictions and the targets.
pub fn ar_loss<T: Element>(tape: &mut Tape<T>, preds: Var, targets: Var, shift: usize) -> Result<Var> {
    let (ps, ts) = (tape.shape(preds).to_vec(), tape.shape(targets).to_vec());
    let ok = ps.len() == 3 && ts.len() == 3 && ps[0] == ts[0] && ps[2] == ts[2] && ps[1] == ts[1] + shift;
    if !ok {
        return Err(Error::Contract(format!(
            "predictions {ps:?} and targets {ts:?} do not share a layout with shift {shift}"
        )));
    }
    let head = tape.narrow(preds, 1, 0, ts[1])?;
    tape.mse(head, targets)
}

/// Writes `input | prediction | target` side by side.
///
/// Predictions and targets are mapped back to pixels with the target
/// statistics; the first cluster, which has no prediction, is left black.
pub fn dump_triptych(
    path: &Path,
    img: &Image,
    preds: &Tensor<f32>,
    targets: &ArTargets,
    layout: &ClusterLayout,
) -> Result<()> {
    let (l, dim, k) = (layout.num_patches(), layout.token_dim(), targets.shift);
    if preds.shape() != [l, dim] {
        return Err(Error::Contract(format!("predictions {:?}, expected [{l}, {dim}]", preds.shape())));
    }
    let restore = |rows: &[f32]| -> Result<Image> {
        let mut tokens = vec![0.0f32; l * dim];
        for (t, &(m, s)) in targets.stats.iter().enumerate() {
            for (o, &v) in tokens[(t + k) * dim..(t + k + 1) * dim].iter_mut().zip(&rows[t * dim..(t + 1) * dim]) {
                *o = v * s + m;
            }
        }
        unpatchify(&Tensor::new(vec![l, dim], tokens)?, layout)
    };
    let pred = restore(&preds.data()[..(l - k) * dim])?;
    let tgt = restore(targets.target.data())?;
    let (h, w) = (img.height, img.width);
    let mut pixels = Vec::with_capacity(h * w * 9);
    for y in 0..h {
        for panel in [img, &pred, &tgt] {
            let row = &panel.data[y * w * 3..(y + 1) * w * 3];
            pixels.extend(row.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    write_ppm(
        path,
        &PpmImage {
            width: 3 * w,
            height: h,
            pixels,
        },
    )
}
