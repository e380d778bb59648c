use std::f32::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{split_by_class, write_packed, Manifest, PackedDataset};
use crate::error::{Error, Result};
use crate::layout::mix_seed;

const SHAPES: [&str; 4] = ["circle", "square", "triangle", "stripes"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    /// fraction of each class held out for validation
    pub val_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 250,
            size: 64,
            seed: 0,
            val_fraction: 0.2,
        }
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

/// Signed inside test for a shape centered at the origin in its local frame.
fn inside(shape: usize, x: f32, y: f32, r: f32, period: f32) -> Option<bool> {
    let hit = match shape {
        0 => x * x + y * y <= r * r,
        1 => x.abs() <= 0.8 * r && y.abs() <= 0.8 * r,
        2 => {
            // equilateral triangle with circumradius r, apex up
            let h = 1.5 * r;
            let top = -r;
            let yy = y - top;
            yy >= 0.0 && yy <= h && x.abs() <= yy / h * (h / 3f32.sqrt())
        }
        _ => {
            if x * x + y * y > r * r {
                false
            } else {
                return Some(((x / period).floor() as i64).rem_euclid(2) == 0);
            }
        }
    };
    hit.then_some(true)
}

fn render(label: usize, classes: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let families = classes.div_ceil(SHAPES.len()).max(1);
    let shape = label % SHAPES.len();
    let family = label / SHAPES.len();
    let s = size as f32;

    // gradient background with texture and noise
    let c1: [f32; 3] = std::array::from_fn(|_| rng.gen_range(30.0..225.0));
    let c2: [f32; 3] = std::array::from_fn(|_| rng.gen_range(30.0..225.0));
    let theta = rng.gen_range(0.0..2.0 * PI);
    let (gx, gy) = (theta.cos(), theta.sin());
    let freq = rng.gen_range(0.1..0.6);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let tex_amp = rng.gen_range(5.0..25.0);
    let mut img = vec![0f32; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let t = ((x as f32 / s - 0.5) * gx + (y as f32 / s - 0.5) * gy + 0.5).clamp(0.0, 1.0);
            let tex = tex_amp * (freq * (x as f32 * gy - y as f32 * gx) + phase).sin();
            for c in 0..3 {
                img[(y * size + x) * 3 + c] = c1[c] * (1.0 - t) + c2[c] * t + tex;
            }
        }
    }

    let paint = |img: &mut Vec<f32>, shape: usize, cx: f32, cy: f32, r: f32, rot: f32, color: [f32; 3], period: f32| {
        let (cs, sn) = (rot.cos(), rot.sin());
        let lo_y = (cy - r - 1.0).max(0.0) as usize;
        let hi_y = ((cy + r + 2.0) as usize).min(size);
        let lo_x = (cx - r - 1.0).max(0.0) as usize;
        let hi_x = ((cx + r + 2.0) as usize).min(size);
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let (lx, ly) = (cs * dx + sn * dy, -sn * dx + cs * dy);
                if let Some(true) = inside(shape, lx, ly, r, period) {
                    img[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
    };

    // clutter: small shapes of arbitrary colors
    for _ in 0..rng.gen_range(2..5) {
        let r = s * rng.gen_range(0.05..0.12);
        let color = hsv(rng.gen_range(0.0..360.0), rng.gen_range(0.3..1.0), rng.gen_range(0.4..1.0));
        let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let kind = rng.gen_range(0..2);
        paint(&mut img, kind, cx, cy, r, rng.gen_range(0.0..PI), color, r);
    }

    // the labelled object
    let hue = family as f32 * 360.0 / families as f32 + rng.gen_range(-18.0..18.0);
    let color = hsv(hue, rng.gen_range(0.55..1.0), rng.gen_range(0.55..1.0));
    let r = s * rng.gen_range(0.14..0.3);
    let (cx, cy) = (rng.gen_range(r..s - r), rng.gen_range(r..s - r));
    let rot = rng.gen_range(0.0..2.0 * PI);
    paint(&mut img, shape, cx, cy, r, rot, color, r * rng.gen_range(0.25..0.4));

    img.iter()
        .map(|&v| (v + rng.gen_range(-20.0..20.0)).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Renders the labelled images in file order (label of record `i` is `i mod classes`).
pub fn render_synthetic(spec: &SyntheticSpec) -> Result<Vec<(u16, Vec<u8>)>> {
    if spec.classes < 2 || spec.classes > u16::MAX as usize {
        return Err(Error::Config(format!("synthetic data needs 2..=65535 classes, got {}", spec.classes)));
    }
    if spec.size < 8 {
        return Err(Error::Config(format!("synthetic image size {} is too small", spec.size)));
    }
    let n = spec.classes * spec.per_class;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let label = i % spec.classes;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, i as u64]));
            (label as u16, render(label, spec.classes, spec.size, &mut rng))
        })
        .collect())
}

/// Writes the synthetic benchmark to `path` and returns its manifest.
pub fn generate_synthetic(path: &Path, spec: &SyntheticSpec) -> Result<Manifest> {
    let records = render_synthetic(spec)?;
    write_packed(path, spec.size, spec.size, records.iter().map(|(l, p)| (*l, p.as_slice())))?;
    let labels: Vec<u16> = records.iter().map(|r| r.0).collect();
    let families = spec.classes.div_ceil(SHAPES.len());
    Ok(Manifest {
        classes: (0..spec.classes)
            .map(|c| format!("{}-{}of{}", SHAPES[c % SHAPES.len()], c / SHAPES.len(), families))
            .collect(),
        counts: vec![spec.per_class; spec.classes],
        splits: split_by_class(&labels, spec.classes, spec.val_fraction),
        notes: format!(
            "synthetic shapes: seed {}, {}x{} px, shape x color family per class",
            spec.seed, spec.size, spec.size
        ),
    })
}

/// Top-1 accuracy of a raw-pixel 1-nearest-neighbour classifier (squared L2).
pub fn nearest_neighbor_top1(data: &PackedDataset, train: &[usize], val: &[usize]) -> Result<f64> {
    let train_px: Vec<(&[u8], u16)> = train
        .iter()
        .map(|&i| Ok((data.pixels(i)?, data.label(i)?)))
        .collect::<Result<_>>()?;
    let hits: usize = val
        .par_iter()
        .map(|&i| -> Result<usize> {
            let (q, label) = (data.pixels(i)?, data.label(i)?);
            let mut best = (u64::MAX, 0u16);
            for &(p, l) in &train_px {
                let d: u64 = q
                    .iter()
                    .zip(p)
                    .map(|(&a, &b)| {
                        let d = a as i32 - b as i32;
                        (d * d) as u64
                    })
                    .sum();
                if d < best.0 {
                    best = (d, l);
                }
            }
            Ok(usize::from(best.1 == label))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / val.len().max(1) as f64)
}
