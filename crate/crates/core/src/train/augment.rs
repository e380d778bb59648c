use rand::Rng;

use crate::layout::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropParams {
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
}

impl Default for CropParams {
    fn default() -> Self {
        Self {
            scale: (0.2, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        }
    }
}

/// Window `(top, left, height, width)` covering a random area fraction and aspect ratio.
///
/// After 10 rejected draws the largest centered window with a ratio in range is used.
pub fn crop_window(h: usize, w: usize, p: &CropParams, rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (lr0, lr1) = (p.ratio.0.ln(), p.ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.gen_range(p.scale.0..=p.scale.1);
        let ratio = rng.gen_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < p.ratio.0 {
        (((w as f64 / p.ratio.0).round() as usize).min(h), w)
    } else if in_ratio > p.ratio.1 {
        (h, ((h as f64 * p.ratio.1).round() as usize).min(w))
    } else {
        (h, w)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Bilinear resampling of a window of `img` to `out_h × out_w`.
pub fn resize_window(img: &Image, win: (usize, usize, usize, usize), out_h: usize, out_w: usize) -> Image {
    let (top, left, ch, cw) = win;
    let (sy, sx) = (ch as f32 / out_h as f32, cw as f32 / out_w as f32);
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    let px = |y: usize, x: usize| &img.data[((top + y) * img.width + left + x) * 3..][..3];
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f32);
        let (y0, wy) = (fy.floor() as usize, fy.fract());
        let y1 = (y0 + 1).min(ch - 1);
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f32);
            let (x0, wx) = (fx.floor() as usize, fx.fract());
            let x1 = (x0 + 1).min(cw - 1);
            let (a, b, c, d) = (px(y0, x0), px(y0, x1), px(y1, x0), px(y1, x1));
            for k in 0..3 {
                let top = a[k] + (b[k] - a[k]) * wx;
                let bot = c[k] + (d[k] - c[k]) * wx;
                data.push(top + (bot - top) * wy);
            }
        }
    }
    Image {
        height: out_h,
        width: out_w,
        data,
    }
}

pub fn hflip(img: &Image) -> Image {
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        for x in (0..img.width).rev() {
            data.extend_from_slice(&img.data[(y * img.width + x) * 3..][..3]);
        }
    }
    Image { data, ..img.clone() }
}

/// Random resized crop to `out_h × out_w` followed by a horizontal flip with probability 1/2.
pub fn augment(img: &Image, out_h: usize, out_w: usize, params: &CropParams, rng: &mut impl Rng) -> Image {
    let win = crop_window(img.height, img.width, params, rng);
    let out = resize_window(img, win, out_h, out_w);
    if rng.gen_bool(0.5) {
        hflip(&out)
    } else {
        out
    }
}

/// Resize of the whole image, used for evaluation.
pub fn resize_full(img: &Image, out_h: usize, out_w: usize) -> Image {
    if img.height == out_h && img.width == out_w {
        return img.clone();
    }
    resize_window(img, (0, 0, img.height, img.width), out_h, out_w)
}
