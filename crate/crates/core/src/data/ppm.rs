use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB image as stored in a P6 file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl PpmImage {
    /// Largest centered square.
    pub fn center_crop_square(&self) -> PpmImage {
        let side = self.width.min(self.height);
        let (x0, y0) = ((self.width - side) / 2, (self.height - side) / 2);
        let mut pixels = Vec::with_capacity(side * side * 3);
        for y in y0..y0 + side {
            let row = (y * self.width + x0) * 3;
            pixels.extend_from_slice(&self.pixels[row..row + side * 3]);
        }
        PpmImage {
            width: side,
            height: side,
            pixels,
        }
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

/// Reads a binary P6 file; samples with `maxval != 255` are rescaled to 8 bits.
pub fn read_ppm(path: &Path) -> Result<PpmImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(fmt("not a binary PPM (P6) file"));
    }
    let mut h = Header { bytes: &bytes, pos: 2 };
    let width = h.number().ok_or_else(|| fmt("bad width"))?;
    let height = h.number().ok_or_else(|| fmt("bad height"))?;
    let maxval = h.number().ok_or_else(|| fmt("bad maxval"))?;
    if maxval == 0 || maxval > 65535 {
        return Err(fmt("maxval must be in 1..=65535"));
    }
    // exactly one whitespace byte before the raster
    let start = h.pos + 1;
    let wide = maxval > 255;
    let samples = width * height * 3;
    let need = samples * if wide { 2 } else { 1 };
    if bytes.len() < start + need {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: (start + need) as u64,
            actual: bytes.len() as u64,
        });
    }
    let raster = &bytes[start..start + need];
    let pixels = if wide {
        raster
            .chunks_exact(2)
            .map(|c| scale(u16::from_be_bytes([c[0], c[1]]) as usize, maxval))
            .collect()
    } else if maxval == 255 {
        raster.to_vec()
    } else {
        raster.iter().map(|&v| scale(v as usize, maxval)).collect()
    };
    Ok(PpmImage { width, height, pixels })
}

fn scale(v: usize, maxval: usize) -> u8 {
    ((v.min(maxval) * 255 + maxval / 2) / maxval) as u8
}

pub fn write_ppm(path: &Path, img: &PpmImage) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Bilinear resampling with pixel-center alignment.
pub fn resize_bilinear(img: &PpmImage, width: usize, height: usize) -> PpmImage {
    if img.width == width && img.height == height {
        return img.clone();
    }
    let src = |x: usize, y: usize, c: usize| img.pixels[(y * img.width + x) * 3 + c] as f32;
    let sx = img.width as f32 / width as f32;
    let sy = img.height as f32 / height as f32;
    let mut pixels = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f32);
        let (y0, wy) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(img.height - 1);
        for x in 0..width {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f32);
            let (x0, wx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(img.width - 1);
            for c in 0..3 {
                let top = src(x0, y0, c) * (1.0 - wx) + src(x1, y0, c) * wx;
                let bot = src(x0, y1, c) * (1.0 - wx) + src(x1, y1, c) * wx;
                pixels.push((top * (1.0 - wy) + bot * wy).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    PpmImage { width, height, pixels }
}
