use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::layout::Image;

pub const MAGIC: &[u8; 4] = b"ARMD";
pub const VERSION: u16 = 1;
/// magic, version u16, count u32, height u16, width u16, channels u8
pub const HEADER_LEN: usize = 4 + 2 + 4 + 2 + 2 + 1;

/// A packed dataset held in memory; records are addressed in O(1).
#[derive(Debug, Clone)]
pub struct PackedDataset {
    path: PathBuf,
    height: usize,
    width: usize,
    count: usize,
    bytes: Vec<u8>,
}

impl PackedDataset {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn record_len(&self) -> usize {
        2 + self.height * self.width * 3
    }

    fn record(&self, index: usize) -> Result<&[u8]> {
        if index >= self.count {
            return Err(Error::Range {
                index,
                len: self.count,
            });
        }
        let start = HEADER_LEN + index * self.record_len();
        Ok(&self.bytes[start..start + self.record_len()])
    }

    pub fn label(&self, index: usize) -> Result<u16> {
        let r = self.record(index)?;
        Ok(u16::from_le_bytes([r[0], r[1]]))
    }

    /// Raw RGB bytes, row-major `[H, W, 3]`.
    pub fn pixels(&self, index: usize) -> Result<&[u8]> {
        Ok(&self.record(index)?[2..])
    }

    pub fn get(&self, index: usize) -> Result<(u16, &[u8])> {
        Ok((self.label(index)?, self.pixels(index)?))
    }

    /// Record `index` as a `[0, 1]` float image.
    pub fn image(&self, index: usize) -> Result<Image> {
        Image::from_u8(self.height, self.width, self.pixels(index)?)
    }

    pub fn labels(&self) -> Vec<u16> {
        (0..self.count).map(|i| self.label(i).expect("index in range")).collect()
    }
}

pub fn read_packed(path: &Path) -> Result<PackedDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fmt("missing ARMD magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let height = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let width = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;
    let channels = bytes[14];
    if channels != 3 {
        return Err(fmt(format!("expected 3 channels, header says {channels}")));
    }
    let expected = HEADER_LEN as u64 + count as u64 * (2 + height as u64 * width as u64 * 3);
    if bytes.len() as u64 != expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(PackedDataset {
        path: path.to_path_buf(),
        height,
        width,
        count,
        bytes,
    })
}

/// Writes `(label, rgb)` records; every `rgb` must hold `height·width·3` bytes.
pub fn write_packed<'a>(
    path: &Path,
    height: usize,
    width: usize,
    records: impl IntoIterator<Item = (u16, &'a [u8])>,
) -> Result<()> {
    if height > u16::MAX as usize || width > u16::MAX as usize {
        return Err(Error::Input(format!("{height}x{width} exceeds the 16-bit size fields")));
    }
    let records: Vec<(u16, &[u8])> = records.into_iter().collect();
    let count = u32::try_from(records.len()).map_err(|_| Error::Input("more than 2^32 records".into()))?;
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&count.to_le_bytes()).map_err(io)?;
    w.write_all(&(height as u16).to_le_bytes()).map_err(io)?;
    w.write_all(&(width as u16).to_le_bytes()).map_err(io)?;
    w.write_all(&[3u8]).map_err(io)?;
    for (i, (label, rgb)) in records.iter().enumerate() {
        if rgb.len() != height * width * 3 {
            return Err(Error::Input(format!(
                "record {i} has {} bytes, expected {}",
                rgb.len(),
                height * width * 3
            )));
        }
        w.write_all(&label.to_le_bytes()).map_err(io)?;
        w.write_all(rgb).map_err(io)?;
    }
    w.flush().map_err(io)
}
