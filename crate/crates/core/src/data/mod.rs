//! Packed image datasets, PPM ingestion and the synthetic shape benchmark.

mod packed;
mod ppm;
mod synthetic;

pub use packed::{read_packed, write_packed, PackedDataset, HEADER_LEN, MAGIC, VERSION};
pub use ppm::{read_ppm, resize_bilinear, write_ppm, PpmImage};
pub use synthetic::{generate_synthetic, nearest_neighbor_top1, render_synthetic, SyntheticSpec};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// JSON sidecar describing a packed file.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub classes: Vec<String>,
    /// images per class
    pub counts: Vec<usize>,
    pub splits: Splits,
    #[serde(default)]
    pub notes: String,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Checks the manifest against the packed file it describes.
    pub fn validate(&self, data: &PackedDataset) -> Result<()> {
        if self.classes.len() != self.counts.len() {
            return Err(Error::Manifest(format!(
                "{} class names but {} counts",
                self.classes.len(),
                self.counts.len()
            )));
        }
        let n = data.len();
        if self.counts.iter().sum::<usize>() != n {
            return Err(Error::Manifest(format!(
                "counts sum to {}, file holds {n} images",
                self.counts.iter().sum::<usize>()
            )));
        }
        let mut seen = vec![0usize; self.classes.len()];
        for i in 0..n {
            let label = data.label(i)? as usize;
            if label >= self.classes.len() {
                return Err(Error::Manifest(format!(
                    "image {i} has label {label}, only {} classes",
                    self.classes.len()
                )));
            }
            seen[label] += 1;
        }
        if seen != self.counts {
            return Err(Error::Manifest(format!("label counts {seen:?} != manifest {:?}", self.counts)));
        }
        let train: BTreeSet<_> = self.splits.train.iter().collect();
        if train.len() != self.splits.train.len() {
            return Err(Error::Manifest("duplicate index in train split".into()));
        }
        for i in self.splits.train.iter().chain(&self.splits.val) {
            if *i >= n {
                return Err(Error::Manifest(format!("split index {i} >= {n}")));
            }
        }
        if let Some(i) = self.splits.val.iter().find(|i| train.contains(i)) {
            return Err(Error::Manifest(format!("image {i} is in both train and val")));
        }
        Ok(())
    }
}

/// Deterministic split: the last `val_fraction` of each class (in file order) is held out.
pub fn split_by_class(labels: &[u16], classes: usize, val_fraction: f64) -> Splits {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l as usize].push(i);
    }
    let mut s = Splits::default();
    for idx in per_class {
        let n_val = (idx.len() as f64 * val_fraction).round() as usize;
        let cut = idx.len() - n_val.min(idx.len());
        s.train.extend_from_slice(&idx[..cut]);
        s.val.extend_from_slice(&idx[cut..]);
    }
    s.train.sort_unstable();
    s.val.sort_unstable();
    s
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Packs a directory of per-class subdirectories of P6 images.
///
/// Every image is center-cropped to a square and resized to `size × size`.
/// Classes and files are visited in sorted path order.
pub fn ingest_ppm_dir(dir: &Path, out: &Path, size: usize, val_fraction: f64) -> Result<Manifest> {
    let class_dirs: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Manifest(format!("{} has no class directories", dir.display())));
    }
    let mut records: Vec<(u16, Vec<u8>)> = Vec::new();
    let mut classes = Vec::new();
    let mut counts = Vec::new();
    for (label, cdir) in class_dirs.iter().enumerate() {
        let files: Vec<PathBuf> = sorted_entries(cdir)?.into_iter().filter(|p| p.is_file()).collect();
        if files.is_empty() {
            return Err(Error::Manifest(format!("class directory {} is empty", cdir.display())));
        }
        let name = cdir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for f in &files {
            let img = read_ppm(f)?;
            let square = img.center_crop_square();
            records.push((label as u16, resize_bilinear(&square, size, size).pixels));
        }
        classes.push(name);
        counts.push(files.len());
    }
    write_packed(out, size, size, records.iter().map(|(l, p)| (*l, p.as_slice())))?;
    let labels: Vec<u16> = records.iter().map(|r| r.0).collect();
    Ok(Manifest {
        splits: split_by_class(&labels, classes.len(), val_fraction),
        classes,
        counts,
        notes: format!("ingested from {}", dir.display()),
    })
}
