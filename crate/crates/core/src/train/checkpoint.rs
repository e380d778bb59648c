use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ema::Ema;
use super::optim::OptimState;
use crate::arch::convert_params;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ARMC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Pretrain,
    Finetune,
}

/// Training position stored next to the weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointMeta {
    pub stage: Stage,
    /// completed epochs
    pub epoch: u64,
    /// completed optimizer steps
    pub step: u64,
    pub seed: u64,
    pub ema_updates: u64,
    pub top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
    pub optim: Option<OptimState>,
    pub ema: Option<ParamStore<f32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    meta: CheckpointMeta,
}

fn put_map(out: &mut Vec<u8>, map: &ParamStore<f32>) {
    out.extend_from_slice(&(map.len() as u64).to_le_bytes());
    for (name, t) in map.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Length {
                path: self.path.to_path_buf(),
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn format(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn map(&mut self) -> Result<ParamStore<f32>> {
        let count = self.u64()?;
        let mut map = BTreeMap::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| self.format("tensor name is not UTF-8"))?
                .to_string();
            if last.as_ref().is_some_and(|l| *l >= name) {
                return Err(self.format(format!("tensor names unsorted or repeated at {name}")));
            }
            let ndim = self.u32()? as usize;
            let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = self.take(n.checked_mul(4).ok_or_else(|| self.format("tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            map.insert(name.clone(), Tensor::new(shape, data)?);
            last = Some(name);
        }
        Ok(ParamStore::from_map(map))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&Header {
            model: self.config.clone(),
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        put_map(&mut out, &self.params);
        match &self.optim {
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                put_map(&mut out, &o.m);
                put_map(&mut out, &o.v);
            }
            None => out.push(0),
        }
        match &self.ema {
            Some(e) => {
                out.push(1);
                put_map(&mut out, e);
            }
            None => out.push(0),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(r.format("missing ARMC magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| r.format(format!("header: {e}")))?;
        let params = r.map()?;
        let optim = match r.u8()? {
            0 => None,
            1 => Some(OptimState {
                step: r.u64()?,
                m: r.map()?,
                v: r.map()?,
            }),
            b => return Err(r.format(format!("bad optimizer flag {b}"))),
        };
        let ema = match r.u8()? {
            0 => None,
            1 => Some(r.map()?),
            b => return Err(r.format(format!("bad EMA flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config: header.model,
            meta: header.meta,
            params,
            optim,
            ema,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = PathBuf::from(path);
        tmp.set_extension("tmp");
        let io = |e| Error::io(&tmp, e);
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn ema_state(&self) -> Option<Ema> {
        self.ema.as_ref().map(|shadow| Ema {
            shadow: shadow.clone(),
            updates: self.meta.ema_updates,
        })
    }
}

/// Pretraining checkpoint → 4-scan classifier weights with a fresh head for `num_classes`.
pub fn convert_pretrain_to_finetune(ckpt: &Checkpoint, num_classes: usize, rng: &mut impl Rng) -> Result<(ModelConfig, ParamStore<f32>)> {
    if ckpt.meta.stage != Stage::Pretrain {
        return Err(Error::Contract("checkpoint is not a pretraining checkpoint".into()));
    }
    let cfg = ModelConfig {
        num_classes,
        ..ckpt.config.clone()
    };
    convert_params(&cfg, &ckpt.params, rng)
}
