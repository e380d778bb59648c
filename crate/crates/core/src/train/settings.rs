use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::checkpoint::Stage;
use super::optim::AdamW;
use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Optimization hyperparameters of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// stop after this many optimizer steps; the schedule spans them
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    /// gradient unit; the batch is split into micro-batches of this size
    pub micro_batch: usize,
    /// learning rate per 256 images; the peak is `base_lr · batch_size / 256`
    pub base_lr: f64,
    pub lr_min: f64,
    pub warmup_epochs: f64,
    pub optim: AdamW,
    pub clip_norm: Option<f64>,
    pub ema_decay: Option<f64>,
    pub augment: bool,
    /// random-resized-crop area range
    pub crop_scale: [f64; 2],
    pub workers: usize,
    pub deterministic: bool,
    pub log_every: usize,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            seed: 0,
            epochs: 1600,
            max_steps: None,
            batch_size: 4096,
            micro_batch: 32,
            base_lr: 1.5e-4,
            lr_min: 1e-6,
            warmup_epochs: 5.0,
            optim: AdamW {
                beta2: 0.95,
                ..AdamW::default()
            },
            clip_norm: Some(1.0),
            ema_decay: None,
            augment: true,
            crop_scale: [0.2, 1.0],
            workers: 1,
            deterministic: false,
            log_every: 10,
        }
    }

    pub fn finetune() -> Self {
        Self {
            epochs: 100,
            batch_size: 1024,
            base_lr: 5e-4,
            optim: AdamW::default(),
            clip_norm: None,
            ema_decay: Some(0.9999),
            ..Self::pretrain()
        }
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::Config("batch_size and micro_batch must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.crop_scale[0]) || self.crop_scale[0] > self.crop_scale[1] || self.crop_scale[1] > 1.0 {
            return Err(Error::Config(format!("bad crop_scale {:?}", self.crop_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// packed dataset
    pub path: PathBuf,
    /// JSON manifest; defaults to the dataset path with a `.json` extension
    pub manifest: Option<PathBuf>,
}

impl DataConfig {
    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.path.with_extension("json"))
    }
}

/// Everything a training or evaluation command needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn defaults(stage: Stage) -> Self {
        Self {
            model: ModelConfig::default(),
            train: match stage {
                Stage::Pretrain => TrainConfig::pretrain(),
                Stage::Finetune => TrainConfig::finetune(),
            },
            data: DataConfig::default(),
        }
    }

    /// Stage defaults, overlaid with `text` (JSON), then with `key=value` overrides.
    pub fn parse(text: &str, stage: Stage, overrides: &[String]) -> Result<Self> {
        let mut base = serde_json::to_value(Self::defaults(stage))?;
        let file: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        merge(&mut base, file, "")?;
        for o in overrides {
            apply_override(&mut base, o)?;
        }
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, stage: Stage, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, stage, overrides)?;
        if cfg.data.path.is_relative() && !cfg.data.path.as_os_str().is_empty() {
            if let Some(dir) = path.parent() {
                cfg.data.path = dir.join(&cfg.data.path);
                cfg.data.manifest = cfg.data.manifest.map(|m| if m.is_relative() { dir.join(m) } else { m });
            }
        }
        Ok(cfg)
    }
}

fn merge(base: &mut Value, over: Value, at: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let key = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    // tagged enums are replaced whole
                    Some(slot) if slot.is_object() && v.is_object() && v.get("kind").is_none() => merge(slot, v, &key)?,
                    Some(slot) => *slot = v,
                    None => return Err(Error::Config(format!("unknown config key {key}"))),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

/// `a.b.c=value`; the value is read as JSON when it parses, as a string otherwise.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(m) if m.contains_key(part) => m.get_mut(part).expect("checked"),
            _ => return Err(Error::Config(format!("unknown config key {key}"))),
        };
    }
    *slot = value;
    Ok(())
}
