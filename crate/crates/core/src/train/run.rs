use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::augment::{augment, resize_full, CropParams};
use super::checkpoint::{convert_pretrain_to_finetune, Checkpoint, CheckpointMeta, Stage};
use super::ema::Ema;
use super::optim::{clip_global_norm, OptimState};
use super::schedule::cosine_lr;
use super::settings::RunConfig;
use crate::arch::{classify_forward, init_encoder, init_head};
use crate::config::{ModelConfig, ScanMode};
use crate::data::{read_packed, Manifest, PackedDataset};
use crate::error::{Error, Result};
use crate::layout::{make_layout, mix_seed, patchify_into, ClusterLayout, Image, OrderKind};
use crate::objective::{ar_loss, init_pretrain, pretrain_batch, pretrain_forward};
use crate::params::{Bound, ParamStore};
use crate::scan::worker_pool;
use crate::tensor::{Tape, Tensor, Var};

pub const METRICS_HEADER: &str = "step,epoch,lr,loss,top1,wall_ms";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CKPT: &str = "last.armc";
pub const BEST_CKPT: &str = "best.armc";

const STREAM_SHUFFLE: u64 = 0;
const STREAM_AUGMENT: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_HEAD: u64 = 3;

/// One optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    /// 1-based
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    /// held-out accuracy, on the last step of a finetuning epoch
    pub top1: Option<f64>,
    pub wall_ms: Option<u64>,
}

impl MetricRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "{},{},{:e},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.loss,
            opt(self.top1.map(|t| format!("{t:.6}"))),
            opt(self.wall_ms.map(|w| w.to_string()))
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Input(format!("bad metrics row {line:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        fn opt(s: &str) -> Option<&str> {
            (!s.is_empty()).then_some(s)
        }
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            epoch: f[1].parse().map_err(|_| bad())?,
            lr: f[2].parse().map_err(|_| bad())?,
            loss: f[3].parse().map_err(|_| bad())?,
            top1: opt(f[4]).map(|s| s.parse()).transpose().map_err(|_| bad())?,
            wall_ms: opt(f[5]).map(|s| s.parse()).transpose().map_err(|_| bad())?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().skip(1).filter(|l| !l.is_empty()).map(MetricRow::parse).collect()
}

/// Mean of the last `window` losses.
pub fn smoothed_tail(rows: &[MetricRow], window: usize) -> f64 {
    let tail = &rows[rows.len().saturating_sub(window)..];
    tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// continue from `last.armc` in the output directory when present
    pub resume: bool,
    /// return after this many epochs as if interrupted (the schedule is unchanged)
    pub stop_after_epochs: Option<u64>,
    /// finetuning: pretraining checkpoint to start from
    pub init: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    /// rows produced by this invocation
    pub rows: Vec<MetricRow>,
    pub last: PathBuf,
    pub best: Option<PathBuf>,
    pub best_top1: Option<f64>,
    pub param_count: usize,
}

/// A packed dataset with its manifest.
pub struct Dataset {
    pub data: PackedDataset,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let data = read_packed(&cfg.data.path)?;
        let manifest = Manifest::load(&cfg.data.manifest_path())?;
        manifest.validate(&data)?;
        Ok(Self { data, manifest })
    }
}

enum Micro {
    Pretrain { tokens: Tensor<f32>, targets: Tensor<f32> },
    Classify { tokens: Tensor<f32>, labels: Vec<usize> },
}

impl Micro {
    fn len(&self) -> usize {
        match self {
            Micro::Pretrain { tokens, .. } | Micro::Classify { tokens, .. } => tokens.shape()[0],
        }
    }
}

/// Raster-order token layout of `cfg`'s image.
pub fn raster_layout(cfg: &ModelConfig) -> Result<ClusterLayout> {
    let [h, w] = cfg.image_size;
    make_layout(h, w, cfg.patch_size, cfg.patch_size, OrderKind::RowForward)
}

/// Raster-ordered tokens `[B, L, p²·3]` of `images`.
pub fn raster_tokens(images: &[Image], cfg: &ModelConfig) -> Result<Tensor<f32>> {
    let layout = raster_layout(cfg)?;
    let (l, dim) = (layout.num_patches(), layout.token_dim());
    let positions: Vec<usize> = (0..l).collect();
    let mut out = vec![0.0f32; images.len() * l * dim];
    for (img, chunk) in images.iter().zip(out.chunks_mut(l * dim)) {
        patchify_into(img, &layout, &positions, chunk)?;
    }
    Tensor::new(vec![images.len(), l, dim], out)
}

struct Loader<'a> {
    ds: &'a Dataset,
    cfg: &'a RunConfig,
    stage: Stage,
    layout: ClusterLayout,
}

impl Loader<'_> {
    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut idx = self.ds.manifest.splits.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.cfg.train.seed, STREAM_SHUFFLE, epoch]));
        idx.shuffle(&mut rng);
        idx
    }

    fn image(&self, index: usize, epoch: u64, slot: u64) -> Result<Image> {
        let img = self.ds.data.image(index)?;
        let [h, w] = self.cfg.model.image_size;
        let t = &self.cfg.train;
        if !t.augment {
            return Ok(resize_full(&img, h, w));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[t.seed, STREAM_AUGMENT, epoch, slot]));
        let params = CropParams {
            scale: (t.crop_scale[0], t.crop_scale[1]),
            ..CropParams::default()
        };
        Ok(augment(&img, h, w, &params, &mut rng))
    }

    /// Micro-batches of global step `step` (0-based) in `epoch`.
    fn batch(&self, order: &[usize], epoch: u64, step_in_epoch: usize) -> Result<Vec<Micro>> {
        let t = &self.cfg.train;
        let start = step_in_epoch * t.batch_size;
        let idx = &order[start..start + t.batch_size];
        let images = idx
            .iter()
            .enumerate()
            .map(|(j, &i)| self.image(i, epoch, (start + j) as u64))
            .collect::<Result<Vec<_>>>()?;
        images
            .chunks(t.micro_batch)
            .zip(idx.chunks(t.micro_batch))
            .map(|(imgs, ids)| match self.stage {
                Stage::Pretrain => {
                    let m = &self.cfg.model;
                    let (tokens, targets) = pretrain_batch(imgs, &self.layout, m.target_kind, m.norm_unit)?;
                    Ok(Micro::Pretrain { tokens, targets })
                }
                Stage::Finetune => Ok(Micro::Classify {
                    tokens: raster_tokens(imgs, &self.cfg.model)?,
                    labels: ids
                        .iter()
                        .map(|&i| self.ds.data.label(i).map(usize::from))
                        .collect::<Result<_>>()?,
                }),
            })
            .collect()
    }
}

fn micro_loss(tape: &mut Tape<f32>, bound: &Bound, micro: &Micro, cfg: &ModelConfig, layout: &ClusterLayout) -> Result<Var> {
    match micro {
        Micro::Pretrain { tokens, targets } => {
            let x = tape.constant(tokens.clone());
            let y = tape.constant(targets.clone());
            let preds = pretrain_forward(tape, x, layout, bound, cfg)?;
            ar_loss(tape, preds, y, layout.patches_per_cluster())
        }
        Micro::Classify { tokens, labels } => {
            let x = tape.constant(tokens.clone());
            let logits = classify_forward(tape, x, bound, cfg)?;
            tape.cross_entropy(logits, labels)
        }
    }
}

/// Batch-mean loss and gradients; micro-batch results are summed in a fixed order.
fn batch_grads(
    params: &ParamStore<f32>,
    micros: &[Micro],
    cfg: &ModelConfig,
    layout: &ClusterLayout,
    pool: &rayon::ThreadPool,
) -> Result<(f64, ParamStore<f32>)> {
    let total: usize = micros.iter().map(Micro::len).sum();
    let parts: Vec<Result<(f32, ParamStore<f32>)>> = pool.install(|| {
        micros
            .par_iter()
            .map(|m| {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let loss = micro_loss(&mut tape, &bound, m, cfg, layout)?;
                let loss = tape.scale(loss, m.len() as f32 / total as f32);
                tape.backward(loss)?;
                Ok((tape.value(loss).data()[0], bound.grads(&tape)))
            })
            .collect()
    });
    let mut loss = 0.0f32;
    let mut grads: Option<ParamStore<f32>> = None;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        match grads.as_mut() {
            Some(acc) => acc.axpy(1.0, &g)?,
            None => grads = Some(g),
        }
    }
    Ok((loss as f64, grads.unwrap_or_else(|| params.zeros_like())))
}

/// Top-1 accuracy of `params` on `indices` (no augmentation).
pub fn evaluate(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    data: &PackedDataset,
    indices: &[usize],
    micro_batch: usize,
    pool: &rayon::ThreadPool,
) -> Result<f64> {
    let [h, w] = cfg.image_size;
    let hits: Vec<Result<usize>> = pool.install(|| {
        indices
            .par_chunks(micro_batch.max(1))
            .map(|ids| {
                let images = ids
                    .iter()
                    .map(|&i| data.image(i).map(|img| resize_full(&img, h, w)))
                    .collect::<Result<Vec<_>>>()?;
                let mut tape = Tape::new();
                let bound = params.bind_frozen(&mut tape);
                let x = tape.constant(raster_tokens(&images, cfg)?);
                let logits = classify_forward(&mut tape, x, &bound, cfg)?;
                let v = tape.value(logits);
                let c = v.shape()[1];
                let mut n = 0;
                for (row, &i) in v.data().chunks(c).zip(ids) {
                    let best = row
                        .iter()
                        .enumerate()
                        .fold((0, f32::NEG_INFINITY), |b, (j, &x)| if x > b.1 { (j, x) } else { b });
                    n += usize::from(best.0 == data.label(i)? as usize);
                }
                Ok(n)
            })
            .collect()
    });
    let hits = hits.into_iter().sum::<Result<usize>>()?;
    Ok(hits as f64 / indices.len().max(1) as f64)
}

struct State {
    params: ParamStore<f32>,
    optim: OptimState,
    ema: Option<Ema>,
    epoch: u64,
    step: u64,
    best_top1: Option<f64>,
}

fn prepare_out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let probe = out.join(".write-test");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_metrics(file: &mut fs::File, path: &Path, row: &MetricRow) -> Result<()> {
    writeln!(file, "{}", row.csv()).map_err(|e| Error::io(path, e))
}

fn checkpoint(cfg: &RunConfig, stage: Stage, st: &State, top1: Option<f64>) -> Checkpoint {
    Checkpoint {
        config: cfg.model.clone(),
        meta: CheckpointMeta {
            stage,
            epoch: st.epoch,
            step: st.step,
            seed: cfg.train.seed,
            ema_updates: st.ema.as_ref().map_or(0, |e| e.updates),
            top1,
        },
        params: st.params.clone(),
        optim: Some(st.optim.clone()),
        ema: st.ema.as_ref().map(|e| e.shadow.clone()),
    }
}

/// Causal autoregressive pretraining.
pub fn run_pretrain(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> Result<RunReport> {
    if cfg.model.scan_mode != ScanMode::Uni1scan {
        return Err(Error::Config("pretraining needs scan_mode uni1scan".into()));
    }
    run(cfg, Stage::Pretrain, out, opts)
}

/// Classification finetuning, from a pretraining checkpoint or from scratch.
pub fn run_finetune(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> Result<RunReport> {
    run(cfg, Stage::Finetune, out, opts)
}

fn initial_state(cfg: &mut RunConfig, stage: Stage, ds: &Dataset, opts: &RunOptions) -> Result<State> {
    let seed = cfg.train.seed;
    let params = match (stage, &opts.init) {
        (Stage::Pretrain, _) => init_pretrain(&cfg.model, &mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_INIT])))?,
        (Stage::Finetune, Some(path)) => {
            let ckpt = Checkpoint::load(path)?;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_HEAD]));
            let (model, params) = convert_pretrain_to_finetune(&ckpt, ds.manifest.num_classes(), &mut rng)?;
            let ours = ModelConfig {
                scan_mode: ScanMode::Cross4scan,
                num_classes: ds.manifest.num_classes(),
                ..cfg.model.clone()
            };
            let same = |m: &ModelConfig| ModelConfig {
                dec_depth: 0,
                dec_width: 0,
                scan_path: Default::default(),
                ..m.clone()
            };
            if same(&model) != same(&ours) {
                log::warn!("using the architecture stored in {}", path.display());
            }
            cfg.model = ModelConfig {
                scan_path: cfg.model.scan_path,
                ..model
            };
            params
        }
        (Stage::Finetune, None) => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_INIT]));
            let mut params = init_encoder(&cfg.model, &mut rng)?;
            init_head(&mut params, &cfg.model, &mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_HEAD])));
            params
        }
    };
    let ema = match stage {
        Stage::Finetune => cfg.train.ema_decay.map(|_| Ema::new(&params)),
        Stage::Pretrain => None,
    };
    Ok(State {
        optim: OptimState::new(&params),
        params,
        ema,
        epoch: 0,
        step: 0,
        best_top1: None,
    })
}

fn run(cfg: &RunConfig, stage: Stage, out: &Path, opts: &RunOptions) -> Result<RunReport> {
    let mut cfg = cfg.clone();
    cfg.model.validate()?;
    cfg.train.validate()?;
    let ds = Dataset::open(&cfg)?;
    if stage == Stage::Finetune {
        if opts.init.is_none() {
            cfg.model.scan_mode = ScanMode::Cross4scan;
        }
        if cfg.model.num_classes != ds.manifest.num_classes() {
            return Err(Error::Config(format!(
                "model has {} classes, dataset {}",
                cfg.model.num_classes,
                ds.manifest.num_classes()
            )));
        }
    }
    prepare_out_dir(out)?;
    let t = cfg.train.clone();
    let n_train = ds.manifest.splits.train.len();
    let spe = n_train / t.batch_size;
    if spe == 0 {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {n_train} training images",
            t.batch_size
        )));
    }
    let total = (t.epochs * spe).min(t.max_steps.unwrap_or(usize::MAX));
    let warmup = ((t.warmup_epochs * spe as f64).round() as usize).min(total);
    let peak = t.peak_lr();
    let pool = worker_pool(t.workers)?;
    let metrics_path = out.join(METRICS_FILE);
    let last_path = out.join(LAST_CKPT);
    let best_path = out.join(BEST_CKPT);

    let mut st = if opts.resume && last_path.exists() {
        let ck = Checkpoint::load(&last_path)?;
        if ck.meta.stage != stage {
            return Err(Error::Config(format!("{} holds a different stage", last_path.display())));
        }
        cfg.model = ck.config.clone();
        let ema = ck.ema_state();
        let kept: Vec<MetricRow> = read_metrics(&metrics_path)
            .unwrap_or_default()
            .into_iter()
            .filter(|r| r.step <= ck.meta.step)
            .collect();
        let best_top1 = kept.iter().filter_map(|r| r.top1).fold(None, |b: Option<f64>, x| Some(b.map_or(x, |b| b.max(x))));
        write_metrics(&metrics_path, &kept)?;
        log::info!("resuming {} at epoch {} step {}", out.display(), ck.meta.epoch, ck.meta.step);
        State {
            optim: ck.optim.ok_or_else(|| Error::Contract("checkpoint has no optimizer state".into()))?,
            params: ck.params,
            ema,
            epoch: ck.meta.epoch,
            step: ck.meta.step,
            best_top1,
        }
    } else {
        let st = initial_state(&mut cfg, stage, &ds, opts)?;
        write_metrics(&metrics_path, &[])?;
        st
    };
    let param_count = st.params.num_params();
    let layout = cfg.model.layout()?;
    let loader = Loader {
        ds: &ds,
        cfg: &cfg,
        stage,
        layout: layout.clone(),
    };
    let mut metrics = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut rows = Vec::new();
    let started = Instant::now();
    let mut epochs_run = 0;

    while (st.step as usize) < total {
        if opts.stop_after_epochs.is_some_and(|n| epochs_run >= n) {
            break;
        }
        let epoch = st.epoch;
        let order = loader.epoch_order(epoch);
        let first = st.step as usize - epoch as usize * spe;
        let steps_here = (spe - first).min(total - st.step as usize);
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel(2);
            let producer = {
                let (loader, order) = (&loader, &order);
                scope.spawn(move || {
                    for s in first..first + steps_here {
                        if tx.send(loader.batch(order, epoch, s)).is_err() {
                            break;
                        }
                    }
                })
            };
            for s in first..first + steps_here {
                let micros = rx.recv().map_err(|_| Error::Contract("batch producer stopped".into()))??;
                let lr = cosine_lr(st.step as usize, warmup, total, peak, t.lr_min)?;
                // data and shapes are checked up front, so a kernel input error here means the weights diverged
                let (loss, mut grads) = batch_grads(&st.params, &micros, &cfg.model, &layout, &pool).map_err(|e| match e {
                    Error::Input(m) => Error::Numeric(format!("{m} at step {}", st.step + 1)),
                    e => e,
                })?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("loss is {loss} at step {}", st.step + 1)));
                }
                if let Some(c) = t.clip_norm {
                    clip_global_norm(&mut grads, c);
                }
                t.optim.step(&mut st.params, &grads, &mut st.optim, lr)?;
                if let (Some(ema), Some(d)) = (st.ema.as_mut(), t.ema_decay) {
                    let decay = ema.warmup_decay(d);
                    ema.update(&st.params, decay)?;
                }
                st.step += 1;
                let mut row = MetricRow {
                    step: st.step,
                    epoch: epoch + 1,
                    lr,
                    loss,
                    top1: None,
                    wall_ms: (!t.deterministic).then(|| started.elapsed().as_millis() as u64),
                };
                let epoch_done = s + 1 == spe || st.step as usize == total;
                if epoch_done && stage == Stage::Finetune {
                    let weights = st.ema.as_ref().map_or(&st.params, |e| &e.shadow);
                    row.top1 = Some(evaluate(weights, &cfg.model, &ds.data, &ds.manifest.splits.val, t.micro_batch, &pool)?);
                }
                if t.log_every > 0 && (st.step % t.log_every as u64 == 0 || epoch_done) {
                    log::info!(
                        "step {} epoch {} lr {:.3e} loss {:.5}{}",
                        st.step,
                        epoch + 1,
                        lr,
                        loss,
                        row.top1.map(|a| format!(" top1 {a:.4}")).unwrap_or_default()
                    );
                }
                append_metrics(&mut metrics, &metrics_path, &row)?;
                rows.push(row);
            }
            drop(rx);
            producer.join().map_err(|_| Error::Contract("batch producer panicked".into()))?;
            Ok(())
        })?;

        st.epoch += 1;
        epochs_run += 1;
        let top1 = rows.last().and_then(|r| r.top1);
        let ck = checkpoint(&cfg, stage, &st, top1);
        ck.save(&out.join(format!("epoch-{:03}.armc", st.epoch)))?;
        ck.save(&last_path)?;
        if let Some(a) = top1 {
            if st.best_top1.map_or(true, |b| a > b) {
                st.best_top1 = Some(a);
                ck.save(&best_path)?;
            }
        }
    }
    Ok(RunReport {
        rows,
        last: last_path,
        best: best_path.exists().then_some(best_path),
        best_top1: st.best_top1,
        param_count,
    })
}

/// Evaluates a finetuning checkpoint (EMA weights when stored) on the validation split.
pub fn run_eval(cfg: &RunConfig, ckpt_path: &Path) -> Result<f64> {
    let ck = Checkpoint::load(ckpt_path)?;
    if ck.meta.stage != Stage::Finetune {
        return Err(Error::Config(format!("{} is not a finetuning checkpoint", ckpt_path.display())));
    }
    let ds = Dataset::open(cfg)?;
    if ck.config.num_classes != ds.manifest.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, dataset {}",
            ck.config.num_classes,
            ds.manifest.num_classes()
        )));
    }
    let pool = worker_pool(cfg.train.workers)?;
    let weights = ck.ema.as_ref().unwrap_or(&ck.params);
    evaluate(weights, &ck.config, &ds.data, &ds.manifest.splits.val, cfg.train.micro_batch, &pool)
}
