//! Optimization: AdamW, learning-rate schedule, EMA, augmentation,
//! checkpoints and the pretraining / finetuning drivers.

mod augment;
mod checkpoint;
mod ema;
mod optim;
mod run;
mod schedule;
mod settings;

pub use augment::{augment, crop_window, hflip, resize_full, resize_window, CropParams};
pub use checkpoint::{convert_pretrain_to_finetune, Checkpoint, CheckpointMeta, Stage, MAGIC, VERSION};
pub use ema::{ema_update, Ema};
pub use optim::{check_finite, clip_global_norm, decays, AdamW, OptimState};
pub use run::{
    evaluate, raster_layout, raster_tokens, read_metrics, run_eval, run_finetune, run_pretrain, smoothed_tail, Dataset,
    MetricRow, RunOptions, RunReport, BEST_CKPT, LAST_CKPT, METRICS_FILE, METRICS_HEADER,
};
pub use schedule::cosine_lr;
pub use settings::{apply_override, DataConfig, RunConfig, TrainConfig};
