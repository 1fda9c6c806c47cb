//! MLM training: schedule, AdamW, gradient accumulation and metrics.

mod config;
mod metrics;
mod optim;
mod run;

pub(crate) use config::hex;
pub use config::{lr_at, TrainConfig};
pub use metrics::{sidecar_path, smooth, MetricsLog, RunMeta, StepRecord, METRICS_HEADER};
pub use optim::{clip_grad_norm, AdamW};
pub use run::{run_pretraining, run_pretraining_with, train_step, MicroBatches};
