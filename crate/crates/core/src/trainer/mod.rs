//! Optimization loop: WSD learning rate, AdamW, clipping, checkpoints with
//! bit-identical resume, metrics logging, and multi-run suites.

mod config;
mod optim;
mod run;
mod suite;

pub use config::TrainConfig;
pub use optim::{clip_grad_norm, global_norm, AdamW, Wsd};
pub use run::{checkpoint_path, latest_checkpoint, parse_metrics, read_metrics, train, train_with, MetricsRecord, TrainData, TrainOutcome, METRICS_HEADER};
pub use suite::{run_crossover_suite, Paradigm, SuiteOutcome, AGGREGATE_HEADER};

use crate::error::Result;

/// Learning rate of update `step` under `cfg` with `total` steps.
pub fn lr_at(cfg: &TrainConfig, total: u64, step: u64) -> Result<f64> {
    Wsd::new(cfg.peak_lr, cfg.final_lr, cfg.warmup_steps, cfg.decay_fraction, total)?.lr_at(step)
}
