//! Translation pre-training, context enhancement and fine-tuning, with the
//! optimizer, checkpoints, metrics log and collapse monitor they share.

mod checkpoint;
mod collapse;
mod metrics;
mod optim;
mod pipeline;
mod stages;

pub use checkpoint::{Checkpoint, Stage, FORMAT_VERSION, MAGIC};
pub use collapse::{CollapseMonitor, CollapseReport, CollapseStatus, SpreadStats, RANK_THRESHOLD, STD_RATIO_THRESHOLD};
pub use metrics::{JsonlWriter, MetricRecord, MetricsSink, NullSink};
pub use optim::{AdamConfig, OptimizerState, Schedule};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineOutput};
pub use stages::{
    ce_forward, collapse_monitor, context_enhance, context_enhance_model, encoder_only_model, finetune_translation,
    train_translation, translation_forward, CEConfig, CEForward, CEOutcome, CESnapshot, DecoderInit, TrainConfig,
    MAX_CE_EPOCHS,
};
