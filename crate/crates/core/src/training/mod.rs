//! Joint optimization of denoiser, entropy model and stop policy.

pub mod adam;
pub mod checkpoint;
pub mod loss;
pub mod trainer;

pub use adam::AdamState;
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{
    calibration_for, draw_batch, sample_budget, total_loss, Batch, LossBreakdown, LossGraph,
    LossOptions, LossWeights,
};
pub use trainer::{
    checkpoint_name, train_to_dir, MetricsRow, TrainOutputs, Trainer, METRICS_HEADER, PROBE_BUDGETS,
};
