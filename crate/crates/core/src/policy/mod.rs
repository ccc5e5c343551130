//! Adaptive stopping: cost trajectories, teacher labels, the stop policy and
//! the sampling loop that consults it.

pub mod net;
pub mod sampler;
pub mod trajectory;

pub use net::{pooled_feature, stop_loss, PolicyConfig, PolicyNet};
pub use sampler::{adaptive_sample, full_sample, run_chain, AdaptiveSample, ChainStep};
pub use trajectory::{
    generate_labels, record_trajectory, teacher_labels, CostTrajectory, CostWeights, LabelCache,
    TeacherRecord, TrajectoryStep,
};
