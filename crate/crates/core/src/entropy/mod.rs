//! Differentiable code-length model: discretized logistic likelihoods from a
//! hyperprior and a causal context branch, plus the budget and calibration
//! losses.

pub mod bins;
pub mod code_length;
pub mod logistic;
pub mod losses;
pub mod model;

pub use bins::{quantize_to_bins, snap_to_centers, SymbolGrid, K};
pub use code_length::{code_length, EntropyMode, SOFT_BIN_TEMPERATURE};
pub use logistic::{log_pmf, logistic_pmf, pmf_all, SIGMA_FLOOR};
pub use losses::{
    calibration_loss, calibration_targets, cross_entropy_bits, hinge, hinge_loss,
    CalibrationTargets,
};
pub use model::{EntropyConfig, EntropyModel, EntropyOutput, LogisticParams};
