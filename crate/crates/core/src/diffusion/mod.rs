//! Noise schedule, forward corruption, reverse update and the conditioned
//! denoiser.

pub mod denoiser;
pub mod embed;
pub mod schedule;

pub use denoiser::{film_modulate, Denoiser, DenoiserConfig, DenoiserOutput};
pub use embed::{embed_timestep, BudgetRange, EntropyBudget, EntropyEmbedding};
pub use schedule::{
    forward_diffuse, forward_diffuse_batch, reconstruct_x0, reconstruct_x0_unclamped, reverse_step,
    NoiseSchedule,
};
