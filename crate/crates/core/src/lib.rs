//! Bandwidth-adaptive diffusion at desk scale.

pub mod codec;
pub mod config;
pub mod datasets;
pub mod diffusion;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod numerics;
pub mod policy;
pub mod training;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
