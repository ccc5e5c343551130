//! Dense f64 tensors, parameters, a reverse-mode tape and gradient checking.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod linalg;
pub mod param;
pub mod rng;
pub mod stats;
pub mod tensor;

pub use gradcheck::{check_gradients, GradReport};
pub use graph::{causal_mask, CustomOp, Graph, Var};
pub use param::{Init, ParamId, ParamSet, Parameter};
pub use rng::RngStream;
pub use tensor::Tensor;
