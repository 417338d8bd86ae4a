//! Dense tensors, reverse-mode differentiation, AdamW and checkpoints.

mod graph;
mod optim;
mod param;
mod real;
mod rng;
#[allow(clippy::module_inception)]
mod tensor;

pub mod gradcheck;
pub mod nta;

pub use graph::{Grads, Graph, Var, PRIMITIVES};
pub use optim::{AdamW, AdamWConfig};
pub use param::{Param, ParamId, ParamStore};
pub use real::{DType, Real};
pub use rng::{derive_seed, Rng, RngState};
pub use tensor::{numel, sinusoidal_features, Tensor};
