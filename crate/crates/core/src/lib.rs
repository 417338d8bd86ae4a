//! Dense-to-MoE transformer conversion, rectified-flow sampling and the
//! Pose-DiT trajectory model, on a small self-contained autodiff engine.

pub mod error;
pub mod moe;
pub mod nn;
pub mod posedit;
pub mod rectflow;
pub mod taskbench;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Graph, ParamStore, Real, Rng, Tensor, Var};
