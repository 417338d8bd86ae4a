//! Pose-DiT: a spatial-temporal diffusion transformer that generates
//! (pick, place) pose plans with rectified flow.
//!
//! The spatial axis is the two roles of one plan step, the temporal axis is
//! the plan step. Flow time enters through adaLN-zero modulation; the task
//! condition enters through cross-attention after each self-attention.

mod check;
mod model;
mod pose;
mod train;

pub use check::{pose_grad_check, toy_pose_config};
pub use model::{Condition, PoseBatch, PoseDiT, PoseDiTConfig, StDiTBlock};
pub use pose::{wrap_angle, Pose6D, PoseTrajectory, Workspace, DIM_NAMES, POSE_DIM, ROLES};
pub use train::{
    batch_loss, train_posedit, ConditionedField, Demo, PoseLossPoint, PoseTrainConfig, Prediction,
    TrainedPoseDiT,
};
