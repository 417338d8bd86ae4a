//! Rectified flow: straight-line interpolation pairs, the velocity-matching
//! loss, a uniform-grid Euler sampler and sample-quality diagnostics.

mod energy;
mod mlp;
mod sampler;
mod schedule;
mod toy;
mod train;

pub use energy::energy_distance;
pub use mlp::{BoundMlp, MlpConfig, VelocityMlp, TIME_SCALE};
pub use sampler::{
    euler_sample, straightness, ConstantField, LinearField, PointTargetField, Trajectory,
    VelocityField,
};
pub use schedule::{
    interpolate, make_pair, rf_loss_var, time_grid, FlowBatch, FlowSample, FlowSchedule,
};
pub use toy::Toy2d;
pub use train::{
    evaluate_flow, train_flow_2d, Flow2dConfig, FlowEvalConfig, FlowEvalRow, FlowReport, LossPoint,
    TrainedFlow,
};
