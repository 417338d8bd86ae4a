//! Synthetic tabletop pick-and-place benchmark: zone, bowl and stacking
//! tasks, an oracle demonstrator and a geometric success check.

mod bench;
mod eval;
mod oracle;
mod task;

pub use bench::{
    build_demos, condition, run_bench, success_rate, BenchReport, CondLayout, EpisodeRecord,
    KindReport, OraclePolicy, Plan, Policy, PoseDiTPolicy, EVAL_SEEDS, HORIZON, TRAIN_SEEDS,
};
pub use eval::{evaluate, EpisodeResult, StepError, Tolerances, Violation};
pub use oracle::{oracle_policy, place_slot, BOWL_RING, ZONE_SLOTS};
pub use task::{
    generate_task, Block, Goal, TaskInstance, TaskKind, BLOCK_SIDE, BOWL_RADIUS, TABLE_Z, ZONE_HALF,
};
