use super::task::{Goal, TaskInstance, BLOCK_SIDE, TABLE_Z};
use crate::posedit::{Pose6D, PoseTrajectory};

/// Offsets of the zone placement grid from the zone center.
pub const ZONE_SLOTS: [(f64, f64); 4] =
    [(-0.05, -0.05), (0.05, -0.05), (-0.05, 0.05), (0.05, 0.05)];
/// Radius of the ring of bowl placement slots.
pub const BOWL_RING: f64 = 0.045;

/// Where the `k`-th moved block goes.
pub fn place_slot(task: &TaskInstance, k: usize) -> Pose6D {
    match task.goal {
        Goal::Zone { cx, cy, .. } => {
            let (dx, dy) = ZONE_SLOTS[k % ZONE_SLOTS.len()];
            Pose6D::se2(cx + dx, cy + dy, TABLE_Z, 0.0)
        }
        Goal::Bowl { cx, cy, .. } => {
            let a = k as f64 * std::f64::consts::FRAC_PI_2;
            Pose6D::se2(
                cx + BOWL_RING * a.cos(),
                cy + BOWL_RING * a.sin(),
                TABLE_Z,
                0.0,
            )
        }
        Goal::Stacking { base } => {
            let b = &task.blocks[base].pose;
            Pose6D::se2(b.x, b.y, b.z + (k + 1) as f64 * BLOCK_SIDE, 0.0)
        }
    }
}

/// Moves blocks in id order: pick at the block center with yaw 0, place on
/// the goal's slot grid or on top of the stack.
pub fn oracle_policy(task: &TaskInstance) -> PoseTrajectory {
    let steps = task
        .movable()
        .into_iter()
        .enumerate()
        .map(|(k, id)| {
            let b = &task.blocks[id].pose;
            [Pose6D::se2(b.x, b.y, b.z, 0.0), place_slot(task, k)]
        })
        .collect();
    PoseTrajectory { steps }
}
