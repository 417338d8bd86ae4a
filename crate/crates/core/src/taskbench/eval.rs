use serde::{Deserialize, Serialize};

use super::oracle::place_slot;
use super::task::{distance_to_region, Goal, TaskInstance};
use crate::error::{Error, Result};
use crate::posedit::{wrap_angle, PoseTrajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub pick: f64,
    pub place_xy: f64,
    pub place_z: f64,
}

impl Default for Tolerances {
    /// Half a block side in position, a quarter in stack height.
    fn default() -> Self {
        Tolerances {
            pick: 0.02,
            place_xy: 0.02,
            place_z: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    PickMissed,
    PlaceOutOfGoal,
}

impl Violation {
    pub fn name(self) -> &'static str {
        match self {
            Violation::PickMissed => "pick_missed",
            Violation::PlaceOutOfGoal => "place_out_of_goal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepError {
    /// Distance from the pick pose to the selected block center (m).
    pub pick: f64,
    /// Distance outside the goal region, or to the stack slot (m).
    pub place: f64,
    /// Place yaw error (rad).
    pub yaw: f64,
    /// Block selected by the pick, if any was in range.
    pub block: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub steps: Vec<StepError>,
    pub violation: Option<Violation>,
}

/// Kinematics-free check of a plan. Picked blocks teleport to their place
/// pose; evaluation stops at the first failing step.
pub fn evaluate(
    traj: &PoseTrajectory,
    task: &TaskInstance,
    tol: &Tolerances,
) -> Result<EpisodeResult> {
    if traj.horizon() != task.horizon {
        return Err(Error::invalid(
            "evaluate",
            format!(
                "plan has {} steps, task needs {}",
                traj.horizon(),
                task.horizon
            ),
        ));
    }
    let mut poses: Vec<_> = task.blocks.iter().map(|b| b.pose).collect();
    let mut moved = vec![false; poses.len()];
    let base = match task.goal {
        Goal::Stacking { base } => Some(base),
        _ => None,
    };
    let mut steps = Vec::with_capacity(task.horizon);
    for k in 0..task.horizon {
        let pick = traj.pick(k);
        let place = traj.place(k);
        // Nearest unmoved block; strict comparison keeps the lowest id on ties.
        let mut best: Option<(usize, f64)> = None;
        for (id, p) in poses.iter().enumerate() {
            if moved[id] || Some(id) == base {
                continue;
            }
            let d = pick.dist_xyz(p);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((id, d));
            }
        }
        let pick_err = best.map_or(f64::INFINITY, |(_, d)| d);
        let yaw = wrap_angle(place.yaw).abs();
        if pick_err > tol.pick {
            steps.push(StepError {
                pick: pick_err,
                place: f64::NAN,
                yaw,
                block: None,
            });
            return Ok(EpisodeResult {
                success: false,
                steps,
                violation: Some(Violation::PickMissed),
            });
        }
        let id = best.expect("in range").0;
        let (place_err, ok) = match task.goal {
            Goal::Stacking { .. } => {
                let slot = place_slot(task, k);
                let xy = place.dist_xy(&slot);
                let z = (place.z - slot.z).abs();
                (xy.hypot(z), xy <= tol.place_xy && z <= tol.place_z)
            }
            ref g => {
                let d = distance_to_region(g, place.x, place.y);
                (d, d == 0.0)
            }
        };
        steps.push(StepError {
            pick: pick_err,
            place: place_err,
            yaw,
            block: Some(id),
        });
        if !ok {
            return Ok(EpisodeResult {
                success: false,
                steps,
                violation: Some(Violation::PlaceOutOfGoal),
            });
        }
        poses[id] = *place;
        moved[id] = true;
    }
    Ok(EpisodeResult {
        success: true,
        steps,
        violation: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posedit::Pose6D;
    use crate::taskbench::oracle::oracle_policy;
    use crate::taskbench::task::{generate_task, Block, TaskKind, BOWL_RADIUS, TABLE_Z};
    use proptest::prelude::*;

    #[test]
    fn oracle_always_succeeds() {
        for k in TaskKind::ALL {
            for seed in 0..1000 {
                let t = generate_task(k, seed, 1.0).unwrap();
                let r = evaluate(&oracle_policy(&t), &t, &Tolerances::default()).unwrap();
                assert!(r.success, "{k:?} seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn bowl_places_inside_radius() {
        for seed in 0..100 {
            let t = generate_task(TaskKind::Bowl, seed, 1.0).unwrap();
            let Goal::Bowl { cx, cy, radius } = t.goal else {
                panic!()
            };
            assert_eq!(radius, BOWL_RADIUS);
            for s in &oracle_policy(&t).steps {
                assert!((s[1].x - cx).hypot(s[1].y - cy) <= radius);
            }
        }
    }

    #[test]
    fn stacking_heights_step_by_side() {
        let t = (0..100)
            .map(|s| generate_task(TaskKind::Stacking, s, 1.0).unwrap())
            .find(|t| t.blocks.len() == 4)
            .unwrap();
        let o = oracle_policy(&t);
        for k in 1..o.horizon() {
            assert!((o.place(k).z - o.place(k - 1).z - 0.04).abs() < 1e-12);
        }
    }

    #[test]
    fn place_outside_zone_fails() {
        let t = generate_task(TaskKind::Zone, 3, 1.0).unwrap();
        let mut o = oracle_policy(&t);
        let Goal::Zone { cx, .. } = t.goal else {
            panic!()
        };
        // 0.2 m beyond the zone edge, on the side with room on the table.
        let dir = if cx < 0.5 { 1.0 } else { -1.0 };
        o.steps[0][1].x = cx + dir * (0.1 + 0.2);
        let r = evaluate(&o, &t, &Tolerances::default()).unwrap();
        assert!(!r.success);
        assert_eq!(r.violation, Some(Violation::PlaceOutOfGoal));
    }

    #[test]
    fn horizon_mismatch_is_error() {
        let t = generate_task(TaskKind::Bowl, 1, 1.0).unwrap();
        let o = oracle_policy(&t);
        assert!(evaluate(&o.truncate(t.horizon - 1), &t, &Tolerances::default()).is_err());
    }

    fn two_block_task(a: (f64, f64), b: (f64, f64)) -> TaskInstance {
        let mut t = generate_task(TaskKind::Zone, 0, 1.0).unwrap();
        t.blocks = vec![
            Block {
                id: 0,
                pose: Pose6D::se2(a.0, a.1, TABLE_Z, 0.0),
            },
            Block {
                id: 1,
                pose: Pose6D::se2(b.0, b.1, TABLE_Z, 0.0),
            },
        ];
        t.horizon = 2;
        t
    }

    #[test]
    fn exact_tie_picks_lowest_id() {
        // Dyadic coordinates make both distances exactly 1/64.
        let t = two_block_task((0.5, 0.0), (0.53125, 0.0));
        let mut o = oracle_policy(&t);
        o.steps[0][0] = Pose6D::se2(0.515625, 0.0, TABLE_Z, 0.0);
        let r = evaluate(&o, &t, &Tolerances::default()).unwrap();
        assert_eq!(r.steps[0].block, Some(0));
    }

    proptest! {
        #[test]
        fn nearest_block_selected(px in 0.49f64..0.53, py in -0.01f64..0.01) {
            let t = two_block_task((0.5, 0.0), (0.52, 0.0));
            let mut o = oracle_policy(&t);
            o.steps[0][0] = Pose6D::se2(px, py, TABLE_Z, 0.0);
            let r = evaluate(&o, &t, &Tolerances::default()).unwrap();
            let d0 = (px - 0.5).hypot(py);
            let d1 = (px - 0.52).hypot(py);
            if d0.min(d1) <= 0.02 {
                prop_assert_eq!(r.steps[0].block, Some(if d1 < d0 { 1 } else { 0 }));
            } else {
                prop_assert_eq!(r.violation, Some(Violation::PickMissed));
            }
        }

        #[test]
        fn shrinking_tolerance_is_monotone(seed in 0u64..500, kind in 0usize..3, dx in -0.03f64..0.03, dz in -0.015f64..0.015, shrink in 0.1f64..1.0) {
            let t = generate_task(TaskKind::ALL[kind], seed, 1.0).unwrap();
            let mut o = oracle_policy(&t);
            for s in &mut o.steps {
                s[0].x += dx;
                s[1].x += dx;
                s[1].z += dz;
            }
            let loose = Tolerances::default();
            let tight = Tolerances { pick: loose.pick * shrink, place_xy: loose.place_xy * shrink, place_z: loose.place_z * shrink };
            let a = evaluate(&o, &t, &loose).unwrap().success;
            let b = evaluate(&o, &t, &tight).unwrap().success;
            prop_assert!(a || !b);
        }
    }
}
