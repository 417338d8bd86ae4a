use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posedit::{Pose6D, Workspace};
use crate::tensor::{derive_seed, Rng};

pub const BLOCK_SIDE: f64 = 0.04;
/// Height of a block center resting on the table.
pub const TABLE_Z: f64 = 0.05;
pub const GOAL_CLEARANCE: f64 = 0.1;
pub const ZONE_HALF: f64 = 0.1;
pub const BOWL_RADIUS: f64 = 0.1;
pub const MAX_BLOCKS: usize = 4;
pub const MAX_ATTEMPTS: usize = 1000;

/// Region of the table blocks are spawned in.
const SPAWN_LO: [f64; 2] = [0.1, -0.4];
const SPAWN_HI: [f64; 2] = [0.9, 0.4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Zone,
    Bowl,
    Stacking,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Zone, TaskKind::Bowl, TaskKind::Stacking];

    pub fn template_id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Zone => "zone",
            TaskKind::Bowl => "bowl",
            TaskKind::Stacking => "stacking",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub id: usize,
    pub pose: Pose6D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Goal {
    /// Axis-aligned square.
    Zone {
        cx: f64,
        cy: f64,
        half: f64,
    },
    Bowl {
        cx: f64,
        cy: f64,
        radius: f64,
    },
    /// Every other block is stacked on `base`, in id order.
    Stacking {
        base: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub seed: u64,
    pub difficulty: f64,
    pub workspace: Workspace,
    pub blocks: Vec<Block>,
    pub goal: Goal,
    pub horizon: usize,
    pub template_id: usize,
}

impl TaskInstance {
    /// Blocks in the order the oracle moves them.
    pub fn movable(&self) -> Vec<usize> {
        match self.goal {
            Goal::Stacking { base } => self
                .blocks
                .iter()
                .map(|b| b.id)
                .filter(|&id| id != base)
                .collect(),
            _ => self.blocks.iter().map(|b| b.id).collect(),
        }
    }
}

fn min_spacing(difficulty: f64) -> f64 {
    2.0 * BLOCK_SIDE * difficulty
}

/// Distance from `(x, y)` to the goal region (zero inside it).
pub(crate) fn distance_to_region(goal: &Goal, x: f64, y: f64) -> f64 {
    match *goal {
        Goal::Zone { cx, cy, half } => {
            let dx = ((x - cx).abs() - half).max(0.0);
            let dy = ((y - cy).abs() - half).max(0.0);
            dx.hypot(dy)
        }
        Goal::Bowl { cx, cy, radius } => ((x - cx).hypot(y - cy) - radius).max(0.0),
        Goal::Stacking { .. } => f64::INFINITY,
    }
}

/// Deterministic in `(kind, seed, difficulty)`. `difficulty` scales the
/// minimum spacing between blocks; 1.0 is the default.
pub fn generate_task(kind: TaskKind, seed: u64, difficulty: f64) -> Result<TaskInstance> {
    if !(difficulty > 0.0 && difficulty.is_finite()) {
        return Err(Error::Config(format!(
            "difficulty must be positive, got {difficulty}"
        )));
    }
    let mut rng = Rng::new(derive_seed(seed, kind as u64));
    let n_blocks = 2 + rng.below(MAX_BLOCKS - 1);
    let spacing = min_spacing(difficulty);
    let uniform = |rng: &mut Rng, lo: f64, hi: f64| rng.uniform_range(lo, hi);
    for _ in 0..MAX_ATTEMPTS {
        let goal = match kind {
            TaskKind::Zone => Goal::Zone {
                cx: uniform(&mut rng, SPAWN_LO[0] + ZONE_HALF, SPAWN_HI[0] - ZONE_HALF),
                cy: uniform(&mut rng, SPAWN_LO[1] + ZONE_HALF, SPAWN_HI[1] - ZONE_HALF),
                half: ZONE_HALF,
            },
            TaskKind::Bowl => Goal::Bowl {
                cx: uniform(
                    &mut rng,
                    SPAWN_LO[0] + BOWL_RADIUS,
                    SPAWN_HI[0] - BOWL_RADIUS,
                ),
                cy: uniform(
                    &mut rng,
                    SPAWN_LO[1] + BOWL_RADIUS,
                    SPAWN_HI[1] - BOWL_RADIUS,
                ),
                radius: BOWL_RADIUS,
            },
            TaskKind::Stacking => Goal::Stacking { base: 0 },
        };
        let mut blocks: Vec<Block> = Vec::with_capacity(n_blocks);
        let mut ok = true;
        for id in 0..n_blocks {
            let x = uniform(&mut rng, SPAWN_LO[0], SPAWN_HI[0]);
            let y = uniform(&mut rng, SPAWN_LO[1], SPAWN_HI[1]);
            let pose = Pose6D::se2(x, y, TABLE_Z, 0.0);
            let crowded = blocks.iter().any(|b| b.pose.dist_xy(&pose) < spacing);
            let near_goal = match goal {
                Goal::Stacking { .. } => id > 0 && blocks[0].pose.dist_xy(&pose) < GOAL_CLEARANCE,
                _ => distance_to_region(&goal, x, y) < GOAL_CLEARANCE,
            };
            if crowded || near_goal {
                ok = false;
                break;
            }
            blocks.push(Block { id, pose });
        }
        if ok {
            let horizon = match kind {
                TaskKind::Stacking => n_blocks - 1,
                _ => n_blocks,
            };
            return Ok(TaskInstance {
                kind,
                seed,
                difficulty,
                workspace: Workspace::default(),
                blocks,
                goal,
                horizon,
                template_id: kind.template_id(),
            });
        }
    }
    Err(Error::LayoutExhausted(MAX_ATTEMPTS))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        for k in TaskKind::ALL {
            let a = generate_task(k, 42, 1.0).unwrap();
            let b = generate_task(k, 42, 1.0).unwrap();
            assert_eq!(
                serde_json::to_string(&a).unwrap(),
                serde_json::to_string(&b).unwrap()
            );
        }
    }

    #[test]
    fn zone_inside_workspace() {
        for seed in 0..200 {
            let t = generate_task(TaskKind::Zone, seed, 1.0).unwrap();
            let Goal::Zone { cx, cy, half } = t.goal else {
                panic!()
            };
            let w = &t.workspace;
            assert!(cx - half >= w.lo[0] && cx + half <= w.hi[0]);
            assert!(cy - half >= w.lo[1] && cy + half <= w.hi[1]);
        }
    }

    #[test]
    fn stacking_horizon() {
        let t = (0..100)
            .map(|s| generate_task(TaskKind::Stacking, s, 1.0).unwrap())
            .find(|t| t.blocks.len() == 3)
            .unwrap();
        assert_eq!(t.horizon, 2);
    }

    #[test]
    fn layout_invariants() {
        for k in TaskKind::ALL {
            for seed in 0..300 {
                let t = generate_task(k, seed, 1.0).unwrap();
                assert!((2..=4).contains(&t.blocks.len()));
                for (i, a) in t.blocks.iter().enumerate() {
                    for b in &t.blocks[i + 1..] {
                        assert!(a.pose.dist_xy(&b.pose) > BLOCK_SIDE);
                    }
                    if k != TaskKind::Stacking {
                        assert!(distance_to_region(&t.goal, a.pose.x, a.pose.y) >= GOAL_CLEARANCE);
                    }
                }
                assert_eq!(t.horizon, t.movable().len());
            }
        }
    }

    #[test]
    fn absurd_difficulty_exhausts() {
        assert!(matches!(
            generate_task(TaskKind::Zone, 0, 100.0),
            Err(Error::LayoutExhausted(1000))
        ));
    }
}
