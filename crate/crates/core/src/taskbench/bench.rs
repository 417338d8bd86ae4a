use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EpisodeResult, Tolerances};
use super::oracle::oracle_policy;
use super::task::{generate_task, Goal, TaskInstance, TaskKind, MAX_BLOCKS};
use crate::error::{Error, Result};
use crate::posedit::{Condition, Demo, PoseTrajectory, TrainedPoseDiT, Workspace};
use crate::tensor::{derive_seed, Real, Rng};

pub const TRAIN_SEEDS: std::ops::Range<u64> = 0..10_000;
pub const EVAL_SEEDS: std::ops::Range<u64> = 10_000..11_000;
/// Longest plan over all task kinds.
pub const HORIZON: usize = MAX_BLOCKS;

/// How scene features are arranged into condition tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondLayout {
    /// One token holding every block slot and the goal.
    Single,
    /// One token per block slot plus one goal token, each tagged with its
    /// slot index.
    PerSlot,
}

impl CondLayout {
    pub fn feature_dim(self) -> usize {
        match self {
            CondLayout::Single => 3 * MAX_BLOCKS + 2,
            CondLayout::PerSlot => 3 + MAX_BLOCKS + 1,
        }
    }
}

/// Scene features in normalized workspace coordinates: the blocks to move in
/// oracle order (x, y, present) and the goal anchor (zone or bowl center,
/// stack base).
pub fn condition(task: &TaskInstance, layout: CondLayout) -> Result<Condition> {
    let w = &task.workspace;
    let norm = |x: f64, y: f64| -> Result<(f64, f64)> {
        let n = w.normalize_pose(&crate::posedit::Pose6D::se2(x, y, w.lo[2], 0.0))?;
        Ok((n[0], n[1]))
    };
    let mut slots = [(0.0, 0.0, 0.0); MAX_BLOCKS];
    for (k, id) in task.movable().into_iter().enumerate() {
        let p = &task.blocks[id].pose;
        let (x, y) = norm(p.x, p.y)?;
        slots[k] = (x, y, 1.0);
    }
    let anchor = match task.goal {
        Goal::Zone { cx, cy, .. } | Goal::Bowl { cx, cy, .. } => norm(cx, cy)?,
        Goal::Stacking { base } => norm(task.blocks[base].pose.x, task.blocks[base].pose.y)?,
    };
    let features = match layout {
        CondLayout::Single => {
            let mut f: Vec<f64> = slots.iter().flat_map(|&(x, y, p)| [x, y, p]).collect();
            f.extend([anchor.0, anchor.1]);
            vec![f]
        }
        CondLayout::PerSlot => {
            let tag = |i: usize| (0..=MAX_BLOCKS).map(move |j| if i == j { 1.0 } else { 0.0 });
            let mut toks: Vec<Vec<f64>> = slots
                .iter()
                .enumerate()
                .map(|(i, &(x, y, p))| [x, y, p].into_iter().chain(tag(i)).collect())
                .collect();
            toks.push(
                [anchor.0, anchor.1, 1.0]
                    .into_iter()
                    .chain(tag(MAX_BLOCKS))
                    .collect(),
            );
            toks
        }
    };
    Ok(Condition {
        template_id: Some(task.template_id),
        features,
    })
}

/// Oracle demonstrations for `seeds` of each kind.
pub fn build_demos(
    kinds: &[TaskKind],
    seeds: std::ops::Range<u64>,
    layout: CondLayout,
) -> Result<Vec<Demo>> {
    let mut out = Vec::new();
    for seed in seeds {
        for &k in kinds {
            let task = generate_task(k, seed, 1.0)?;
            out.push(Demo::new(
                condition(&task, layout)?,
                &oracle_policy(&task),
                &task.workspace,
                HORIZON,
            )?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Plan {
    pub trajectory: PoseTrajectory,
    pub network_evals: usize,
    pub clamped: bool,
}

pub trait Policy: Sync {
    fn plan(&self, task: &TaskInstance, rng: &mut Rng) -> Result<Plan>;
}

pub struct OraclePolicy;

impl Policy for OraclePolicy {
    fn plan(&self, task: &TaskInstance, _rng: &mut Rng) -> Result<Plan> {
        Ok(Plan {
            trajectory: oracle_policy(task),
            network_evals: 0,
            clamped: false,
        })
    }
}

pub struct PoseDiTPolicy<'a, T: Real> {
    pub model: &'a TrainedPoseDiT<T>,
    pub layout: CondLayout,
    pub n_steps: usize,
}

impl<T: Real> Policy for PoseDiTPolicy<'_, T> {
    fn plan(&self, task: &TaskInstance, rng: &mut Rng) -> Result<Plan> {
        let cond = condition(task, self.layout)?;
        let p = self.model.predict(
            &cond,
            task.horizon,
            self.n_steps,
            &Workspace::default(),
            rng,
        )?;
        Ok(Plan {
            trajectory: p.trajectory,
            network_evals: p.network_evals,
            clamped: p.clamped,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeRecord {
    pub kind: TaskKind,
    pub episode_seed: u64,
    pub result: EpisodeResult,
    pub network_evals: usize,
    pub clamped: bool,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct KindReport {
    pub kind: TaskKind,
    pub success_rate: f64,
    pub n_episodes: usize,
    pub episodes: Vec<EpisodeRecord>,
}

impl KindReport {
    pub fn mean_wall_ms(&self) -> f64 {
        self.episodes.iter().map(|e| e.wall_ms).sum::<f64>() / self.n_episodes as f64
    }

    pub fn evals_per_episode(&self) -> Vec<usize> {
        self.episodes.iter().map(|e| e.network_evals).collect()
    }
}

/// Runs `n_episodes` held-out tasks of one kind. Episode `i` uses task seed
/// `10000 + i` and a sampling stream derived from `(seed, episode seed)`, so
/// results do not depend on the number of worker threads.
pub fn success_rate<P: Policy + ?Sized>(
    policy: &P,
    kind: TaskKind,
    n_episodes: usize,
    seed: u64,
    tol: &Tolerances,
) -> Result<KindReport> {
    let span = (EVAL_SEEDS.end - EVAL_SEEDS.start) as usize;
    if n_episodes == 0 || n_episodes > span {
        return Err(Error::Config(format!(
            "n_episodes must be in 1..={span}, got {n_episodes}"
        )));
    }
    let episodes: Vec<EpisodeRecord> = (0..n_episodes as u64)
        .into_par_iter()
        .map(|i| {
            let episode_seed = EVAL_SEEDS.start + i;
            let task = generate_task(kind, episode_seed, 1.0)?;
            let mut rng = Rng::new(derive_seed(seed, episode_seed));
            let t0 = Instant::now();
            let plan = policy.plan(&task, &mut rng)?;
            let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
            let result = evaluate(&plan.trajectory, &task, tol)?;
            Ok(EpisodeRecord {
                kind,
                episode_seed,
                result,
                network_evals: plan.network_evals,
                clamped: plan.clamped,
                wall_ms,
            })
        })
        .collect::<Result<_>>()?;
    let wins = episodes.iter().filter(|e| e.result.success).count();
    Ok(KindReport {
        kind,
        success_rate: wins as f64 / n_episodes as f64,
        n_episodes,
        episodes,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub kinds: Vec<KindReport>,
}

impl BenchReport {
    /// Macro-average over kinds.
    pub fn average(&self) -> f64 {
        self.kinds.iter().map(|k| k.success_rate).sum::<f64>() / self.kinds.len() as f64
    }

    pub fn rate(&self, kind: TaskKind) -> Option<f64> {
        self.kinds
            .iter()
            .find(|k| k.kind == kind)
            .map(|k| k.success_rate)
    }
}

pub fn run_bench<P: Policy + ?Sized>(
    policy: &P,
    n_episodes: usize,
    seed: u64,
    tol: &Tolerances,
) -> Result<BenchReport> {
    let kinds = TaskKind::ALL
        .iter()
        .map(|&k| success_rate(policy, k, n_episodes, seed, tol))
        .collect::<Result<_>>()?;
    Ok(BenchReport { kinds })
}
