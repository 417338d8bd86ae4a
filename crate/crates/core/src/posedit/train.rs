use serde::{Deserialize, Serialize};

use super::model::{Condition, PoseBatch, PoseDiT, PoseDiTConfig};
use super::pose::{PoseTrajectory, Workspace, POSE_DIM, ROLES};
use crate::error::{Error, Result};
use crate::rectflow::{euler_sample, rf_loss_var, VelocityField};
use crate::tensor::{AdamW, AdamWConfig, Graph, ParamStore, Real, Rng, Tensor};

/// One demonstration: a condition and its normalized plan padded to the
/// model horizon.
#[derive(Debug, Clone)]
pub struct Demo {
    pub cond: Condition,
    /// Flat `[horizon, 2, 6]`, zeros beyond `valid`.
    pub plan: Vec<f64>,
    pub valid: usize,
}

impl Demo {
    pub fn new(
        cond: Condition,
        traj: &PoseTrajectory,
        workspace: &Workspace,
        horizon: usize,
    ) -> Result<Self> {
        let valid = traj.horizon();
        if valid == 0 || valid > horizon {
            return Err(Error::invalid(
                "demo",
                format!("plan of {valid} steps does not fit horizon {horizon}"),
            ));
        }
        let mut plan = workspace.normalize(traj)?;
        plan.resize(horizon * ROLES * POSE_DIM, 0.0);
        Ok(Demo { cond, plan, valid })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseTrainConfig {
    pub optimizer: AdamWConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub cosine_decay: bool,
    pub log_every: usize,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

/// Desk budget: about 6 minutes on one core at hidden 64.
impl Default for PoseTrainConfig {
    fn default() -> Self {
        PoseTrainConfig {
            optimizer: AdamWConfig {
                lr: 2e-3,
                ..Default::default()
            },
            steps: 4000,
            batch_size: 64,
            cosine_decay: true,
            log_every: 100,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoseLossPoint {
    pub step: usize,
    pub rf_loss: f64,
}

pub struct TrainedPoseDiT<T: Real> {
    pub model: PoseDiT,
    pub params: ParamStore<T>,
}

/// Validity weights `[B, T, 2, 6]`: one on real plan steps, zero on padding.
fn step_weights<T: Real>(valid: &[usize], horizon: usize) -> Tensor<T> {
    let per_step = ROLES * POSE_DIM;
    let data: Vec<f64> = valid
        .iter()
        .flat_map(|&v| {
            (0..horizon * per_step).map(move |i| if i / per_step < v { 1.0 } else { 0.0 })
        })
        .collect();
    Tensor::from_f64(vec![valid.len(), horizon, ROLES, POSE_DIM], &data).expect("non-empty")
}

fn lr_at(cfg: &PoseTrainConfig, step: usize) -> f64 {
    if !cfg.cosine_decay {
        return cfg.optimizer.lr;
    }
    0.5 * cfg.optimizer.lr * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos())
}

/// Rectified-flow loss on a batch of demos with fresh noise and grid times.
pub fn batch_loss<T: Real>(
    g: &mut Graph<T>,
    model: &PoseDiT,
    params: &ParamStore<T>,
    demos: &[&Demo],
    rng: &mut Rng,
) -> Result<crate::tensor::Var> {
    let c = &model.config;
    let b = demos.len();
    let d = c.traj_dim();
    let grid = c.schedule.train_grid();
    let mut xt = Vec::with_capacity(b * d);
    let mut target = Vec::with_capacity(b * d);
    let mut t = Vec::with_capacity(b);
    for demo in demos {
        let tk = grid[rng.below(grid.len())];
        for &x1 in &demo.plan {
            let x0 = rng.normal();
            xt.push(tk * x1 + (1.0 - tk) * x0);
            target.push(x1 - x0);
        }
        t.push(tk);
    }
    let shape = vec![b, c.horizon, ROLES, POSE_DIM];
    let z = g.input(Tensor::from_f64(shape.clone(), &xt)?)?;
    let tv = g.input(Tensor::from_f64(shape, &target)?)?;
    let conds: Vec<Condition> = demos.iter().map(|d| d.cond.clone()).collect();
    let valid: Vec<usize> = demos.iter().map(|d| d.valid).collect();
    let v = model.forward(
        g,
        params,
        z,
        &PoseBatch {
            t: &t,
            conds: &conds,
            valid: &valid,
        },
    )?;
    rf_loss_var(g, v, tv, Some(&step_weights(&valid, c.horizon)))
}

pub fn train_posedit<T: Real>(
    config: &PoseDiTConfig,
    demos: &[Demo],
    cfg: &PoseTrainConfig,
    seed: u64,
    mut on_log: impl FnMut(&PoseLossPoint),
) -> Result<(TrainedPoseDiT<T>, Vec<PoseLossPoint>)> {
    if demos.is_empty() {
        return Err(Error::Config("no demonstrations".into()));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 || cfg.log_every == 0 {
        return Err(Error::Config(
            "steps, batch_size and log_every must be positive".into(),
        ));
    }
    let root = Rng::new(seed);
    let mut params = ParamStore::<T>::new();
    let model = PoseDiT::new(config, &mut params, &mut root.fork(1))?;
    let mut opt = AdamW::new(cfg.optimizer, &params);
    let mut rng = root.fork(2);
    let mut curve = Vec::new();
    let mut running = 0.0;
    for step in 0..cfg.steps {
        let batch: Vec<&Demo> = (0..cfg.batch_size)
            .map(|_| &demos[rng.below(demos.len())])
            .collect();
        let mut g = Graph::new();
        let loss = batch_loss(&mut g, &model, &params, &batch, &mut rng)?;
        let lv = g.value(loss).item().as_f64();
        if !lv.is_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("rf_loss is {lv}"),
            });
        }
        running += lv;
        params.zero_grad();
        g.backward_into(loss, &mut params)?;
        if let Some(c) = cfg.grad_clip {
            params.clip_grad_norm(c);
        }
        opt.set_lr(lr_at(cfg, step));
        opt.step(&mut params)?;
        if step == 0 || (step + 1) % cfg.log_every == 0 {
            let n = if step == 0 { 1 } else { cfg.log_every };
            let p = PoseLossPoint {
                step: step + 1,
                rf_loss: if step == 0 { lv } else { running / n as f64 },
            };
            on_log(&p);
            curve.push(p);
            running = 0.0;
        }
    }
    Ok((TrainedPoseDiT { model, params }, curve))
}

/// Velocity field of a trained model for one fixed condition. Counts
/// network evaluations.
pub struct ConditionedField<'a, T: Real> {
    pub model: &'a PoseDiT,
    pub params: &'a ParamStore<T>,
    pub cond: &'a Condition,
    pub valid: usize,
    pub evals: std::cell::Cell<usize>,
}

impl<T: Real> VelocityField for ConditionedField<'_, T> {
    fn dim(&self) -> usize {
        self.model.config.traj_dim()
    }

    fn velocity(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        self.evals.set(self.evals.get() + 1);
        let c = &self.model.config;
        let b = z.len() / c.traj_dim();
        let mut g = Graph::new();
        let zv = g.input(Tensor::from_f64(vec![b, c.horizon, ROLES, POSE_DIM], z)?)?;
        let conds = vec![self.cond.clone(); b];
        let v = self.model.forward(
            &mut g,
            self.params,
            zv,
            &PoseBatch {
                t: &vec![t; b],
                conds: &conds,
                valid: &vec![self.valid; b],
            },
        )?;
        Ok(g.value(v).to_f64_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub trajectory: PoseTrajectory,
    /// Normalized plan before clamping, `[valid, 2, 6]`.
    pub normalized: Vec<f64>,
    pub clamped: bool,
    pub network_evals: usize,
}

impl<T: Real> TrainedPoseDiT<T> {
    /// Samples a plan with `n_steps` Euler steps from Gaussian noise and maps
    /// it back to workspace coordinates. Only the first `valid` steps are
    /// returned.
    pub fn predict(
        &self,
        cond: &Condition,
        valid: usize,
        n_steps: usize,
        workspace: &Workspace,
        rng: &mut Rng,
    ) -> Result<Prediction> {
        let field = ConditionedField {
            model: &self.model,
            params: &self.params,
            cond,
            valid,
            evals: std::cell::Cell::new(0),
        };
        let z0: Vec<f64> = (0..field.dim()).map(|_| rng.normal()).collect();
        let traj = euler_sample(&field, &z0, n_steps)?;
        let normalized = traj.end()[..valid * ROLES * POSE_DIM].to_vec();
        let (trajectory, clamped) = workspace.denormalize(&normalized)?;
        Ok(Prediction {
            trajectory,
            normalized,
            clamped,
            network_evals: field.evals.get(),
        })
    }
}
