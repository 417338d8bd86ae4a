use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Rng, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSchedule {
    pub train_steps: usize,
    pub infer_steps: usize,
}

impl Default for FlowSchedule {
    fn default() -> Self {
        FlowSchedule {
            train_steps: 100,
            infer_steps: 4,
        }
    }
}

impl FlowSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.infer_steps == 0 || self.train_steps < self.infer_steps {
            return Err(Error::Config(format!(
                "need 1 <= infer_steps <= train_steps, got {} and {}",
                self.infer_steps, self.train_steps
            )));
        }
        Ok(())
    }

    /// Training times `k / train_steps`, `k < train_steps`.
    pub fn train_grid(&self) -> Vec<f64> {
        time_grid(self.train_steps)
    }

    pub fn infer_grid(&self) -> Vec<f64> {
        time_grid(self.infer_steps)
    }
}

/// Left endpoints `t_k = k / n` for `k = 0..n`; never contains 1. Both
/// training and sampling go through this function.
pub fn time_grid(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 / n as f64).collect()
}

/// `t·x1 + (1−t)·x0`, elementwise.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
    x0.iter()
        .zip(x1)
        .map(|(a, b)| t * b + (1.0 - t) * a)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
    pub xt: Vec<f64>,
}

impl FlowSample {
    pub fn new(x0: Vec<f64>, x1: Vec<f64>, t: f64) -> Result<Self> {
        if x0.len() != x1.len() || x0.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "make_pair",
                lhs: vec![x0.len()],
                rhs: vec![x1.len()],
            });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(
                "make_pair",
                format!("t = {t} outside [0, 1]"),
            ));
        }
        let xt = interpolate(&x0, &x1, t);
        Ok(FlowSample { x0, x1, t, xt })
    }

    pub fn target(&self) -> Vec<f64> {
        self.x1.iter().zip(&self.x0).map(|(a, b)| a - b).collect()
    }
}

/// Independent coupling: `x1` from the data, `x0` standard normal, `t`
/// uniform on the training grid.
pub fn make_pair(x1: Vec<f64>, rng: &mut Rng, schedule: &FlowSchedule) -> FlowSample {
    let x0: Vec<f64> = (0..x1.len()).map(|_| rng.normal()).collect();
    let t = schedule.train_grid()[rng.below(schedule.train_steps)];
    FlowSample::new(x0, x1, t).expect("matching dims and grid time")
}

/// A batch of samples laid out row-major `[batch, dim]`.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    pub dim: usize,
    pub xt: Vec<f64>,
    pub t: Vec<f64>,
    pub target: Vec<f64>,
}

impl FlowBatch {
    pub fn from_samples(samples: &[FlowSample]) -> Result<Self> {
        let dim = samples
            .first()
            .ok_or_else(|| Error::invalid("rf_loss", "empty batch"))?
            .x0
            .len();
        let mut b = FlowBatch {
            dim,
            xt: Vec::with_capacity(samples.len() * dim),
            t: Vec::with_capacity(samples.len()),
            target: Vec::with_capacity(samples.len() * dim),
        };
        for s in samples {
            if s.x0.len() != dim {
                return Err(Error::ShapeMismatch {
                    op: "rf_loss",
                    lhs: vec![dim],
                    rhs: vec![s.x0.len()],
                });
            }
            b.xt.extend_from_slice(&s.xt);
            b.t.push(s.t);
            b.target.extend(s.target());
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// `mean_b Σ_j w_bj · (target_bj − v_bj)²` with optional weights `w`
/// (same shape as `v`; used to drop padded entries).
pub fn rf_loss_var<T: Real>(
    g: &mut Graph<T>,
    v: Var,
    target: Var,
    weights: Option<&Tensor<T>>,
) -> Result<Var> {
    g.value(v).check_finite("velocity model output")?;
    let shape = g.shape(v).to_vec();
    if shape.is_empty() || shape != g.shape(target) {
        return Err(Error::ShapeMismatch {
            op: "rf_loss",
            lhs: shape,
            rhs: g.shape(target).to_vec(),
        });
    }
    let diff = g.sub(target, v)?;
    let mut sq = g.mul(diff, diff)?;
    if let Some(w) = weights {
        let wv = g.input(w.clone())?;
        sq = g.mul(sq, wv)?;
    }
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / shape[0] as f64)
}
