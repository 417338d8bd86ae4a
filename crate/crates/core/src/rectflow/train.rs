use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::energy::energy_distance;
use super::mlp::{BoundMlp, MlpConfig, VelocityMlp};
use super::sampler::{euler_sample, straightness};
use super::schedule::{make_pair, rf_loss_var, FlowBatch, FlowSchedule};
use super::toy::Toy2d;
use crate::error::{Error, Result};
use crate::tensor::{AdamW, AdamWConfig, Graph, ParamStore, Real, Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowEvalConfig {
    /// Points per sample set.
    pub n_samples: usize,
    /// Independent sample sets averaged per reported distance.
    pub repeats: usize,
    pub step_counts: Vec<usize>,
    pub n_fine: usize,
}

impl Default for FlowEvalConfig {
    fn default() -> Self {
        FlowEvalConfig {
            n_samples: 1000,
            repeats: 5,
            step_counts: vec![1, 4, 100],
            n_fine: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flow2dConfig {
    pub dataset: Toy2d,
    pub mlp: MlpConfig,
    pub schedule: FlowSchedule,
    pub optimizer: AdamWConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Cosine decay of the learning rate to zero over `steps`.
    pub cosine_decay: bool,
    pub log_every: usize,
    pub eval: FlowEvalConfig,
}

impl Default for Flow2dConfig {
    fn default() -> Self {
        Flow2dConfig {
            dataset: Toy2d::EightGaussians,
            mlp: MlpConfig::default(),
            schedule: FlowSchedule::default(),
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..Default::default()
            },
            steps: 20_000,
            batch_size: 256,
            cosine_decay: true,
            log_every: 500,
            eval: FlowEvalConfig::default(),
        }
    }
}

impl Flow2dConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "steps, batch_size and log_every must be positive".into(),
            ));
        }
        if self.mlp.dim != 2 {
            return Err(Error::Config(format!(
                "2-D datasets need mlp.dim = 2, got {}",
                self.mlp.dim
            )));
        }
        if self.eval.n_samples == 0 || self.eval.repeats == 0 || self.eval.step_counts.contains(&0)
        {
            return Err(Error::Config(
                "eval sizes and step counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub rf_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowEvalRow {
    pub step_count: usize,
    pub energy_distance: f64,
    pub straightness: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowReport {
    pub loss_curve: Vec<LossPoint>,
    pub evals: Vec<FlowEvalRow>,
    /// Energy distance between two independent data sample sets.
    pub noise_floor: f64,
}

impl FlowReport {
    pub fn energy_at(&self, step_count: usize) -> Option<f64> {
        self.evals
            .iter()
            .find(|r| r.step_count == step_count)
            .map(|r| r.energy_distance)
    }
}

pub struct TrainedFlow<T: Real> {
    pub model: VelocityMlp,
    pub params: ParamStore<T>,
}

impl<T: Real> TrainedFlow<T> {
    pub fn field(&self) -> BoundMlp<'_, T> {
        BoundMlp {
            model: &self.model,
            params: &self.params,
        }
    }

    /// `n` samples from `n_steps` Euler steps, row-major `[n, dim]`.
    pub fn sample(&self, rng: &mut Rng, n: usize, n_steps: usize) -> Result<Vec<f64>> {
        let z0: Vec<f64> = (0..n * self.model.config.dim)
            .map(|_| rng.normal())
            .collect();
        Ok(euler_sample(&self.field(), &z0, n_steps)?.end().to_vec())
    }
}

fn lr_at(cfg: &Flow2dConfig, step: usize) -> f64 {
    if !cfg.cosine_decay {
        return cfg.optimizer.lr;
    }
    let p = step as f64 / cfg.steps as f64;
    0.5 * cfg.optimizer.lr * (1.0 + (std::f64::consts::PI * p).cos())
}

pub fn train_flow_2d<T: Real>(
    cfg: &Flow2dConfig,
    seed: u64,
) -> Result<(TrainedFlow<T>, FlowReport)> {
    cfg.validate()?;
    let root = Rng::new(seed);
    let mut params = ParamStore::<T>::new();
    let model = VelocityMlp::new(&cfg.mlp, &mut params, &mut root.fork(1))?;
    let mut opt = AdamW::new(cfg.optimizer, &params);
    let mut data_rng = root.fork(2);
    let mut pair_rng = root.fork(3);
    let mut loss_curve = Vec::new();
    let mut running = 0.0;
    for step in 0..cfg.steps {
        let x1 = cfg.dataset.sample(&mut data_rng, cfg.batch_size);
        let samples: Vec<_> = x1
            .chunks(2)
            .map(|p| make_pair(p.to_vec(), &mut pair_rng, &cfg.schedule))
            .collect();
        let batch = FlowBatch::from_samples(&samples)?;
        let mut g = Graph::new();
        let xt = g.input(Tensor::from_f64(vec![batch.len(), 2], &batch.xt)?)?;
        let target = g.input(Tensor::from_f64(vec![batch.len(), 2], &batch.target)?)?;
        let v = model.forward(&mut g, &params, xt, &batch.t)?;
        let loss = rf_loss_var(&mut g, v, target, None)?;
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
        opt.set_lr(lr_at(cfg, step));
        opt.step(&mut params)?;
        if (step + 1) % cfg.log_every == 0 {
            loss_curve.push(LossPoint {
                step: step + 1,
                rf_loss: running / cfg.log_every as f64,
            });
            running = 0.0;
        }
    }
    let trained = TrainedFlow { model, params };
    let report = evaluate_flow(&trained, cfg, &root.fork(4), loss_curve)?;
    Ok((trained, report))
}

/// Energy distances at each step count against fresh data, averaged over
/// `repeats` independent sample sets, plus the data-resample noise floor.
pub fn evaluate_flow<T: Real>(
    flow: &TrainedFlow<T>,
    cfg: &Flow2dConfig,
    rng: &Rng,
    loss_curve: Vec<LossPoint>,
) -> Result<FlowReport> {
    let e = &cfg.eval;
    let n = e.n_samples;
    let mut floor = 0.0;
    for r in 0..e.repeats as u64 {
        let a = cfg.dataset.sample(&mut rng.fork(100 + r), n);
        let b = cfg.dataset.sample(&mut rng.fork(200 + r), n);
        floor += energy_distance(&a, &b, 2)?;
    }
    let z_fine: Vec<f64> = {
        let mut zr = rng.fork(300);
        (0..2 * n.min(256)).map(|_| zr.normal()).collect()
    };
    let s = straightness(&flow.field(), &z_fine, e.n_fine)?;
    let mut evals = Vec::new();
    for &steps in &e.step_counts {
        let mut ed = 0.0;
        let mut wall = 0.0;
        for r in 0..e.repeats as u64 {
            let data = cfg.dataset.sample(&mut rng.fork(400 + r), n);
            let t0 = Instant::now();
            // Same noise for every step count so the comparison is paired.
            let gen = flow.sample(&mut rng.fork(500 + r), n, steps)?;
            wall += t0.elapsed().as_secs_f64() * 1e3;
            ed += energy_distance(&gen, &data, 2)?;
        }
        evals.push(FlowEvalRow {
            step_count: steps,
            energy_distance: ed / e.repeats as f64,
            straightness: s,
            wall_ms: wall,
        });
    }
    Ok(FlowReport {
        loss_curve,
        evals,
        noise_floor: floor / e.repeats as f64,
    })
}
