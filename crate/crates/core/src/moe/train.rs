use serde::{Deserialize, Serialize};

use super::model::LmModel;
use super::router::load_balance_loss;
use crate::error::{Error, Result};
use crate::tensor::{AdamW, AdamWConfig, Graph, Real, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmTrainConfig {
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl LmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.optimizer.lr
            )));
        }
        Ok(())
    }
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_ce: f64,
    pub val_ce: f64,
    /// Validation balance loss averaged over layers; `None` for dense models.
    pub balance_loss: Option<f64>,
    /// Validation assignment fractions averaged over layers.
    pub f: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub val_perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub ce: f64,
    pub balance_loss: Option<f64>,
    pub f: Vec<f64>,
}

/// Mean validation cross-entropy and routing statistics.
pub fn evaluate<T: Real>(
    model: &LmModel<T>,
    windows: &[Vec<usize>],
    batch_size: usize,
) -> Result<EvalMetrics> {
    if windows.is_empty() {
        return Err(Error::invalid("evaluate", "no validation windows"));
    }
    let mut ce_sum = 0.0;
    let mut bal_sum = 0.0;
    let mut f_sum: Vec<f64> = Vec::new();
    let mut layer_batches = 0usize;
    for batch in windows.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let terms = model.loss(&mut g, batch)?;
        ce_sum += g.value(terms.ce).item().as_f64() * batch.len() as f64;
        for d in &terms.routing {
            let s = load_balance_loss(d)?;
            bal_sum += s.loss * batch.len() as f64;
            if f_sum.is_empty() {
                f_sum = vec![0.0; s.f.len()];
            }
            for (a, b) in f_sum.iter_mut().zip(&s.f) {
                *a += b * batch.len() as f64;
            }
        }
        if !terms.routing.is_empty() {
            layer_batches += terms.routing.len() * batch.len();
        }
    }
    let n = windows.len() as f64;
    let ce = ce_sum / n;
    if !ce.is_finite() {
        return Err(Error::NonFinite {
            context: "validation cross-entropy".into(),
        });
    }
    let (balance_loss, f) = if layer_batches == 0 {
        (None, Vec::new())
    } else {
        let d = layer_batches as f64;
        (Some(bal_sum / d), f_sum.iter().map(|v| v / d).collect())
    };
    Ok(EvalMetrics {
        ce,
        balance_loss,
        f,
    })
}

/// AdamW over shuffled mini-batches of the training windows. Logs one
/// [`EpochMetrics`] per epoch and aborts on a non-finite loss.
pub fn train_lm<T: Real>(
    model: &mut LmModel<T>,
    train: &[Vec<usize>],
    val: &[Vec<usize>],
    cfg: &LmTrainConfig,
    rng: &mut Rng,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut opt = AdamW::new(cfg.optimizer, &model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut ce_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<usize>> = idx.iter().map(|&i| train[i].clone()).collect();
            let mut g = Graph::new();
            let terms = model.loss(&mut g, &batch)?;
            let total = g.value(terms.total).item().as_f64();
            if !total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    what: format!("loss is {total} in epoch {epoch}"),
                });
            }
            ce_sum += g.value(terms.ce).item().as_f64() * batch.len() as f64;
            model.params.zero_grad();
            g.backward_into(terms.total, &mut model.params)?;
            if let Some(c) = cfg.grad_clip {
                model.params.clip_grad_norm(c);
            }
            opt.step(&mut model.params)?;
            step += 1;
        }
        let v = evaluate(model, val, cfg.batch_size)?;
        let m = EpochMetrics {
            epoch,
            train_ce: ce_sum / train.len() as f64,
            val_ce: v.ce,
            balance_loss: v.balance_loss,
            f: v.f,
        };
        on_epoch(&m);
        epochs.push(m);
    }
    let val_perplexity = epochs.last().expect("epochs >= 1").val_ce.exp();
    Ok(TrainReport {
        epochs,
        val_perplexity,
    })
}
