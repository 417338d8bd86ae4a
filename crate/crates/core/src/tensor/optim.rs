use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{Error, Result};

/// AdamW hyperparameters. The defaults use lr = 2e-5; betas, eps and weight
/// decay are conventional choices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-5,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Decoupled-weight-decay Adam with bias correction.
///
/// Moments are kept in f64 regardless of parameter precision and are
/// registered against the shapes of the store the optimizer was built for.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    shapes: Vec<Vec<usize>>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let shapes: Vec<Vec<usize>> = store
            .iter()
            .map(|(_, p)| p.tensor.shape().to_vec())
            .collect();
        let sizes: Vec<usize> = store.iter().map(|(_, p)| p.tensor.numel()).collect();
        AdamW {
            config,
            step: 0,
            shapes,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update to every trainable parameter that holds a gradient.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.shapes.len() {
            return Err(Error::OptimizerMismatch(format!(
                "optimizer registered {} parameters, store has {}",
                self.shapes.len(),
                store.len()
            )));
        }
        for (id, p) in store.iter() {
            if p.tensor.shape() != self.shapes[id.0].as_slice() {
                return Err(Error::OptimizerMismatch(format!(
                    "parameter `{}` has shape {:?}, optimizer expects {:?}",
                    p.name,
                    p.tensor.shape(),
                    self.shapes[id.0]
                )));
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            betas: (b1, b2),
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            if !t.requires_grad {
                continue;
            }
            let Some(grad) = t.grad.take() else { continue };
            let (m, v) = (&mut self.first[id.0], &mut self.second[id.0]);
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i].as_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let (mh, vh) = (m[i] / c1, v[i] / c2);
                let mut x = w.as_f64();
                x -= lr * weight_decay * x;
                x -= lr * mh / (vh.sqrt() + eps);
                *w = T::lit(x);
            }
            t.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(v: f64) -> (ParamStore<f64>, crate::tensor::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(vec![1], vec![v]).unwrap(), true);
        (s, id)
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let (mut s, id) = store(1.0);
        s.zero_grad();
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
            &s,
        );
        opt.step(&mut s).unwrap();
        assert_eq!(s.get(id).data()[0], 1.0);
    }

    #[test]
    fn decoupled_decay() {
        let (mut s, id) = store(1.0);
        s.zero_grad();
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.1,
                ..Default::default()
            },
            &s,
        );
        opt.step(&mut s).unwrap();
        assert!((s.get(id).data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02] {
            let (mut s, id) = store(0.5);
            s.get_mut(id).grad = Some(vec![g]);
            let mut opt = AdamW::new(
                AdamWConfig {
                    lr: 0.01,
                    weight_decay: 0.0,
                    ..Default::default()
                },
                &s,
            );
            opt.step(&mut s).unwrap();
            // m_hat = g, v_hat = g^2 => delta = lr * g / (|g| + eps).
            let expected = 0.5 - 0.01 * g / (g.abs() + 1e-8);
            assert!((s.get(id).data()[0] - expected).abs() < 1e-15);
            assert!(((s.get(id).data()[0] - 0.5).abs() - 0.01).abs() < 1e-8);
        }
    }

    #[test]
    fn mismatched_store_is_rejected() {
        let (s, _) = store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let mut other = s.clone();
        other.zeros("extra", &[2], true);
        assert!(matches!(
            opt.step(&mut other),
            Err(Error::OptimizerMismatch(_))
        ));
    }

    #[test]
    fn frozen_params_do_not_move() {
        let (mut s, id) = store(1.0);
        s.set_trainable(id, false);
        s.get_mut(id).grad = Some(vec![1.0]);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.1,
                ..Default::default()
            },
            &s,
        );
        opt.step(&mut s).unwrap();
        assert_eq!(s.get(id).data()[0], 1.0);
    }
}
