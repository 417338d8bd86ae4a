use serde::{Deserialize, Serialize};

use super::sampler::VelocityField;
use crate::error::{Error, Result};
use crate::nn::{Init, Linear};
use crate::tensor::{sinusoidal_features, Graph, ParamStore, Real, Rng, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub time_features: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            dim: 2,
            hidden: 128,
            layers: 3,
            time_features: 16,
        }
    }
}

/// Time scale applied before the sinusoidal embedding so that `t ∈ [0, 1]`
/// spans the usual diffusion-step range.
pub const TIME_SCALE: f64 = 1000.0;

/// `v(x, t)`: SiLU MLP on `[x, sinusoidal(t)]`.
#[derive(Debug, Clone)]
pub struct VelocityMlp {
    pub config: MlpConfig,
    pub layers: Vec<Linear>,
}

impl VelocityMlp {
    pub fn new<T: Real>(
        config: &MlpConfig,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if config.dim == 0
            || config.hidden == 0
            || config.layers == 0
            || config.time_features % 2 != 0
        {
            return Err(Error::Config(format!("invalid MLP config {config:?}")));
        }
        let mut layers = Vec::new();
        let mut width = config.dim + config.time_features;
        for l in 0..config.layers {
            layers.push(Linear::new(
                store,
                &format!("mlp.{l}"),
                width,
                config.hidden,
                true,
                Init::FanIn,
                rng,
            ));
            width = config.hidden;
        }
        layers.push(Linear::new(
            store,
            "mlp.out",
            width,
            config.dim,
            true,
            Init::FanIn,
            rng,
        ));
        Ok(VelocityMlp {
            config: config.clone(),
            layers,
        })
    }

    /// `x: [batch, dim]`, one time per row.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        t: &[f64],
    ) -> Result<Var> {
        let scaled: Vec<f64> = t.iter().map(|v| v * TIME_SCALE).collect();
        let tf = g.input(sinusoidal_features::<T>(
            &scaled,
            self.config.time_features,
            10_000.0,
        )?)?;
        let mut h = g.concat(&[x, tf], 1)?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.silu(h)?;
            }
        }
        Ok(h)
    }
}

/// A model paired with its parameters, usable by the samplers.
pub struct BoundMlp<'a, T: Real> {
    pub model: &'a VelocityMlp,
    pub params: &'a ParamStore<T>,
}

impl<T: Real> VelocityField for BoundMlp<'_, T> {
    fn dim(&self) -> usize {
        self.model.config.dim
    }

    fn velocity(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        let n = z.len() / self.dim();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_f64(vec![n, self.dim()], z)?)?;
        let v = self.model.forward(&mut g, self.params, x, &vec![t; n])?;
        Ok(g.value(v).to_f64_vec())
    }
}
