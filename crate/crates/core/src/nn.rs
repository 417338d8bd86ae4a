//! Parameterized layers shared by the language model and Pose-DiT.
//!
//! Layers only hold [`ParamId`]s; the values live in a [`ParamStore`] so a
//! single architecture description can be evaluated at either precision.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Rng, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Activation used by every feed-forward block. Stored in checkpoint
/// sidecars so it is never implicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Normal(f64),
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn,
}

fn init_tensor<T: Real>(shape: &[usize], init: Init, rng: &mut Rng) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Normal(std) => Tensor::randn(shape.to_vec(), std, rng),
        Init::FanIn => Tensor::uniform(
            shape.to_vec(),
            1.0 / (shape[shape.len() - 1] as f64).sqrt(),
            rng,
        ),
    }
}

/// Low-rank update `ΔW = (alpha / r) · B · A`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scaling: f64,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub lora: Option<LoraAdapter>,
    name: String,
}

impl Linear {
    /// Weight is stored as `[out, in]`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(&[out_dim, in_dim], init, rng),
            true,
        );
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), &[out_dim], true));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
            lora: None,
            name: name.to_string(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        let y = g.linear(x, w, b)?;
        match &self.lora {
            None => Ok(y),
            Some(l) => {
                let a = g.param(store, l.a);
                let bm = g.param(store, l.b);
                let low = g.matmul_t(x, a, false, true)?;
                let up = g.matmul_t(low, bm, false, true)?;
                let up = g.scale(up, l.scaling)?;
                g.add(y, up)
            }
        }
    }

    /// Adds a LoRA adapter: `A` small random, `B` zero, so the layer output
    /// is unchanged until `B` is trained.
    pub fn attach_lora<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        rank: usize,
        alpha: f64,
        rng: &mut Rng,
    ) -> Result<()> {
        if rank == 0 || rank > self.in_dim.min(self.out_dim) {
            return Err(Error::invalid(
                "attach_lora",
                format!(
                    "rank {rank} invalid for `{}` with dims {}x{}",
                    self.name, self.out_dim, self.in_dim
                ),
            ));
        }
        if self.lora.is_some() {
            return Err(Error::invalid(
                "attach_lora",
                format!("`{}` already has an adapter", self.name),
            ));
        }
        let a = store.add(
            format!("{}.lora_a", self.name),
            Tensor::uniform(
                vec![rank, self.in_dim],
                1.0 / (self.in_dim as f64).sqrt(),
                rng,
            ),
            true,
        );
        let b = store.zeros(format!("{}.lora_b", self.name), &[self.out_dim, rank], true);
        self.lora = Some(LoraAdapter {
            a,
            b,
            rank,
            scaling: alpha / rank as f64,
        });
        Ok(())
    }

    /// `W + (alpha/r)·B·A` as a plain tensor.
    pub fn effective_weight<T: Real>(&self, store: &ParamStore<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let w = g.input(store.get(self.weight).clone())?;
        let out = match &self.lora {
            None => w,
            Some(l) => {
                let a = g.input(store.get(l.a).clone())?;
                let b = g.input(store.get(l.b).clone())?;
                let ba = g.matmul(b, a)?;
                let ba = g.scale(ba, l.scaling)?;
                g.add(w, ba)?
            }
        };
        Ok(g.value(out).clone())
    }

    pub fn base_params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    pub fn num_params(&self) -> usize {
        self.out_dim * self.in_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// Layer norm with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.ones(format!("{name}.gamma"), &[dim], true),
            beta: store.zeros(format!("{name}.beta"), &[dim], true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul(n, gamma)?;
        g.add(y, beta)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

/// Two-layer SiLU feed-forward block.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        Ffn {
            up: Linear::new(
                store,
                &format!("{name}.up"),
                dim,
                hidden,
                true,
                Init::FanIn,
                rng,
            ),
            down: Linear::new(
                store,
                &format!("{name}.down"),
                hidden,
                dim,
                true,
                Init::FanIn,
                rng,
            ),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.silu(h)?;
        self.down.forward(g, store, h)
    }

    pub fn num_params(&self) -> usize {
        self.up.num_params() + self.down.num_params()
    }

    pub fn linears(&self) -> [&Linear; 2] {
        [&self.up, &self.down]
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 2] {
        [&mut self.up, &mut self.down]
    }
}

/// Multi-head attention; queries and keys/values may come from different
/// sequences (cross-attention).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(
                store,
                &format!("{name}.q"),
                dim,
                dim,
                false,
                Init::FanIn,
                rng,
            ),
            k: Linear::new(
                store,
                &format!("{name}.k"),
                kv_dim,
                dim,
                false,
                Init::FanIn,
                rng,
            ),
            v: Linear::new(
                store,
                &format!("{name}.v"),
                kv_dim,
                dim,
                false,
                Init::FanIn,
                rng,
            ),
            o: Linear::new(
                store,
                &format!("{name}.o"),
                dim,
                dim,
                false,
                Init::FanIn,
                rng,
            ),
            heads,
            dim,
        })
    }

    fn split_heads<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (n, len) = (s[0], s[1]);
        let dh = self.dim / self.heads;
        let x = g.reshape(x, &[n, len, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[n * self.heads, len, dh])
    }

    /// `xq`: `[batch, q_len, dim]`, `xkv`: `[batch, k_len, kv_dim]`.
    /// `mask` (true = blocked) has shape `[q_len, k_len]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        xq: Var,
        xkv: Var,
        mask: Option<Arc<[bool]>>,
    ) -> Result<Var> {
        let s = g.shape(xq).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid(
                "attention",
                format!("expected [batch, seq, dim], got {s:?}"),
            ));
        }
        let (n, lq) = (s[0], s[1]);
        let q = self.q.forward(g, store, xq)?;
        let k = self.k.forward(g, store, xkv)?;
        let v = self.v.forward(g, store, xkv)?;
        let (q, k, v) = (
            self.split_heads(g, q)?,
            self.split_heads(g, k)?,
            self.split_heads(g, v)?,
        );
        let a = g.attention(q, k, v, mask)?;
        let a = g.reshape(a, &[n, self.heads, lq, self.dim / self.heads])?;
        let a = g.permute(a, &[0, 2, 1, 3])?;
        let a = g.reshape(a, &[n, lq, self.dim])?;
        self.o.forward(g, store, a)
    }

    pub fn linears(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }
}

/// Upper-triangular "future" mask of size `len x len`.
pub fn causal_mask(len: usize) -> Arc<[bool]> {
    (0..len * len)
        .map(|i| i % len > i / len)
        .collect::<Vec<_>>()
        .into()
}
