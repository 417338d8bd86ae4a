use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::pose::{POSE_DIM, ROLES};
use crate::error::{Error, Result};
use crate::nn::{Ffn, Init, LayerNorm, Linear, MultiHeadAttention};
use crate::rectflow::{FlowSchedule, TIME_SCALE};
use crate::tensor::{sinusoidal_features, Graph, ParamId, ParamStore, Real, Rng, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseDiTConfig {
    pub n_blocks: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    /// Maximum plan horizon `T`; shorter plans are padded and masked.
    pub horizon: usize,
    pub n_templates: usize,
    /// Width of the learned per-template embedding.
    pub template_dim: usize,
    /// Width of the per-token scene features appended to it.
    pub feature_dim: usize,
    pub schedule: FlowSchedule,
    /// Disables temporal self-attention (diagnostic ablation).
    #[serde(default = "default_true")]
    pub temporal_attention: bool,
}

fn default_true() -> bool {
    true
}

impl PoseDiTConfig {
    /// 3 blocks, hidden 256, 4 heads.
    pub fn paper(horizon: usize, n_templates: usize, feature_dim: usize) -> Self {
        PoseDiTConfig {
            n_blocks: 3,
            hidden: 256,
            n_heads: 4,
            ffn_mult: 4,
            horizon,
            n_templates,
            template_dim: 16,
            feature_dim,
            schedule: FlowSchedule::default(),
            temporal_attention: true,
        }
    }

    /// Same depth and heads at a width that trains on one CPU core.
    pub fn desk(horizon: usize, n_templates: usize, feature_dim: usize) -> Self {
        PoseDiTConfig {
            hidden: 64,
            ..Self::paper(horizon, n_templates, feature_dim)
        }
    }

    pub fn cond_dim(&self) -> usize {
        self.template_dim + self.feature_dim
    }

    /// Flattened trajectory width `T · 2 · 6`.
    pub fn traj_dim(&self) -> usize {
        self.horizon * ROLES * POSE_DIM
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.n_blocks == 0 || self.horizon == 0 || self.n_templates == 0 || self.ffn_mult == 0 {
            return Err(Error::Config(
                "n_blocks, horizon, n_templates and ffn_mult must be positive".into(),
            ));
        }
        if self.hidden == 0
            || self.hidden % 2 != 0
            || self.n_heads == 0
            || self.hidden % self.n_heads != 0
        {
            return Err(Error::Config(format!(
                "hidden {} must be even and divisible by n_heads {}",
                self.hidden, self.n_heads
            )));
        }
        if self.cond_dim() == 0 {
            return Err(Error::Config("condition width is zero".into()));
        }
        Ok(())
    }
}

/// The semantic condition for one plan: a task-template id and a set of
/// condition tokens built from scene features. `template_id = None` zeroes
/// the whole condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub template_id: Option<usize>,
    /// `[n_tokens][feature_dim]`
    pub features: Vec<Vec<f64>>,
}

impl Condition {
    pub fn zeros(n_tokens: usize, feature_dim: usize) -> Self {
        Condition {
            template_id: None,
            features: vec![vec![0.0; feature_dim]; n_tokens],
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.features.len()
    }
}

/// Shift, scale and gate for one residual sublayer.
struct Modulation {
    shift: Var,
    scale: Var,
    gate: Var,
}

const SUBLAYERS: usize = 5;

#[derive(Debug, Clone)]
pub struct StDiTBlock {
    pub norms: [LayerNorm; SUBLAYERS],
    pub spatial: MultiHeadAttention,
    pub cross_spatial: MultiHeadAttention,
    pub temporal: MultiHeadAttention,
    pub cross_temporal: MultiHeadAttention,
    pub ffn: Ffn,
    /// `t_emb → 3 · 5 · hidden`, zero-initialized.
    pub ada: Linear,
}

/// Spatial-temporal diffusion transformer over `[T, 2, 6]` pose plans.
#[derive(Debug, Clone)]
pub struct PoseDiT {
    pub config: PoseDiTConfig,
    pub input: Linear,
    pub role_emb: ParamId,
    pub time_pos_emb: ParamId,
    pub t_mlp: [Linear; 2],
    pub template_emb: ParamId,
    pub cond_proj: Linear,
    pub blocks: Vec<StDiTBlock>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

/// Everything a forward pass needs besides the noisy plan.
pub struct PoseBatch<'a> {
    /// `[B]` flow times.
    pub t: &'a [f64],
    pub conds: &'a [Condition],
    /// `[B]` number of valid plan steps.
    pub valid: &'a [usize],
}

impl PoseDiT {
    pub fn new<T: Real>(
        config: &PoseDiTConfig,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let input = Linear::new(store, "input", POSE_DIM, h, true, Init::FanIn, rng);
        let role_emb = store.randn("role_emb", &[ROLES, h], 0.02, rng);
        let time_pos_emb = store.randn("time_pos_emb", &[config.horizon, h], 0.02, rng);
        let t_mlp = [
            Linear::new(store, "t_mlp.0", h, h, true, Init::FanIn, rng),
            Linear::new(store, "t_mlp.1", h, h, true, Init::FanIn, rng),
        ];
        let template_emb = store.randn(
            "template_emb",
            &[config.n_templates, config.template_dim.max(1)],
            1.0,
            rng,
        );
        let cond_proj = Linear::new(
            store,
            "cond_proj",
            config.cond_dim(),
            h,
            true,
            Init::FanIn,
            rng,
        );
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for b in 0..config.n_blocks {
            let p = format!("blocks.{b}");
            let attn = |store: &mut ParamStore<T>, rng: &mut Rng, n: &str| {
                MultiHeadAttention::new(store, &format!("{p}.{n}"), h, h, config.n_heads, rng)
            };
            blocks.push(StDiTBlock {
                norms: std::array::from_fn(|i| LayerNorm::new(store, &format!("{p}.norm{i}"), h)),
                spatial: attn(store, rng, "spatial")?,
                cross_spatial: attn(store, rng, "cross_spatial")?,
                temporal: attn(store, rng, "temporal")?,
                cross_temporal: attn(store, rng, "cross_temporal")?,
                ffn: Ffn::new(store, &format!("{p}.ffn"), h, h * config.ffn_mult, rng),
                ada: Linear::new(
                    store,
                    &format!("{p}.ada"),
                    h,
                    3 * SUBLAYERS * h,
                    true,
                    Init::Zeros,
                    rng,
                ),
            });
        }
        let final_norm = LayerNorm::new(store, "final_norm", h);
        let head = Linear::new(store, "head", h, POSE_DIM, true, Init::Zeros, rng);
        Ok(PoseDiT {
            config: config.clone(),
            input,
            role_emb,
            time_pos_emb,
            t_mlp,
            template_emb,
            cond_proj,
            blocks,
            final_norm,
            head,
        })
    }

    /// Sinusoidal features of `t · 1000` followed by a SiLU MLP; `[B, hidden]`.
    pub fn timestep_embed<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        t: &[f64],
    ) -> Result<Var> {
        let scaled: Vec<f64> = t.iter().map(|v| v * TIME_SCALE).collect();
        let f = g.input(sinusoidal_features::<T>(
            &scaled,
            self.config.hidden,
            10_000.0,
        )?)?;
        let h = self.t_mlp[0].forward(g, store, f)?;
        let h = g.silu(h)?;
        self.t_mlp[1].forward(g, store, h)
    }

    /// Projected condition tokens, `[B, n_tokens, hidden]`.
    pub fn condition_tokens<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        conds: &[Condition],
    ) -> Result<Var> {
        let c = &self.config;
        let b = conds.len();
        let n = conds[0].n_tokens();
        if n == 0
            || conds
                .iter()
                .any(|x| x.n_tokens() != n || x.features.iter().any(|f| f.len() != c.feature_dim))
        {
            return Err(Error::invalid(
                "condition",
                format!(
                    "every condition needs the same non-zero token count with {} features",
                    c.feature_dim
                ),
            ));
        }
        let mut ids = Vec::with_capacity(b * n);
        let mut keep = Vec::with_capacity(b);
        for cond in conds {
            match cond.template_id {
                Some(id) if id >= c.n_templates => {
                    return Err(Error::invalid(
                        "condition",
                        format!(
                            "template id {id} out of range for {} templates",
                            c.n_templates
                        ),
                    ))
                }
                Some(id) => {
                    ids.extend(std::iter::repeat(id).take(n));
                    keep.push(1.0);
                }
                None => {
                    ids.extend(std::iter::repeat(0).take(n));
                    keep.push(0.0);
                }
            }
        }
        let mut parts = Vec::new();
        if c.template_dim > 0 {
            let table = g.param(store, self.template_emb);
            parts.push(g.embedding(table, &ids, &[b, n])?);
        }
        if c.feature_dim > 0 {
            let flat: Vec<f64> = conds
                .iter()
                .flat_map(|x| x.features.iter().flatten().copied())
                .collect();
            parts.push(g.input(Tensor::from_f64(vec![b, n, c.feature_dim], &flat)?)?);
        }
        let mut raw = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 2)?
        };
        if keep.iter().any(|&k| k == 0.0) {
            let kv = g.input(Tensor::from_f64(vec![b, 1, 1], &keep)?)?;
            raw = g.mul(raw, kv)?;
        }
        self.cond_proj.forward(g, store, raw)
    }

    fn modulations<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        block: &StDiTBlock,
        t_emb: Var,
    ) -> Result<Vec<Modulation>> {
        let h = self.config.hidden;
        let b = g.shape(t_emb)[0];
        let act = g.silu(t_emb)?;
        let m = block.ada.forward(g, store, act)?;
        let m = g.reshape(m, &[b, 1, 1, 3 * SUBLAYERS * h])?;
        let parts = g.chunk(m, 3 * SUBLAYERS, 3)?;
        Ok(parts
            .chunks(3)
            .map(|p| Modulation {
                shift: p[0],
                scale: p[1],
                gate: p[2],
            })
            .collect())
    }

    /// `LN(x) · (1 + scale) + shift`.
    fn modulate<T: Real>(
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        norm: &LayerNorm,
        x: Var,
        m: &Modulation,
    ) -> Result<Var> {
        let n = norm.forward(g, store, x)?;
        let s = g.add_scalar(m.scale, 1.0)?;
        let y = g.mul(n, s)?;
        g.add(y, m.shift)
    }

    fn gated<T: Real>(g: &mut Graph<T>, x: Var, update: Var, m: &Modulation) -> Result<Var> {
        let u = g.mul(update, m.gate)?;
        g.add(x, u)
    }

    /// Key mask for temporal attention, `[B · 2 · heads, T, T]`; padded
    /// steps are never attended to.
    fn temporal_mask(&self, valid: &[usize]) -> Arc<[bool]> {
        let t = self.config.horizon;
        let mut m = Vec::with_capacity(valid.len() * ROLES * self.config.n_heads * t * t);
        for &v in valid {
            for _ in 0..ROLES * self.config.n_heads {
                for _q in 0..t {
                    m.extend((0..t).map(|k| k >= v));
                }
            }
        }
        m.into()
    }

    pub fn block_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        block: &StDiTBlock,
        x: Var,
        t_emb: Var,
        cond: Var,
        valid: &[usize],
    ) -> Result<Var> {
        let c = &self.config;
        let (b, t, h) = (g.shape(x)[0], c.horizon, c.hidden);
        let mods = self.modulations(g, store, block, t_emb)?;
        let cross = |g: &mut Graph<T>,
                     attn: &MultiHeadAttention,
                     x: Var,
                     m: &Modulation,
                     norm: &LayerNorm|
         -> Result<Var> {
            let n = Self::modulate(g, store, norm, x, m)?;
            let q = g.reshape(n, &[b, t * ROLES, h])?;
            let a = attn.forward(g, store, q, cond, None)?;
            let a = g.reshape(a, &[b, t, ROLES, h])?;
            Self::gated(g, x, a, m)
        };

        // Spatial: the two roles within each plan step.
        let n = Self::modulate(g, store, &block.norms[0], x, &mods[0])?;
        let s = g.reshape(n, &[b * t, ROLES, h])?;
        let s = block.spatial.forward(g, store, s, s, None)?;
        let s = g.reshape(s, &[b, t, ROLES, h])?;
        let mut x = Self::gated(g, x, s, &mods[0])?;
        x = cross(g, &block.cross_spatial, x, &mods[1], &block.norms[1])?;

        // Temporal: plan steps of each role, non-causal.
        if c.temporal_attention {
            let n = Self::modulate(g, store, &block.norms[2], x, &mods[2])?;
            let p = g.permute(n, &[0, 2, 1, 3])?;
            let p = g.reshape(p, &[b * ROLES, t, h])?;
            let a = block
                .temporal
                .forward(g, store, p, p, Some(self.temporal_mask(valid)))?;
            let a = g.reshape(a, &[b, ROLES, t, h])?;
            let a = g.permute(a, &[0, 2, 1, 3])?;
            x = Self::gated(g, x, a, &mods[2])?;
            x = cross(g, &block.cross_temporal, x, &mods[3], &block.norms[3])?;
        }

        let n = Self::modulate(g, store, &block.norms[4], x, &mods[4])?;
        let f = block.ffn.forward(g, store, n)?;
        Self::gated(g, x, f, &mods[4])
    }

    /// `z: [B, T, 2, 6]` normalized noisy plans; returns the velocity with the
    /// same shape.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        batch: &PoseBatch<'_>,
    ) -> Result<Var> {
        let c = &self.config;
        let shape = g.shape(z).to_vec();
        let b = batch.t.len();
        if shape != [b, c.horizon, ROLES, POSE_DIM]
            || batch.conds.len() != b
            || batch.valid.len() != b
        {
            return Err(Error::invalid(
                "posedit_forward",
                format!(
                    "plan shape {shape:?} with {} times, {} conditions, {} masks; expected [{b}, {}, 2, 6]",
                    b,
                    batch.conds.len(),
                    batch.valid.len(),
                    c.horizon
                ),
            ));
        }
        if let Some(&v) = batch.valid.iter().find(|&&v| v == 0 || v > c.horizon) {
            return Err(Error::invalid(
                "posedit_forward",
                format!("valid length {v} outside 1..={}", c.horizon),
            ));
        }
        g.value(z).check_finite("Pose-DiT input")?;
        let mut x = self.input.forward(g, store, z)?;
        let role = g.param(store, self.role_emb);
        x = g.add(x, role)?;
        let tp = g.param(store, self.time_pos_emb);
        let tp = g.reshape(tp, &[c.horizon, 1, c.hidden])?;
        x = g.add(x, tp)?;
        let t_emb = self.timestep_embed(g, store, batch.t)?;
        let cond = self.condition_tokens(g, store, batch.conds)?;
        for block in &self.blocks {
            x = self.block_forward(g, store, block, x, t_emb, cond, batch.valid)?;
        }
        let x = self.final_norm.forward(g, store, x)?;
        let v = self.head.forward(g, store, x)?;
        g.value(v).check_finite("Pose-DiT output")?;
        Ok(v)
    }

    /// Swaps the two rows of the role embedding (for equivariance checks).
    pub fn swap_role_embeddings<T: Real>(&self, store: &mut ParamStore<T>) {
        let h = self.config.hidden;
        let mut d = store.get(self.role_emb).data().to_vec();
        let (a, b) = d.split_at_mut(h);
        a.swap_with_slice(b);
        store.set_data(self.role_emb, d).expect("same length");
    }
}
