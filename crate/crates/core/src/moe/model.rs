use std::collections::HashSet;

use super::config::{DenseTransformerConfig, LoRAConfig, LoraTarget, MoEConfig};
use super::layer::MoELayer;
use super::router::{Router, RoutingDecision};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, Ffn, Init, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Rng, Tensor, Var};

#[derive(Debug, Clone)]
pub enum FeedForward {
    Dense(Ffn),
    Moe(MoELayer),
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

/// Pre-LN causal decoder: token + learned position embeddings, blocks of
/// self-attention and feed-forward, final norm and an untied head.
#[derive(Debug, Clone)]
pub struct TransformerLm {
    pub config: DenseTransformerConfig,
    pub moe: Option<MoEConfig>,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

/// Architecture plus its parameter values.
#[derive(Debug, Clone)]
pub struct LmModel<T: Real> {
    pub arch: TransformerLm,
    pub params: ParamStore<T>,
}

pub struct LmOutput {
    /// `[batch, len, vocab]`
    pub logits: Var,
    pub routing: Vec<RoutingDecision>,
    /// Mean of the per-layer balance losses, MoE only.
    pub balance: Option<Var>,
}

fn expert_ffn_name(layer: usize, expert: usize) -> String {
    format!("blocks.{layer}.moe.experts.{expert}")
}

fn dense_ffn_name(layer: usize) -> String {
    format!("blocks.{layer}.ffn")
}

impl TransformerLm {
    pub fn build<T: Real>(
        config: &DenseTransformerConfig,
        moe: Option<&MoEConfig>,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(m) = moe {
            m.validate()?;
        }
        let d = config.embed_dim;
        let tok_emb = store.randn("tok_emb", &[config.vocab_size, d], 0.02, rng);
        let pos_emb = store.randn("pos_emb", &[config.max_seq_len, d], 0.02, rng);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("blocks.{l}");
            let ln1 = LayerNorm::new(store, &format!("{p}.ln1"), d);
            let attn =
                MultiHeadAttention::new(store, &format!("{p}.attn"), d, d, config.n_heads, rng)?;
            let ln2 = LayerNorm::new(store, &format!("{p}.ln2"), d);
            let ffn = match moe {
                None => FeedForward::Dense(Ffn::new(
                    store,
                    &dense_ffn_name(l),
                    d,
                    config.ffn_hidden,
                    rng,
                )),
                Some(m) => {
                    let router = Router::zeros(store, &format!("{p}.moe.router"), m.num_experts, d);
                    let experts = (0..m.num_experts)
                        .map(|e| Ffn::new(store, &expert_ffn_name(l, e), d, config.ffn_hidden, rng))
                        .collect();
                    FeedForward::Moe(MoELayer::new(router, experts)?)
                }
            };
            blocks.push(Block {
                ln1,
                attn,
                ln2,
                ffn,
            });
        }
        let ln_f = LayerNorm::new(store, "ln_f", d);
        let head = Linear::new(
            store,
            "head",
            d,
            config.vocab_size,
            false,
            Init::Normal(0.02),
            rng,
        );
        Ok(TransformerLm {
            config: config.clone(),
            moe: moe.cloned(),
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        })
    }

    /// `tokens` is row-major `[batch, len]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: &[usize],
        batch: usize,
        len: usize,
    ) -> Result<LmOutput> {
        let c = &self.config;
        if batch == 0 || len == 0 || tokens.len() != batch * len {
            return Err(Error::invalid(
                "dense_forward",
                format!("{} token ids for batch {batch} x len {len}", tokens.len()),
            ));
        }
        if len > c.max_seq_len {
            return Err(Error::invalid(
                "dense_forward",
                format!(
                    "sequence length {len} exceeds max_seq_len {}",
                    c.max_seq_len
                ),
            ));
        }
        let d = c.embed_dim;
        let tok = g.param(store, self.tok_emb);
        let pos = g.param(store, self.pos_emb);
        let te = g.embedding(tok, tokens, &[batch, len])?;
        let positions: Vec<usize> = (0..len).collect();
        let pe = g.embedding(pos, &positions, &[len])?;
        let mut h = g.add(te, pe)?;
        let mask = causal_mask(len);
        let mut routing = Vec::new();
        let mut balances = Vec::new();
        for block in &self.blocks {
            let a_in = block.ln1.forward(g, store, h)?;
            let a = block
                .attn
                .forward(g, store, a_in, a_in, Some(mask.clone()))?;
            h = g.add(h, a)?;
            let f_in = block.ln2.forward(g, store, h)?;
            let f = match &block.ffn {
                FeedForward::Dense(ffn) => ffn.forward(g, store, f_in)?,
                FeedForward::Moe(layer) => {
                    let cfg = self.moe.as_ref().expect("MoE block implies MoE config");
                    let flat = g.reshape(f_in, &[batch * len, d])?;
                    let out = layer.forward(g, store, flat, cfg)?;
                    routing.push(out.decision);
                    balances.push(out.balance);
                    g.reshape(out.y, &[batch, len, d])?
                }
            };
            h = g.add(h, f)?;
        }
        let h = self.ln_f.forward(g, store, h)?;
        let logits = self.head.forward(g, store, h)?;
        let balance = if balances.is_empty() {
            None
        } else {
            let n = balances.len();
            let mut acc = balances[0];
            for &b in &balances[1..] {
                acc = g.add(acc, b)?;
            }
            Some(g.scale(acc, 1.0 / n as f64)?)
        };
        Ok(LmOutput {
            logits,
            routing,
            balance,
        })
    }

    /// Next-token cross-entropy plus `balance_coefficient · L_balance` for
    /// MoE models.
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        windows: &[Vec<usize>],
    ) -> Result<LossTerms> {
        let (inputs, targets, b, l) = shift_targets(windows)?;
        let out = self.forward(g, store, &inputs, b, l)?;
        let ce = g.cross_entropy(out.logits, &targets)?;
        let total = match (out.balance, &self.moe) {
            (Some(bal), Some(cfg)) if cfg.balance_coefficient > 0.0 => {
                let s = g.scale(bal, cfg.balance_coefficient)?;
                g.add(ce, s)?
            }
            _ => ce,
        };
        Ok(LossTerms {
            total,
            ce,
            balance: out.balance,
            routing: out.routing,
        })
    }

    pub fn linears_mut(&mut self, targets: &[LoraTarget]) -> Vec<&mut Linear> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            if targets.contains(&LoraTarget::Attention) {
                out.extend(block.attn.linears_mut());
            }
            if targets.contains(&LoraTarget::Ffn) {
                match &mut block.ffn {
                    FeedForward::Dense(f) => out.extend(f.linears_mut()),
                    FeedForward::Moe(m) => {
                        for e in &mut m.experts {
                            out.extend(e.linears_mut());
                        }
                    }
                }
            }
        }
        out
    }

    pub fn routers(&self) -> Vec<&Router> {
        self.blocks
            .iter()
            .filter_map(|b| match &b.ffn {
                FeedForward::Moe(m) => Some(&m.router),
                FeedForward::Dense(_) => None,
            })
            .collect()
    }

    pub fn has_lora(&self) -> bool {
        self.blocks.iter().any(|b| {
            b.attn.linears().iter().any(|l| l.lora.is_some())
                || match &b.ffn {
                    FeedForward::Dense(f) => f.linears().iter().any(|l| l.lora.is_some()),
                    FeedForward::Moe(m) => m
                        .experts
                        .iter()
                        .any(|e| e.linears().iter().any(|l| l.lora.is_some())),
                }
        })
    }
}

/// Splits `[batch, len + 1]` windows into inputs and shifted targets.
pub fn shift_targets(windows: &[Vec<usize>]) -> Result<(Vec<usize>, Vec<usize>, usize, usize)> {
    let first = windows
        .first()
        .ok_or_else(|| Error::invalid("lm_loss", "empty batch"))?;
    if first.len() < 2 || windows.iter().any(|w| w.len() != first.len()) {
        return Err(Error::invalid(
            "lm_loss",
            "windows must share a length of at least 2",
        ));
    }
    let len = first.len() - 1;
    let mut inputs = Vec::with_capacity(windows.len() * len);
    let mut targets = Vec::with_capacity(windows.len() * len);
    for w in windows {
        inputs.extend_from_slice(&w[..len]);
        targets.extend_from_slice(&w[1..]);
    }
    Ok((inputs, targets, windows.len(), len))
}

pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub balance: Option<Var>,
    pub routing: Vec<RoutingDecision>,
}

impl<T: Real> LmModel<T> {
    pub fn dense(config: &DenseTransformerConfig, rng: &mut Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let arch = TransformerLm::build(config, None, &mut params, rng)?;
        Ok(LmModel { arch, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.num_trainable()
    }

    /// Logits as a plain tensor, `[batch, len, vocab]`.
    pub fn logits(&self, tokens: &[usize], batch: usize, len: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self
            .arch
            .forward(&mut g, &self.params, tokens, batch, len)?;
        Ok(g.value(out.logits).clone())
    }

    /// See [`TransformerLm::loss`].
    pub fn loss(&self, g: &mut Graph<T>, windows: &[Vec<usize>]) -> Result<LossTerms> {
        self.arch.loss(g, &self.params, windows)
    }

    /// Replaces every dense FFN by an MoE layer whose experts are bitwise
    /// copies of it. Routers start at zero; all other weights are copied.
    pub fn convert_to_moe(&self, cfg: &MoEConfig) -> Result<LmModel<T>> {
        cfg.validate()?;
        if self.arch.moe.is_some() {
            return Err(Error::Config("model is already an MoE model".into()));
        }
        if self.arch.has_lora() {
            return Err(Error::Config(
                "merge or drop LoRA adapters before conversion".into(),
            ));
        }
        let mut params = ParamStore::new();
        // Values are overwritten below; the RNG only fills placeholders.
        let arch =
            TransformerLm::build(&self.arch.config, Some(cfg), &mut params, &mut Rng::new(0))?;
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let name = params.name(id).to_string();
            let src_name = source_name(&name);
            let data = match src_name {
                None => vec![T::zero(); params.get(id).numel()],
                Some(src) => {
                    let sid = self.params.id(&src).ok_or_else(|| {
                        Error::Config(format!("dense model has no parameter `{src}`"))
                    })?;
                    self.params.get(sid).data().to_vec()
                }
            };
            params.set_data(id, data)?;
        }
        Ok(LmModel { arch, params })
    }

    /// Adds LoRA adapters to the target matrices, freezes all base weights
    /// and leaves routers fully trainable.
    pub fn attach_lora(&mut self, cfg: &LoRAConfig, rng: &mut Rng) -> Result<()> {
        cfg.validate()?;
        self.params.freeze_all();
        for lin in self.arch.linears_mut(&cfg.targets) {
            lin.attach_lora(&mut self.params, cfg.rank, cfg.alpha, rng)?;
        }
        let routers: HashSet<ParamId> = self.arch.routers().iter().map(|r| r.weight).collect();
        for id in routers {
            self.params.set_trainable(id, true);
        }
        Ok(())
    }
}

/// Dense parameter that a converted-model parameter is copied from; `None`
/// for routers, which start at zero.
fn source_name(name: &str) -> Option<String> {
    if name.contains(".moe.router.") {
        return None;
    }
    match name.find(".moe.experts.") {
        None => Some(name.to_string()),
        Some(pos) => {
            let rest = &name[pos + ".moe.experts.".len()..];
            let after = &rest[rest.find('.').expect("expert index followed by a field")..];
            Some(format!("{}.ffn{}", &name[..pos], after))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenseTransformerConfig {
        DenseTransformerConfig {
            vocab_size: 11,
            embed_dim: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_hidden: 12,
            max_seq_len: 6,
        }
    }

    fn tokens(rng: &mut Rng, n: usize, vocab: usize) -> Vec<usize> {
        (0..n).map(|_| rng.below(vocab)).collect()
    }

    #[test]
    fn source_names() {
        assert_eq!(
            source_name("blocks.1.moe.experts.3.up.weight").unwrap(),
            "blocks.1.ffn.up.weight"
        );
        assert_eq!(source_name("blocks.0.moe.router.weight"), None);
        assert_eq!(source_name("head.weight").unwrap(), "head.weight");
    }

    #[test]
    fn logits_shape_and_causality() {
        let mut rng = Rng::new(1);
        let m = LmModel::<f64>::dense(&tiny(), &mut rng).unwrap();
        let mut t = tokens(&mut rng, 2 * 5, 11);
        let a = m.logits(&t, 2, 5).unwrap();
        assert_eq!(a.shape(), &[2, 5, 11]);
        let j = 3;
        t[j] = (t[j] + 1) % 11;
        t[5 + j] = (t[5 + j] + 1) % 11;
        let b = m.logits(&t, 2, 5).unwrap();
        for bi in 0..2 {
            for pos in 0..5 {
                let s = (bi * 5 + pos) * 11;
                let same = a.data()[s..s + 11] == b.data()[s..s + 11];
                assert_eq!(same, pos < j, "batch {bi} position {pos}");
            }
        }
    }

    #[test]
    fn out_of_range_token_rejected() {
        let m = LmModel::<f32>::dense(&tiny(), &mut Rng::new(0)).unwrap();
        assert!(m.logits(&[0, 11], 1, 2).is_err());
        assert!(m.logits(&[0; 7], 1, 7).is_err());
    }

    #[test]
    fn conversion_is_exact_and_copies_bitwise() {
        let mut rng = Rng::new(5);
        let dense = LmModel::<f64>::dense(&tiny(), &mut rng).unwrap();
        for cfg in [
            MoEConfig::e4_top2(),
            MoEConfig::e2_top2(),
            MoEConfig::new(4, 1).unwrap(),
        ] {
            let moe = dense.convert_to_moe(&cfg).unwrap();
            let t = tokens(&mut rng, 3 * 6, 11);
            let a = dense.logits(&t, 3, 6).unwrap();
            let b = moe.logits(&t, 3, 6).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
            let e = cfg.num_experts - 1;
            for l in 0..2 {
                for field in ["up.weight", "up.bias", "down.weight", "down.bias"] {
                    let src = dense.params.id(&format!("blocks.{l}.ffn.{field}")).unwrap();
                    let dst = moe
                        .params
                        .id(&format!("blocks.{l}.moe.experts.{e}.{field}"))
                        .unwrap();
                    let bits = |s: &ParamStore<f64>, id| {
                        s.get(id)
                            .data()
                            .iter()
                            .map(|v| v.to_bits())
                            .collect::<Vec<_>>()
                    };
                    assert_eq!(bits(&dense.params, src), bits(&moe.params, dst));
                }
            }
        }
    }

    #[test]
    fn conversion_param_count() {
        let c = tiny();
        let dense = LmModel::<f32>::dense(&c, &mut Rng::new(0)).unwrap();
        for cfg in [MoEConfig::e4_top2(), MoEConfig::e2_top2()] {
            let moe = dense.convert_to_moe(&cfg).unwrap();
            let e = cfg.num_experts;
            let want =
                dense.num_params() + c.n_layers * ((e - 1) * c.ffn_params() + e * c.embed_dim);
            assert_eq!(moe.num_params(), want);
        }
    }

    #[test]
    fn lora_attach_is_neutral_and_freezes_base() {
        let mut rng = Rng::new(9);
        let dense = LmModel::<f64>::dense(&tiny(), &mut rng).unwrap();
        let mut moe = dense.convert_to_moe(&MoEConfig::e4_top2()).unwrap();
        let t = tokens(&mut rng, 2 * 4, 11);
        let before = moe.logits(&t, 2, 4).unwrap();
        moe.attach_lora(&LoRAConfig::default(), &mut rng).unwrap();
        assert_eq!(moe.logits(&t, 2, 4).unwrap(), before);
        for (_, p) in moe.params.iter() {
            let lora = p.name.contains("lora_");
            let router = p.name.contains(".router.");
            assert_eq!(p.tensor.requires_grad, lora || router, "{}", p.name);
        }
    }

    #[test]
    fn lora_fraction_small_at_desk_scale() {
        let c = DenseTransformerConfig::desk(32);
        let dense = LmModel::<f32>::dense(&c, &mut Rng::new(0)).unwrap();
        let mut moe = dense.convert_to_moe(&MoEConfig::e4_top2()).unwrap();
        moe.attach_lora(&LoRAConfig::default(), &mut Rng::new(1))
            .unwrap();
        let frac = moe.num_trainable() as f64 / moe.num_params() as f64;
        assert!(frac < 0.10, "trainable fraction {frac}");
    }

    #[test]
    fn converting_twice_or_with_lora_rejected() {
        let mut rng = Rng::new(0);
        let mut dense = LmModel::<f64>::dense(&tiny(), &mut rng).unwrap();
        let moe = dense.convert_to_moe(&MoEConfig::e2_top2()).unwrap();
        assert!(moe.convert_to_moe(&MoEConfig::e2_top2()).is_err());
        dense.attach_lora(&LoRAConfig::default(), &mut rng).unwrap();
        assert!(dense.convert_to_moe(&MoEConfig::e2_top2()).is_err());
    }
}
