use super::{DenseTransformerConfig, LmModel, LoRAConfig, MoEConfig};
use crate::error::Result;
use crate::tensor::gradcheck::{
    draw_away_from_kinks, grad_check, GradCheckConfig, GradCheckReport,
};
use crate::tensor::{ParamId, Rng, Tensor};

/// Result of a full-model gradient check with margin re-sampling.
#[derive(Debug, Clone)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    /// Draws rejected for sitting too close to a routing boundary.
    pub redraws: usize,
    pub margin: f64,
}

/// Toy LM used by the full-model gradient check.
pub fn toy_lm_config() -> DenseTransformerConfig {
    DenseTransformerConfig {
        vocab_size: 7,
        embed_dim: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_hidden: 12,
        max_seq_len: 8,
    }
}

/// Finite-difference check of the converted MoE LM loss (cross-entropy plus
/// balance term) in f64. Router weights and tokens are redrawn until every
/// argmax and top-k cut clears `10 h`. With `lora`, adapters are attached
/// and only the trainable set (adapters and routers) is checked.
pub fn lm_grad_check(seed: u64, lora: bool, cfg: GradCheckConfig) -> Result<ModelGradCheck> {
    let mut rng = Rng::new(seed);
    let dense = LmModel::<f64>::dense(&toy_lm_config(), &mut rng)?;
    // A large coefficient so the balance path is not drowned out.
    let moe_cfg = MoEConfig {
        balance_coefficient: 0.5,
        ..MoEConfig::e4_top2()
    };
    let mut model = dense.convert_to_moe(&moe_cfg)?;
    if lora {
        model.attach_lora(&LoRAConfig::default(), &mut rng)?;
    }
    let (batch, len, vocab) = (2, 6, toy_lm_config().vocab_size);
    let min_margin = 10.0 * cfg.h;

    let trainable: Vec<ParamId> = model
        .params
        .ids()
        .filter(|&id| model.params.get(id).requires_grad)
        .collect();
    let ((store, windows, margin), redraws) = draw_away_from_kinks(
        &mut rng,
        200,
        min_margin,
        |rng| {
            let mut store = model.params.clone();
            // Zero-initialized routers and LoRA B matrices would leave many
            // gradient paths exactly zero.
            for &id in &trainable {
                let shape = store.get(id).shape().to_vec();
                store.set_data(id, Tensor::<f64>::randn(shape, 0.5, rng).into_data())?;
            }
            let windows: Vec<Vec<usize>> = (0..batch)
                .map(|_| (0..=len).map(|_| rng.below(vocab)).collect())
                .collect();
            let mut g = crate::tensor::Graph::new();
            let terms = model.arch.loss(&mut g, &store, &windows)?;
            let margin = terms
                .routing
                .iter()
                .map(|d| d.min_margin(moe_cfg.top_k))
                .fold(f64::INFINITY, f64::min);
            Ok((store, windows, margin))
        },
        |(_, _, m)| Ok(*m),
    )?;
    model.params = store;
    let arch = &model.arch;
    let report = grad_check(
        &mut model.params,
        |g, s| Ok(arch.loss(g, s, &windows)?.total),
        cfg,
        &mut rng,
    )?;
    Ok(ModelGradCheck {
        report,
        redraws,
        margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converted_lm_gradients() {
        let cfg = GradCheckConfig {
            max_entries: Some(12),
            ..Default::default()
        };
        let out = lm_grad_check(4, false, cfg).unwrap();
        assert!(out.margin >= 10.0 * cfg.h);
        assert!(out.report.passed(), "{:?}", out.report);
        assert!(out.report.params.iter().any(|p| p.name.contains("router")));
    }
}
