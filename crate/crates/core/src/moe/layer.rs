use super::config::MoEConfig;
use super::router::{balance_loss_var, Router, RoutingDecision};
use crate::error::{Error, Result};
use crate::nn::Ffn;
use crate::tensor::{Graph, ParamStore, Real, Var};

#[derive(Debug, Clone)]
pub struct MoELayer {
    pub router: Router,
    pub experts: Vec<Ffn>,
}

pub struct MoEOutput {
    pub y: Var,
    pub decision: RoutingDecision,
    /// Differentiable balance loss for this layer.
    pub balance: Var,
}

impl MoELayer {
    pub fn new(router: Router, experts: Vec<Ffn>) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::Config("MoE layer needs at least one expert".into()))?;
        let dims = |f: &Ffn| (f.up.in_dim, f.up.out_dim, f.down.in_dim, f.down.out_dim);
        for (i, e) in experts.iter().enumerate() {
            if dims(e) != dims(first) {
                return Err(Error::invalid(
                    "moe_layer",
                    format!(
                        "expert {i} has shape {:?}, expert 0 has {:?}",
                        dims(e),
                        dims(first)
                    ),
                ));
            }
        }
        if router.num_experts != experts.len() || router.dim != first.up.in_dim {
            return Err(Error::invalid(
                "moe_layer",
                format!(
                    "router [{}x{}] does not match {} experts of width {}",
                    router.num_experts,
                    router.dim,
                    experts.len(),
                    first.up.in_dim
                ),
            ));
        }
        Ok(MoELayer { router, experts })
    }

    /// `x: [tokens, D]`. Each expert only sees the tokens that selected it.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        cfg: &MoEConfig,
    ) -> Result<MoEOutput> {
        let n = g.shape(x)[0];
        let probs = self.router.probs(g, store, x)?;
        let decision =
            RoutingDecision::from_probs(&g.value(probs).to_f64_vec(), self.experts.len(), cfg)?;
        let mask = g.input(decision.selection_mask())?;
        let kept = g.mul(probs, mask)?;
        let gates = if cfg.renormalize_topk {
            let denom = g.sum_axis(kept, 1, true)?;
            g.div(kept, denom)?
        } else {
            kept
        };
        let mut y: Option<Var> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let idx = decision.tokens_for(e);
            if idx.is_empty() {
                continue;
            }
            let xe = g.gather_rows(x, &idx)?;
            let out = expert.forward(g, store, xe)?;
            let col = g.narrow(gates, 1, e, 1)?;
            let ge = g.gather_rows(col, &idx)?;
            let weighted = g.mul(out, ge)?;
            let full = g.scatter_rows(weighted, &idx, n)?;
            y = Some(match y {
                None => full,
                Some(acc) => g.add(acc, full)?,
            });
        }
        let balance = balance_loss_var(g, probs, &decision)?;
        Ok(MoEOutput {
            y: y.expect("every token selects at least one expert"),
            decision,
            balance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Tensor};

    fn setup(e: usize, same: bool) -> (ParamStore<f64>, MoELayer) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(11);
        let router = Router::zeros(&mut store, "r", e, 3);
        let mut experts = Vec::new();
        for i in 0..e {
            let f = Ffn::new(&mut store, &format!("e{i}"), 3, 5, &mut rng);
            experts.push(f);
        }
        if same {
            for i in 1..e {
                for (src, dst) in experts[0].linears().iter().zip(experts[i].linears()) {
                    let w = store.get(src.weight).data().to_vec();
                    let b = store.get(src.bias.unwrap()).data().to_vec();
                    store.set_data(dst.weight, w).unwrap();
                    store.set_data(dst.bias.unwrap(), b).unwrap();
                }
            }
        }
        (store, MoELayer::new(router, experts).unwrap())
    }

    fn run(
        layer: &MoELayer,
        store: &ParamStore<f64>,
        x: &Tensor<f64>,
        cfg: &MoEConfig,
    ) -> Vec<f64> {
        let mut g = Graph::new();
        let xv = g.input(x.clone()).unwrap();
        let out = layer.forward(&mut g, store, xv, cfg).unwrap();
        g.value(out.y).to_f64_vec()
    }

    fn ffn(f: &Ffn, store: &ParamStore<f64>, x: &Tensor<f64>) -> Vec<f64> {
        let mut g = Graph::new();
        let xv = g.input(x.clone()).unwrap();
        let y = f.forward(&mut g, store, xv).unwrap();
        g.value(y).to_f64_vec()
    }

    #[test]
    fn identical_experts_match_single_ffn() {
        let (store, layer) = setup(4, true);
        let x = Tensor::randn(vec![6, 3], 1.0, &mut Rng::new(2));
        let want = ffn(&layer.experts[0], &store, &x);
        for k in 1..=4 {
            let got = run(&layer, &store, &x, &MoEConfig::new(4, k).unwrap());
            let err = got
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-12, "top_k={k}: {err}");
        }
    }

    #[test]
    fn uniform_gates_average_experts() {
        let (store, layer) = setup(3, false);
        let x = Tensor::randn(vec![4, 3], 1.0, &mut Rng::new(3));
        let got = run(&layer, &store, &x, &MoEConfig::new(3, 3).unwrap());
        let outs: Vec<Vec<f64>> = layer.experts.iter().map(|e| ffn(e, &store, &x)).collect();
        for i in 0..got.len() {
            let mean = outs.iter().map(|o| o[i]).sum::<f64>() / 3.0;
            assert!((got[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn hard_gate_selects_expert_zero_exactly() {
        let (mut store, layer) = setup(2, false);
        // Large logit gap drives the softmax to (1, 0) in f64.
        store
            .set_data(layer.router.weight, vec![1000.0, 0.0, 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        let x = Tensor::from_f64(vec![1, 3], &[1.0, 0.0, 0.0]).unwrap();
        let got = run(&layer, &store, &x, &MoEConfig::new(2, 2).unwrap());
        assert_eq!(got, ffn(&layer.experts[0], &store, &x));
    }

    #[test]
    fn mismatched_experts_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(0);
        let router = Router::zeros(&mut store, "r", 2, 3);
        let a = Ffn::new(&mut store, "a", 3, 5, &mut rng);
        let b = Ffn::new(&mut store, "b", 3, 6, &mut rng);
        assert!(MoELayer::new(router, vec![a, b]).is_err());
    }
}
