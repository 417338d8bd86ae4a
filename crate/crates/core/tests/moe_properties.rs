use posemoe_core::moe::{
    balance_loss_var, lm_grad_check, toy_lm_config, LmModel, MoEConfig, Router, RoutingDecision,
};
use posemoe_core::tensor::gradcheck::GradCheckConfig;
use posemoe_core::{Graph, ParamStore, Rng, Tensor};
use proptest::prelude::*;

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conversion_is_output_preserving(seed in 0u64..10_000, e in 1usize..5, k_off in 0usize..4, len in 1usize..8) {
        let k = 1 + k_off % e;
        let mut rng = Rng::new(seed);
        let cfg = toy_lm_config();
        let dense = LmModel::<f64>::dense(&cfg, &mut rng).unwrap();
        let moe = dense.convert_to_moe(&MoEConfig::new(e, k).unwrap()).unwrap();
        let tokens: Vec<usize> = (0..2 * len).map(|_| rng.below(cfg.vocab_size)).collect();
        let a = dense.logits(&tokens, 2, len).unwrap();
        let b = moe.logits(&tokens, 2, len).unwrap();
        prop_assert!(max_abs(a.data(), b.data()) <= 1e-12);
    }

    #[test]
    fn routing_probs_are_simplex_and_gates_renormalize(seed in 0u64..10_000, e in 2usize..6, k_off in 0usize..5) {
        let k = 1 + k_off % e;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::<f64>::new();
        let router = Router::zeros(&mut store, "r", e, 4);
        store.set_data(router.weight, Tensor::<f64>::randn(vec![e, 4], 2.0, &mut rng).into_data()).unwrap();
        let x = Tensor::<f64>::randn(vec![9, 4], 1.0, &mut rng);
        let d = router.route(&store, &x, &MoEConfig::new(e, k).unwrap()).unwrap();
        for (row, gates) in d.probs.iter().zip(&d.gate_weights) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!((gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for sel in &d.selected {
            prop_assert_eq!(sel.len(), k);
        }
    }
}

#[test]
fn conversion_without_renormalization_is_not_exact() {
    let mut rng = Rng::new(1);
    let dense = LmModel::<f64>::dense(&toy_lm_config(), &mut rng).unwrap();
    let cfg = MoEConfig {
        renormalize_topk: false,
        ..MoEConfig::e4_top2()
    };
    let moe = dense.convert_to_moe(&cfg).unwrap();
    let tokens = [1, 2, 3, 4];
    let a = dense.logits(&tokens, 1, 4).unwrap();
    let b = moe.logits(&tokens, 1, 4).unwrap();
    assert!(max_abs(a.data(), b.data()) > 1e-3);
}

#[test]
fn f32_conversion_within_tolerance() {
    let mut rng = Rng::new(2);
    let cfg = toy_lm_config();
    let dense = LmModel::<f32>::dense(&cfg, &mut rng).unwrap();
    for preset in [MoEConfig::e4_top2(), MoEConfig::e2_top2()] {
        let moe = dense.convert_to_moe(&preset).unwrap();
        let tokens: Vec<usize> = (0..12).map(|_| rng.below(cfg.vocab_size)).collect();
        let a = dense.logits(&tokens, 2, 6).unwrap().to_f64_vec();
        let b = moe.logits(&tokens, 2, 6).unwrap().to_f64_vec();
        assert!(max_abs(&a, &b) <= 1e-6);
    }
}

#[test]
fn lora_adapter_gradients() {
    let cfg = GradCheckConfig {
        max_entries: Some(10),
        ..Default::default()
    };
    let out = lm_grad_check(9, true, cfg).unwrap();
    assert!(out.report.passed(), "{:?}", out.report);
    let names: Vec<&str> = out.report.params.iter().map(|p| p.name.as_str()).collect();
    assert!(names.iter().any(|n| n.contains("lora")), "{names:?}");
    assert!(
        names
            .iter()
            .all(|n| n.contains("lora") || n.contains("router")),
        "{names:?}"
    );
}

#[test]
fn balance_gradient_spreads_routing() {
    // Descending the balance loss alone moves probability mass away from the
    // overloaded expert.
    let (e, n, dim) = (4, 32, 6);
    let mut rng = Rng::new(3);
    let mut store = ParamStore::<f64>::new();
    let router = Router::zeros(&mut store, "r", e, dim);
    let mut w = Tensor::<f64>::randn(vec![e, dim], 0.1, &mut rng).into_data();
    for v in &mut w[..dim] {
        *v += 1.0;
    }
    store.set_data(router.weight, w).unwrap();
    // Positive features so the boosted row of W dominates every token.
    let x: Vec<f64> = (0..n * dim).map(|_| rng.normal().abs()).collect();
    let x = Tensor::new(vec![n, dim], x).unwrap();
    let cfg = MoEConfig::e4_top2();

    let max_g = |store: &ParamStore<f64>| -> f64 {
        let d = router.route(store, &x, &cfg).unwrap();
        (0..e)
            .map(|j| d.probs.iter().map(|p| p[j]).sum::<f64>() / n as f64)
            .fold(0.0, f64::max)
    };
    let before = max_g(&store);
    for _ in 0..20 {
        store.zero_grad();
        let mut g = Graph::new();
        let xv = g.input(x.clone()).unwrap();
        let probs = router.probs(&mut g, &store, xv).unwrap();
        let d = RoutingDecision::from_probs(&g.value(probs).to_f64_vec(), e, &cfg).unwrap();
        let loss = balance_loss_var(&mut g, probs, &d).unwrap();
        g.backward_into(loss, &mut store).unwrap();
        let grad = store.get(router.weight).grad.clone().unwrap();
        let data: Vec<f64> = store
            .get(router.weight)
            .data()
            .iter()
            .zip(&grad)
            .map(|(w, g)| w - 0.5 * g)
            .collect();
        store.set_data(router.weight, data).unwrap();
    }
    let after = max_g(&store);
    assert!(after < before, "{before} -> {after}");
}
