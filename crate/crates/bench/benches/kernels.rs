use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use posemoe_core::moe::{corpus, DenseTransformerConfig, LmModel, MoEConfig};
use posemoe_core::posedit::{PoseDiT, PoseDiTConfig, TrainedPoseDiT, Workspace};
use posemoe_core::taskbench::{condition, generate_task, CondLayout, TaskKind, HORIZON};
use posemoe_core::{Graph, ParamStore, Rng};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_fwd_bwd");
    for n in [16usize, 64, 128] {
        let mut rng = Rng::new(0);
        let mut store = ParamStore::<f32>::new();
        let a = store.randn("a", &[n, n], 1.0, &mut rng);
        let b = store.randn("b", &[n, n], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let av = g.param(&store, a);
                let bv = g.param(&store, b);
                let y = g.matmul(av, bv).unwrap();
                let s = g.sum(y).unwrap();
                black_box(g.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

fn moe_forward(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let cfg = DenseTransformerConfig::desk(corpus::vocab_size());
    let dense = LmModel::<f32>::dense(&cfg, &mut rng).unwrap();
    let moe = dense.convert_to_moe(&MoEConfig::e4_top2()).unwrap();
    let (b, len) = (8, cfg.max_seq_len);
    let tokens: Vec<usize> = (0..b * len).map(|_| rng.below(cfg.vocab_size)).collect();
    let mut group = c.benchmark_group("lm_forward");
    group.bench_function("dense", |bench| {
        bench.iter(|| black_box(dense.logits(&tokens, b, len).unwrap()))
    });
    group.bench_function("moe_e4_top2", |bench| {
        bench.iter(|| black_box(moe.logits(&tokens, b, len).unwrap()))
    });
    group.finish();
}

fn pose_sampling(c: &mut Criterion) {
    let layout = CondLayout::PerSlot;
    let config = PoseDiTConfig::desk(HORIZON, TaskKind::ALL.len(), layout.feature_dim());
    let mut params = ParamStore::<f32>::new();
    let model = PoseDiT::new(&config, &mut params, &mut Rng::new(2)).unwrap();
    let trained = TrainedPoseDiT { model, params };
    let task = generate_task(TaskKind::Stacking, 10_000, 1.0).unwrap();
    let cond = condition(&task, layout).unwrap();
    let mut group = c.benchmark_group("posedit_plan");
    for steps in [4usize, 100] {
        group.bench_with_input(
            BenchmarkId::from_parameter(steps),
            &steps,
            |bench, &steps| {
                let mut rng = Rng::new(3);
                bench.iter(|| {
                    black_box(
                        trained
                            .predict(&cond, task.horizon, steps, &Workspace::default(), &mut rng)
                            .unwrap(),
                    )
                })
            },
        );
    }
    group.finish();
}

criterion_group!(benches, matmul, moe_forward, pose_sampling);
criterion_main!(benches);
