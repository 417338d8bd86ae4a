use super::model::{Condition, PoseDiT, PoseDiTConfig};
use super::train::{batch_loss, Demo};
use crate::error::Result;
use crate::rectflow::FlowSchedule;
use crate::tensor::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::tensor::{ParamId, ParamStore, Rng, Tensor};

/// Two-step toy Pose-DiT used by the full-model gradient check.
pub fn toy_pose_config() -> PoseDiTConfig {
    PoseDiTConfig {
        n_blocks: 1,
        hidden: 8,
        n_heads: 2,
        ffn_mult: 2,
        horizon: 2,
        n_templates: 3,
        template_dim: 4,
        feature_dim: 3,
        schedule: FlowSchedule::default(),
        temporal_attention: true,
    }
}

/// Finite-difference check of the full rectified-flow training loss in f64.
/// All weights are redrawn first: the zero-initialized modulation and head
/// would otherwise leave most gradients exactly zero. One demo is padded so
/// the validity mask is exercised.
pub fn pose_grad_check(seed: u64, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let pc = toy_pose_config();
    let mut store = ParamStore::<f64>::new();
    let model = PoseDiT::new(&pc, &mut store, &mut rng)?;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set_data(id, Tensor::<f64>::randn(shape, 0.4, &mut rng).into_data())?;
    }
    let demos: Vec<Demo> = [(Some(0), 2), (Some(2), 1), (None, 2)]
        .into_iter()
        .map(|(template_id, valid)| {
            let mut plan: Vec<f64> = (0..pc.traj_dim())
                .map(|_| rng.uniform_range(-1.0, 1.0))
                .collect();
            plan[valid * super::ROLES * super::POSE_DIM..].fill(0.0);
            Demo {
                cond: Condition {
                    template_id,
                    features: (0..2)
                        .map(|_| (0..pc.feature_dim).map(|_| rng.normal()).collect())
                        .collect(),
                },
                plan,
                valid,
            }
        })
        .collect();
    let refs: Vec<&Demo> = demos.iter().collect();
    let noise_seed = rng.next_u64();
    grad_check(
        &mut store,
        // Same noise and times on every evaluation.
        |g, s| batch_loss(g, &model, s, &refs, &mut Rng::new(noise_seed)),
        cfg,
        &mut rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_model_gradients() {
        let cfg = GradCheckConfig {
            max_entries: Some(8),
            ..Default::default()
        };
        let report = pose_grad_check(1, cfg).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.params.iter().any(|p| p.name.contains("ada")));
    }
}
