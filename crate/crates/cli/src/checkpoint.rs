//! NTA1 checkpoints with a JSON sidecar holding everything needed to rebuild
//! the architecture: `model.nta` pairs with `model.json`.

use std::fs;
use std::path::{Path, PathBuf};

use posemoe_core::moe::{DenseTransformerConfig, LmModel, LoRAConfig, MoEConfig, TransformerLm};
use posemoe_core::nn::Activation;
use posemoe_core::posedit::{PoseDiT, PoseDiTConfig, TrainedPoseDiT};
use posemoe_core::taskbench::CondLayout;
use posemoe_core::tensor::nta;
use posemoe_core::{DType, ParamStore, Real, Rng};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Lm,
    Flow2d,
    Posedit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar<C> {
    pub kind: ArtifactKind,
    pub config: C,
    pub activation: Activation,
    /// Precision the tensors were written in.
    pub precision: DType,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmArch {
    pub model: DenseTransformerConfig,
    pub moe: Option<MoEConfig>,
    pub lora: Option<LoRAConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseArch {
    pub model: PoseDiTConfig,
    pub layout: CondLayout,
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

pub fn save<T: Real, C: Serialize>(
    path: &Path,
    store: &ParamStore<T>,
    kind: ArtifactKind,
    config: C,
    seed: u64,
) -> CliResult<()> {
    nta::save_store(path, store)?;
    let side = Sidecar {
        kind,
        config,
        activation: Activation::Silu,
        precision: T::DTYPE,
        seed,
    };
    let sp = sidecar_path(path);
    fs::write(&sp, serde_json::to_string_pretty(&side)? + "\n").map_err(|e| CliError::io(&sp, e))
}

fn read_sidecar<C: DeserializeOwned>(path: &Path, want: ArtifactKind) -> CliResult<Sidecar<C>> {
    if !path.exists() {
        return Err(CliError::MissingCheckpoint(path.to_path_buf()));
    }
    let sp = sidecar_path(path);
    let text = fs::read_to_string(&sp).map_err(|_| CliError::MissingCheckpoint(sp.clone()))?;
    let side: Sidecar<C> = serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: sp.display().to_string(),
        msg: e.to_string(),
    })?;
    if side.kind != want {
        return Err(CliError::Usage(format!(
            "{} holds a {:?} checkpoint, expected {:?}",
            path.display(),
            side.kind,
            want
        )));
    }
    Ok(side)
}

/// Rebuilds the LM in precision `T`: dense, then converted, then adapted, so
/// parameter names match the ones written at save time.
pub fn load_lm<T: Real>(path: &Path) -> CliResult<(LmModel<T>, Sidecar<LmArch>)> {
    let side: Sidecar<LmArch> = read_sidecar(path, ArtifactKind::Lm)?;
    let arch = &side.config;
    let mut rng = Rng::new(0);
    let mut model = LmModel::<T>::dense(&arch.model, &mut rng)?;
    if let Some(m) = &arch.moe {
        model = model.convert_to_moe(m)?;
    }
    if let Some(l) = &arch.lora {
        model.attach_lora(l, &mut rng)?;
    }
    nta::load_into_store(path, &mut model.params)?;
    Ok((model, side))
}

pub fn lm_arch(arch: &TransformerLm, lora: Option<&LoRAConfig>) -> LmArch {
    LmArch {
        model: arch.config.clone(),
        moe: arch.moe.clone(),
        lora: lora.cloned(),
    }
}

pub fn load_posedit<T: Real>(path: &Path) -> CliResult<(TrainedPoseDiT<T>, Sidecar<PoseArch>)> {
    let side: Sidecar<PoseArch> = read_sidecar(path, ArtifactKind::Posedit)?;
    let mut params = ParamStore::<T>::new();
    let model = PoseDiT::new(&side.config.model, &mut params, &mut Rng::new(0))?;
    nta::load_into_store(path, &mut params)?;
    Ok((TrainedPoseDiT { model, params }, side))
}
