//! Strict JSON run configs. Every field has a default, unknown keys are
//! rejected, and the fully resolved config is written next to the outputs.

use std::fs;
use std::path::{Path, PathBuf};

use posemoe_core::moe::{FinetuneConfig, MoEConfig, PretrainConfig};
use posemoe_core::posedit::{PoseDiTConfig, PoseTrainConfig};
use posemoe_core::rectflow::Flow2dConfig;
use posemoe_core::taskbench::{CondLayout, TaskKind, Tolerances, HORIZON};
use posemoe_core::DType;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Fields shared by every run config.
pub trait Header {
    fn seed_mut(&mut self) -> &mut u64;
    fn precision_mut(&mut self) -> &mut DType;
    fn out_dir_mut(&mut self) -> &mut PathBuf;
}

macro_rules! header {
    ($t:ty) => {
        impl Header for $t {
            fn seed_mut(&mut self) -> &mut u64 {
                &mut self.seed
            }
            fn precision_mut(&mut self) -> &mut DType {
                &mut self.precision
            }
            fn out_dir_mut(&mut self) -> &mut PathBuf {
                &mut self.out_dir
            }
        }
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckRun {
    pub seed: u64,
    pub precision: DType,
    pub out_dir: PathBuf,
    /// Random shapes per primitive.
    pub trials: usize,
    pub h: f64,
    pub tol: f64,
    /// Entries checked per model parameter tensor.
    pub max_entries: usize,
    /// Test fixture: corrupts the backward of this primitive.
    pub fault: Option<String>,
}

impl Default for GradcheckRun {
    fn default() -> Self {
        GradcheckRun {
            seed: 0,
            precision: DType::F64,
            out_dir: "runs/gradcheck".into(),
            trials: 8,
            h: 1e-5,
            tol: 1e-4,
            max_entries: 12,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainLmRun {
    pub seed: u64,
    pub precision: DType,
    pub out_dir: PathBuf,
    pub pretrain: PretrainConfig,
}

impl Default for TrainLmRun {
    fn default() -> Self {
        TrainLmRun {
            seed: 0,
            precision: DType::F32,
            out_dir: "runs/train-lm".into(),
            pretrain: PretrainConfig::desk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvertMoeRun {
    pub seed: u64,
    pub precision: DType,
    pub out_dir: PathBuf,
    /// Dense checkpoint (`.nta`, sidecar next to it).
    pub checkpoint: Option<PathBuf>,
    pub moe: MoEConfig,
    /// Random token batches compared before writing the MoE checkpoint.
    pub check_batches: usize,
    pub check_batch_size: usize,
}

impl Default for ConvertMoeRun {
    fn default() -> Self {
        ConvertMoeRun {
            seed: 0,
            precision: DType::F32,
            out_dir: "runs/convert-moe".into(),
            checkpoint: None,
            moe: MoEConfig::e4_top2(),
            check_batches: 100,
            check_batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneMoeRun {
    pub seed: u64,
    pub precision: DType,
    pub out_dir: PathBuf,
    /// Dense pretrained checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub moe: MoEConfig,
    pub finetune: FinetuneConfig,
    /// Also fine-tune the dense model with the same budget and seed.
    pub dense_baseline: bool,
}

impl Default for FinetuneMoeRun {
    fn default() -> Self {
        FinetuneMoeRun {
            seed: 0,
            precision: DType::F32,
            out_dir: "runs/finetune-moe".into(),
            checkpoint: None,
            moe: MoEConfig::e4_top2(),
            finetune: FinetuneConfig::desk(),
            dense_baseline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFlowRun {
    pub seed: u64,
    pub precision: DType,
    pub out_dir: PathBuf,
    pub flow: Flow2dConfig,
    /// Points written per evaluated step count; 0 disables the dump.
    pub dump_samples: usize,
}

impl Default for TrainFlowRun {
    fn default() -> Self {
        TrainFlowRun {
            seed: 0,
            precision: DType::F32,
            out_dir: "runs/train-flow2d".into(),
            flow: Flow2dConfig::default(),
            dump_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPoseRun {
    pub seed: u64,
    pub precision: DType,
    pub out_dir: PathBuf,
    pub layout: CondLayout,
    pub kinds: Vec<TaskKind>,
    /// Demonstrations per kind, from task seeds `0..train_tasks`.
    pub train_tasks: u64,
    pub model: PoseDiTConfig,
    pub train: PoseTrainConfig,
}

impl Default for TrainPoseRun {
    fn default() -> Self {
        let layout = CondLayout::PerSlot;
        TrainPoseRun {
            seed: 0,
            precision: DType::F32,
            out_dir: "runs/train-posedit".into(),
            layout,
            kinds: TaskKind::ALL.to_vec(),
            train_tasks: 10_000,
            model: PoseDiTConfig::desk(HORIZON, TaskKind::ALL.len(), layout.feature_dim()),
            train: PoseTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBenchRun {
    pub seed: u64,
    pub precision: DType,
    pub out_dir: PathBuf,
    /// `"oracle"` or a Pose-DiT checkpoint path.
    pub model: String,
    pub infer_steps: usize,
    /// Step count timed against `infer_steps` on the same episodes.
    pub reference_steps: Option<usize>,
    pub n_episodes: usize,
    pub tolerances: Tolerances,
}

impl Default for EvalBenchRun {
    fn default() -> Self {
        EvalBenchRun {
            seed: 0,
            precision: DType::F32,
            out_dir: "runs/eval-bench".into(),
            model: "oracle".into(),
            infer_steps: 4,
            reference_steps: Some(100),
            n_episodes: 200,
            tolerances: Tolerances::default(),
        }
    }
}

header!(GradcheckRun);
header!(TrainLmRun);
header!(ConvertMoeRun);
header!(FinetuneMoeRun);
header!(TrainFlowRun);
header!(TrainPoseRun);
header!(EvalBenchRun);

/// Reads `path` strictly, or the defaults when no file is given.
pub fn load<C: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<C> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Writes the resolved config as `config.json` in the output directory.
pub fn dump<C: Serialize>(cfg: &C, out_dir: &Path) -> CliResult<()> {
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let path = out_dir.join("config.json");
    let text = serde_json::to_string_pretty(cfg)?;
    fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 1, "sede": 2}"#).unwrap();
        let err = load::<TrainLmRun>(Some(&p)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("sede"), "{err}");
    }

    #[test]
    fn partial_config_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 7, "infer_steps": 100}"#).unwrap();
        let c = load::<EvalBenchRun>(Some(&p)).unwrap();
        assert_eq!((c.seed, c.infer_steps, c.n_episodes), (7, 100, 200));
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = TrainPoseRun::default();
        dump(&c, dir.path()).unwrap();
        let back: TrainPoseRun = load(Some(&dir.path().join("config.json"))).unwrap();
        assert_eq!(back, c);
    }
}
