use serde::{Deserialize, Serialize};

use super::config::{DenseTransformerConfig, LoRAConfig, MoEConfig};
use super::corpus::{self, Corpus, Grammar};
use super::model::LmModel;
use super::train::{train_lm, EpochMetrics, LmTrainConfig, TrainReport};
use crate::error::Result;
use crate::tensor::{AdamWConfig, Real, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub train_windows: usize,
    pub val_windows: usize,
}

/// Stage one: dense pretraining on the scene grammar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: DenseTransformerConfig,
    pub train: LmTrainConfig,
    pub corpus: CorpusConfig,
}

impl PretrainConfig {
    pub fn desk() -> Self {
        PretrainConfig {
            model: DenseTransformerConfig::desk(corpus::vocab_size()),
            train: LmTrainConfig {
                optimizer: AdamWConfig {
                    lr: 3e-3,
                    ..Default::default()
                },
                epochs: 4,
                batch_size: 16,
                grad_clip: Some(1.0),
            },
            corpus: CorpusConfig {
                train_windows: 256,
                val_windows: 32,
            },
        }
    }
}

/// Stage two: LoRA fine-tuning on the instruction grammar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lora: LoRAConfig,
    pub train: LmTrainConfig,
    pub corpus: CorpusConfig,
}

impl FinetuneConfig {
    pub fn desk() -> Self {
        FinetuneConfig {
            lora: LoRAConfig::default(),
            train: LmTrainConfig {
                optimizer: AdamWConfig {
                    lr: 3e-3,
                    ..Default::default()
                },
                epochs: 3,
                batch_size: 16,
                grad_clip: Some(1.0),
            },
            corpus: CorpusConfig {
                train_windows: 128,
                val_windows: 32,
            },
        }
    }
}

/// Dense pretraining followed by paired fine-tuning: converted MoE versus the
/// dense model under the same budget and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneExperiment {
    pub pretrain: PretrainConfig,
    pub moe: MoEConfig,
    pub finetune: FinetuneConfig,
}

impl FinetuneExperiment {
    pub fn desk() -> Self {
        FinetuneExperiment {
            pretrain: PretrainConfig::desk(),
            moe: MoEConfig::e4_top2(),
            finetune: FinetuneConfig::desk(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneOutcome {
    pub pretrain: TrainReport,
    pub dense_baseline: TrainReport,
    pub moe: TrainReport,
}

impl FinetuneOutcome {
    pub fn final_moe(&self) -> &EpochMetrics {
        self.moe.epochs.last().expect("at least one epoch")
    }
}

pub fn pretrain_dense<T: Real>(
    cfg: &PretrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(LmModel<T>, TrainReport)> {
    let root = Rng::new(seed);
    let c = Corpus::generate(
        Grammar::Scene,
        root.fork(1).next_u64(),
        cfg.corpus.train_windows,
        cfg.corpus.val_windows,
        cfg.model.max_seq_len,
    )?;
    let mut dense = LmModel::<T>::dense(&cfg.model, &mut root.fork(2))?;
    let report = train_lm(
        &mut dense,
        &c.train,
        &c.val,
        &cfg.train,
        &mut root.fork(3),
        on_epoch,
    )?;
    Ok((dense, report))
}

/// Fine-tunes LoRA adapters on the instruction grammar. With `moe` the
/// dense model is converted first. Corpus, adapters and batch order depend
/// only on `seed`, so both arms see identical data.
pub fn finetune_from<T: Real>(
    dense: &LmModel<T>,
    cfg: &FinetuneConfig,
    moe: Option<&MoEConfig>,
    seed: u64,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(LmModel<T>, TrainReport)> {
    let root = Rng::new(seed);
    let c = Corpus::generate(
        Grammar::Instruction,
        root.fork(4).next_u64(),
        cfg.corpus.train_windows,
        cfg.corpus.val_windows,
        dense.arch.config.max_seq_len,
    )?;
    let mut model = match moe {
        Some(m) => dense.convert_to_moe(m)?,
        None => dense.clone(),
    };
    model.attach_lora(&cfg.lora, &mut root.fork(5))?;
    let report = train_lm(
        &mut model,
        &c.train,
        &c.val,
        &cfg.train,
        &mut root.fork(6),
        on_epoch,
    )?;
    Ok((model, report))
}

pub fn run_finetune_experiment<T: Real>(
    exp: &FinetuneExperiment,
    seed: u64,
) -> Result<FinetuneOutcome> {
    let (dense, pretrain) = pretrain_dense::<T>(&exp.pretrain, seed, |_| {})?;
    let (_, dense_baseline) = finetune_from(&dense, &exp.finetune, None, seed, |_| {})?;
    let (_, moe) = finetune_from(&dense, &exp.finetune, Some(&exp.moe), seed, |_| {})?;
    Ok(FinetuneOutcome {
        pretrain,
        dense_baseline,
        moe,
    })
}
