//! Dense causal transformer, its conversion into a top-k mixture of experts
//! and LoRA fine-tuning with an auxiliary load-balancing loss.

mod check;
mod config;
pub mod corpus;
mod experiment;
mod layer;
mod model;
mod router;
mod train;

pub use check::{lm_grad_check, toy_lm_config, ModelGradCheck};
pub use config::{DenseTransformerConfig, LoRAConfig, LoraTarget, MoEConfig};
pub use corpus::{Corpus, Grammar};
pub use experiment::{
    finetune_from, pretrain_dense, run_finetune_experiment, CorpusConfig, FinetuneConfig,
    FinetuneExperiment, FinetuneOutcome, PretrainConfig,
};
pub use layer::{MoELayer, MoEOutput};
pub use model::{shift_targets, Block, FeedForward, LmModel, LmOutput, LossTerms, TransformerLm};
pub use router::{balance_loss_var, load_balance_loss, LoadBalanceStats, Router, RoutingDecision};
pub use train::{evaluate, train_lm, EpochMetrics, EvalMetrics, LmTrainConfig, TrainReport};
