//! `posemoe`: gradient checks, dense-to-MoE fine-tuning, 2D flow training and
//! the pick-and-place benchmark.

mod checkpoint;
mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use posemoe_core::DType;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::Header;
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "posemoe", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl From<Precision> for DType {
    fn from(p: Precision) -> Self {
        match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Flags shared by every subcommand. Each overrides the config file.
#[derive(Debug, Args)]
struct Common {
    /// Strict JSON run config; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Finite-difference checks of every primitive and both full models.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Corrupt the backward rule of this primitive (test fixture).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Pretrain the dense transformer.
    TrainLm {
        #[command(flatten)]
        common: Common,
    },
    /// Convert a dense checkpoint into an MoE and verify equivalence.
    ConvertMoe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// LoRA fine-tuning of the converted MoE against the dense baseline.
    FinetuneMoe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train a rectified flow on a 2D toy distribution.
    #[command(name = "train-flow2d")]
    TrainFlow2d {
        #[command(flatten)]
        common: Common,
    },
    /// Train Pose-DiT on oracle demonstrations.
    TrainPosedit {
        #[command(flatten)]
        common: Common,
    },
    /// Score a policy on held-out zone, bowl and stacking episodes.
    EvalBench {
        #[command(flatten)]
        common: Common,
        /// `oracle` or a Pose-DiT checkpoint.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        infer_steps: Option<usize>,
    },
}

fn resolve<C: Header + DeserializeOwned + Default>(common: &Common) -> CliResult<C> {
    let mut cfg: C = config::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        *cfg.seed_mut() = s;
    }
    if let Some(o) = &common.out {
        *cfg.out_dir_mut() = o.clone();
    }
    if let Some(p) = common.precision {
        *cfg.precision_mut() = p.into();
    }
    Ok(cfg)
}

fn finish<C: Header + Serialize>(mut cfg: C) -> CliResult<C> {
    let out = cfg.out_dir_mut().clone();
    config::dump(&cfg, &out)?;
    Ok(cfg)
}

macro_rules! by_precision {
    ($p:expr, $f:ident, $cfg:expr) => {
        match $p {
            DType::F32 => $f::<f32>($cfg),
            DType::F64 => $f::<f64>($cfg),
        }
    };
}

fn run(cli: Cli) -> CliResult<()> {
    use commands::{flow, gradcheck, lm, pose};
    match cli.command {
        Command::Gradcheck {
            common,
            inject_fault,
        } => {
            let mut cfg: config::GradcheckRun = resolve(&common)?;
            if inject_fault.is_some() {
                cfg.fault = inject_fault;
            }
            gradcheck::run(&finish(cfg)?)
        }
        Command::TrainLm { common } => {
            let cfg: config::TrainLmRun = finish(resolve(&common)?)?;
            use lm::train_lm;
            by_precision!(cfg.precision, train_lm, &cfg)
        }
        Command::ConvertMoe { common, checkpoint } => {
            let mut cfg: config::ConvertMoeRun = resolve(&common)?;
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            let cfg = finish(cfg)?;
            use lm::convert_moe;
            by_precision!(cfg.precision, convert_moe, &cfg)
        }
        Command::FinetuneMoe { common, checkpoint } => {
            let mut cfg: config::FinetuneMoeRun = resolve(&common)?;
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            let cfg = finish(cfg)?;
            use lm::finetune_moe;
            by_precision!(cfg.precision, finetune_moe, &cfg)
        }
        Command::TrainFlow2d { common } => {
            let cfg: config::TrainFlowRun = finish(resolve(&common)?)?;
            use flow::train_flow2d;
            by_precision!(cfg.precision, train_flow2d, &cfg)
        }
        Command::TrainPosedit { common } => {
            let cfg: config::TrainPoseRun = finish(resolve(&common)?)?;
            use pose::train_posedit_cmd;
            by_precision!(cfg.precision, train_posedit_cmd, &cfg)
        }
        Command::EvalBench {
            common,
            model,
            infer_steps,
        } => {
            let mut cfg: config::EvalBenchRun = resolve(&common)?;
            if let Some(m) = model {
                cfg.model = m;
            }
            if let Some(n) = infer_steps {
                cfg.infer_steps = n;
            }
            let cfg = finish(cfg)?;
            use pose::eval_bench;
            by_precision!(cfg.precision, eval_bench, &cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
