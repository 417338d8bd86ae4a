use std::path::{Path, PathBuf};

use posemoe_core::moe::{finetune_from, pretrain_dense, EpochMetrics, TrainReport};
use posemoe_core::{DType, Real, Rng};
use serde::Serialize;

use crate::checkpoint::{self, lm_arch, ArtifactKind};
use crate::config::{ConvertMoeRun, FinetuneMoeRun, TrainLmRun};
use crate::error::{CliError, CliResult};
use crate::output::{num, write_json, write_rows, write_table};

fn print_epoch(tag: &str, m: &EpochMetrics) {
    let bal = m
        .balance_loss
        .map(|b| format!(" balance {b:.4}"))
        .unwrap_or_default();
    println!(
        "{tag} epoch {} train_ce {:.4} val_ce {:.4}{bal}",
        m.epoch, m.train_ce, m.val_ce
    );
}

#[derive(Serialize)]
struct PretrainRow {
    epoch: usize,
    train_ce: f64,
    val_ce: f64,
}

pub fn train_lm<T: Real>(cfg: &TrainLmRun) -> CliResult<()> {
    let (dense, report) =
        pretrain_dense::<T>(&cfg.pretrain, cfg.seed, |m| print_epoch("pretrain", m))?;
    let rows: Vec<PretrainRow> = report
        .epochs
        .iter()
        .map(|m| PretrainRow {
            epoch: m.epoch,
            train_ce: m.train_ce,
            val_ce: m.val_ce,
        })
        .collect();
    write_rows(&cfg.out_dir, "train_lm.csv", &rows)?;
    let path = cfg.out_dir.join("dense.nta");
    checkpoint::save(
        &path,
        &dense.params,
        ArtifactKind::Lm,
        lm_arch(&dense.arch, None),
        cfg.seed,
    )?;
    println!("val perplexity {:.4}", report.val_perplexity);
    println!("wrote {}", path.display());
    Ok(())
}

fn require(ckpt: &Option<PathBuf>) -> CliResult<&Path> {
    ckpt.as_deref().ok_or_else(|| {
        CliError::Usage("no checkpoint given (--checkpoint or `checkpoint` in config)".into())
    })
}

fn max_abs_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

pub fn convert_moe<T: Real>(cfg: &ConvertMoeRun) -> CliResult<()> {
    let (dense, _) = checkpoint::load_lm::<T>(require(&cfg.checkpoint)?)?;
    if dense.arch.moe.is_some() || dense.arch.has_lora() {
        return Err(CliError::Usage(
            "convert-moe needs a plain dense checkpoint".into(),
        ));
    }
    let moe = dense.convert_to_moe(&cfg.moe)?;

    let c = &dense.arch.config;
    let (b, len) = (cfg.check_batch_size, c.max_seq_len);
    let mut rng = Rng::new(cfg.seed);
    let mut worst = 0.0f64;
    let mut rows = Vec::with_capacity(cfg.check_batches);
    for i in 0..cfg.check_batches {
        let tokens: Vec<usize> = (0..b * len).map(|_| rng.below(c.vocab_size)).collect();
        let d = max_abs_diff(
            dense.logits(&tokens, b, len)?.data(),
            moe.logits(&tokens, b, len)?.data(),
        );
        worst = worst.max(d);
        rows.push(vec![i.to_string(), num(d)]);
    }
    write_table(
        &cfg.out_dir,
        "equivalence.csv",
        &["batch".into(), "max_abs_dlogit".into()],
        &rows,
    )?;
    let limit = match T::DTYPE {
        DType::F32 => 1e-6,
        DType::F64 => 1e-12,
    };
    println!(
        "max |dlogit| over {} batches: {worst:.3e} (limit {limit:e}, {})",
        cfg.check_batches,
        T::DTYPE.name()
    );
    if !(worst <= limit) {
        return Err(CliError::Verification(format!(
            "conversion changed the logits by {worst:e} > {limit:e}; no checkpoint written"
        )));
    }
    let path = cfg.out_dir.join("moe.nta");
    checkpoint::save(
        &path,
        &moe.params,
        ArtifactKind::Lm,
        lm_arch(&moe.arch, None),
        cfg.seed,
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    moe_val_perplexity: f64,
    dense_val_perplexity: Option<f64>,
    max_f: f64,
    num_experts: usize,
    top_k: usize,
    balance_coefficient: f64,
}

fn epoch_rows(model: &str, report: &TrainReport, n_experts: usize) -> Vec<Vec<String>> {
    report
        .epochs
        .iter()
        .map(|m| {
            let mut r = vec![
                model.to_string(),
                m.epoch.to_string(),
                num(m.train_ce),
                num(m.val_ce),
                m.balance_loss.map(num).unwrap_or_default(),
            ];
            r.extend((0..n_experts).map(|i| m.f.get(i).copied().map(num).unwrap_or_default()));
            r
        })
        .collect()
}

pub fn finetune_moe<T: Real>(cfg: &FinetuneMoeRun) -> CliResult<()> {
    let (dense, _) = checkpoint::load_lm::<T>(require(&cfg.checkpoint)?)?;
    if dense.arch.moe.is_some() || dense.arch.has_lora() {
        return Err(CliError::Usage(
            "finetune-moe needs a plain dense checkpoint".into(),
        ));
    }
    let e = cfg.moe.num_experts;
    let (moe, moe_report) = finetune_from(&dense, &cfg.finetune, Some(&cfg.moe), cfg.seed, |m| {
        print_epoch("moe", m)
    })?;
    let mut rows = epoch_rows("moe", &moe_report, e);
    let dense_report = if cfg.dense_baseline {
        let (_, r) = finetune_from(&dense, &cfg.finetune, None, cfg.seed, |m| {
            print_epoch("dense", m)
        })?;
        rows.extend(epoch_rows("dense", &r, e));
        Some(r)
    } else {
        None
    };

    let mut header: Vec<String> = ["model", "epoch", "train_ce", "val_ce", "balance_loss"]
        .map(String::from)
        .to_vec();
    header.extend((0..e).map(|i| format!("F_{i}")));
    write_table(&cfg.out_dir, "finetune.csv", &header, &rows)?;

    let last = moe_report.epochs.last().expect("at least one epoch");
    let summary = Summary {
        moe_val_perplexity: moe_report.val_perplexity,
        dense_val_perplexity: dense_report.as_ref().map(|r| r.val_perplexity),
        max_f: last.f.iter().copied().fold(0.0, f64::max),
        num_experts: e,
        top_k: cfg.moe.top_k,
        balance_coefficient: cfg.moe.balance_coefficient,
    };
    write_json(&cfg.out_dir, "summary.json", &summary)?;
    let path = cfg.out_dir.join("moe_lora.nta");
    checkpoint::save(
        &path,
        &moe.params,
        ArtifactKind::Lm,
        lm_arch(&moe.arch, Some(&cfg.finetune.lora)),
        cfg.seed,
    )?;
    match summary.dense_val_perplexity {
        Some(d) => println!(
            "val perplexity: moe {:.4} dense {d:.4}",
            summary.moe_val_perplexity
        ),
        None => println!("val perplexity: moe {:.4}", summary.moe_val_perplexity),
    }
    println!("max F {:.4}", summary.max_f);
    Ok(())
}
