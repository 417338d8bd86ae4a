use posemoe_core::moe::lm_grad_check;
use posemoe_core::posedit::pose_grad_check;
use posemoe_core::tensor::gradcheck::{check_primitives, GradCheckConfig};
use posemoe_core::tensor::PRIMITIVES;
use posemoe_core::DType;

use crate::config::GradcheckRun;
use crate::error::{CliError, CliResult};
use crate::output::{num, write_table};

struct Row {
    check: String,
    kind: &'static str,
    trials: usize,
    max_rel_error: f64,
}

pub fn run(cfg: &GradcheckRun) -> CliResult<()> {
    if cfg.precision != DType::F64 {
        return Err(CliError::Usage("gradcheck runs in f64 only".into()));
    }
    if cfg.trials == 0 || cfg.max_entries == 0 {
        return Err(CliError::Usage(
            "trials and max_entries must be positive".into(),
        ));
    }
    let fault = match &cfg.fault {
        None => None,
        Some(op) => Some(
            *PRIMITIVES
                .iter()
                .find(|p| **p == op.as_str())
                .ok_or_else(|| CliError::Usage(format!("unknown primitive `{op}`")))?,
        ),
    };
    let gc = GradCheckConfig {
        h: cfg.h,
        tol: cfg.tol,
        fault,
        ..Default::default()
    };

    let mut rows: Vec<Row> = check_primitives(cfg.seed, cfg.trials, gc)?
        .into_iter()
        .map(|p| Row {
            check: p.op.to_string(),
            kind: "primitive",
            trials: p.trials,
            max_rel_error: p.max_rel_error,
        })
        .collect();

    let model_cfg = GradCheckConfig {
        max_entries: Some(cfg.max_entries),
        ..gc
    };
    for (name, lora) in [("moe_lm", false), ("moe_lm_lora", true)] {
        let out = lm_grad_check(cfg.seed, lora, model_cfg)?;
        rows.push(Row {
            check: name.into(),
            kind: "model",
            trials: 1,
            max_rel_error: out.report.max_rel_error(),
        });
    }
    let pose = pose_grad_check(cfg.seed, model_cfg)?;
    rows.push(Row {
        check: "pose_dit".into(),
        kind: "model",
        trials: 1,
        max_rel_error: pose.max_rel_error(),
    });

    let header: Vec<String> = ["check", "kind", "trials", "max_rel_error", "tol", "passed"]
        .map(String::from)
        .to_vec();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.check.clone(),
                r.kind.into(),
                r.trials.to_string(),
                num(r.max_rel_error),
                num(cfg.tol),
                (r.max_rel_error < cfg.tol).to_string(),
            ]
        })
        .collect();
    write_table(&cfg.out_dir, "gradcheck.csv", &header, &table)?;

    for r in &rows {
        let mark = if r.max_rel_error < cfg.tol {
            "ok  "
        } else {
            "FAIL"
        };
        println!(
            "{mark} {:<14} {:<9} worst rel err {:.3e}",
            r.check, r.kind, r.max_rel_error
        );
    }
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !(r.max_rel_error < cfg.tol))
        .map(|r| r.check.as_str())
        .collect();
    if failed.is_empty() {
        println!("all {} checks passed (tol {:e})", rows.len(), cfg.tol);
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}
