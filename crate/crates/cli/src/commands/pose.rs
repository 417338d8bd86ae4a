use std::path::Path;

use posemoe_core::posedit::train_posedit;
use posemoe_core::taskbench::{build_demos, run_bench, BenchReport, OraclePolicy, PoseDiTPolicy};
use posemoe_core::Real;

use crate::checkpoint::{self, ArtifactKind, PoseArch};
use crate::config::{EvalBenchRun, TrainPoseRun};
use crate::error::{CliError, CliResult};
use crate::output::{num, write_rows, write_table};

pub fn train_posedit_cmd<T: Real>(cfg: &TrainPoseRun) -> CliResult<()> {
    if cfg.kinds.is_empty() || cfg.train_tasks == 0 {
        return Err(CliError::Usage(
            "need at least one task kind and one training task".into(),
        ));
    }
    let demos = build_demos(&cfg.kinds, 0..cfg.train_tasks, cfg.layout)?;
    println!("{} demonstrations", demos.len());
    let (trained, curve) = train_posedit::<T>(&cfg.model, &demos, &cfg.train, cfg.seed, |p| {
        println!("step {} rf_loss {:.5}", p.step, p.rf_loss)
    })?;
    write_rows(&cfg.out_dir, "posedit_loss.csv", &curve)?;
    let path = cfg.out_dir.join("posedit.nta");
    let arch = PoseArch {
        model: cfg.model.clone(),
        layout: cfg.layout,
    };
    checkpoint::save(
        &path,
        &trained.params,
        ArtifactKind::Posedit,
        arch,
        cfg.seed,
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

fn mean_evals(r: &BenchReport) -> f64 {
    let (s, n) = r
        .kinds
        .iter()
        .flat_map(|k| &k.episodes)
        .fold((0usize, 0usize), |(s, n), e| (s + e.network_evals, n + 1));
    s as f64 / n as f64
}

fn mean_wall(r: &BenchReport) -> f64 {
    r.kinds.iter().map(|k| k.mean_wall_ms()).sum::<f64>() / r.kinds.len() as f64
}

fn write_bench(out: &Path, r: &BenchReport, infer_steps: usize) -> CliResult<()> {
    let header: Vec<String> = [
        "task",
        "success_rate",
        "n_episodes",
        "infer_steps",
        "network_evals_per_episode",
        "wall_ms_per_episode",
    ]
    .map(String::from)
    .to_vec();
    let mut rows: Vec<Vec<String>> = r
        .kinds
        .iter()
        .map(|k| {
            let evals = k.evals_per_episode();
            vec![
                k.kind.name().to_string(),
                num(k.success_rate),
                k.n_episodes.to_string(),
                infer_steps.to_string(),
                num(evals.iter().sum::<usize>() as f64 / evals.len() as f64),
                num(k.mean_wall_ms()),
            ]
        })
        .collect();
    rows.push(vec![
        "avg".into(),
        num(r.average()),
        r.kinds
            .iter()
            .map(|k| k.n_episodes)
            .sum::<usize>()
            .to_string(),
        infer_steps.to_string(),
        num(mean_evals(r)),
        num(mean_wall(r)),
    ]);
    write_table(out, "bench.csv", &header, &rows)?;

    let header: Vec<String> = [
        "task",
        "episode_seed",
        "success",
        "violation",
        "network_evals",
        "clamped",
        "wall_ms",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = r
        .kinds
        .iter()
        .flat_map(|k| &k.episodes)
        .map(|e| {
            vec![
                e.kind.name().to_string(),
                e.episode_seed.to_string(),
                e.result.success.to_string(),
                e.result
                    .violation
                    .map(|v| v.name())
                    .unwrap_or("")
                    .to_string(),
                e.network_evals.to_string(),
                e.clamped.to_string(),
                num(e.wall_ms),
            ]
        })
        .collect();
    write_table(out, "episodes.csv", &header, &rows)
}

fn print_bench(label: &str, r: &BenchReport) {
    let cells: Vec<String> = r
        .kinds
        .iter()
        .map(|k| format!("{} {:.2}", k.kind.name(), k.success_rate))
        .collect();
    println!(
        "{label}: {} avg {:.2} | {:.1} evals, {:.2} ms per episode",
        cells.join(" "),
        r.average(),
        mean_evals(r),
        mean_wall(r)
    );
}

pub fn eval_bench<T: Real>(cfg: &EvalBenchRun) -> CliResult<()> {
    if cfg.infer_steps == 0 {
        return Err(CliError::Usage("infer_steps must be positive".into()));
    }
    if cfg.model == "oracle" {
        let r = run_bench(&OraclePolicy, cfg.n_episodes, cfg.seed, &cfg.tolerances)?;
        print_bench("oracle", &r);
        return write_bench(&cfg.out_dir, &r, 0);
    }

    let (trained, side) = checkpoint::load_posedit::<T>(Path::new(&cfg.model))?;
    let policy = |n_steps| PoseDiTPolicy {
        model: &trained,
        layout: side.config.layout,
        n_steps,
    };
    let r = run_bench(
        &policy(cfg.infer_steps),
        cfg.n_episodes,
        cfg.seed,
        &cfg.tolerances,
    )?;
    print_bench(&format!("{} steps", cfg.infer_steps), &r);
    write_bench(&cfg.out_dir, &r, cfg.infer_steps)?;

    if let Some(ref_steps) = cfg.reference_steps {
        let reference = run_bench(
            &policy(ref_steps),
            cfg.n_episodes,
            cfg.seed,
            &cfg.tolerances,
        )?;
        print_bench(&format!("{ref_steps} steps"), &reference);
        let speedup = mean_wall(&reference) / mean_wall(&r);
        println!("wall-clock speedup {speedup:.1}x");
        let header: Vec<String> = [
            "infer_steps",
            "reference_steps",
            "evals_per_episode",
            "reference_evals_per_episode",
            "success_rate",
            "reference_success_rate",
            "wall_ms_per_episode",
            "wall_ms_reference",
            "wall_speedup",
        ]
        .map(String::from)
        .to_vec();
        let row = vec![
            cfg.infer_steps.to_string(),
            ref_steps.to_string(),
            num(mean_evals(&r)),
            num(mean_evals(&reference)),
            num(r.average()),
            num(reference.average()),
            num(mean_wall(&r)),
            num(mean_wall(&reference)),
            num(speedup),
        ];
        write_table(&cfg.out_dir, "speedup.csv", &header, &[row])?;
    }
    Ok(())
}
