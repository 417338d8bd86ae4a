use posemoe_core::rectflow::train_flow_2d;
use posemoe_core::{Real, Rng};
use serde::Serialize;

use crate::checkpoint::{self, ArtifactKind};
use crate::config::TrainFlowRun;
use crate::error::CliResult;
use crate::output::{num, write_json, write_rows, write_table};

#[derive(Serialize)]
struct Summary {
    noise_floor: f64,
    energy_distance: Vec<(usize, f64)>,
}

pub fn train_flow2d<T: Real>(cfg: &TrainFlowRun) -> CliResult<()> {
    let (flow, report) = train_flow_2d::<T>(&cfg.flow, cfg.seed)?;
    for p in &report.loss_curve {
        println!("step {} rf_loss {:.5}", p.step, p.rf_loss);
    }
    write_rows(&cfg.out_dir, "flow_loss.csv", &report.loss_curve)?;
    write_rows(&cfg.out_dir, "flow_eval.csv", &report.evals)?;
    for r in &report.evals {
        println!(
            "{:>4} steps: energy distance {:.5} straightness {:.5} ({:.1} ms)",
            r.step_count, r.energy_distance, r.straightness, r.wall_ms
        );
    }
    println!("noise floor {:.5}", report.noise_floor);
    write_json(
        &cfg.out_dir,
        "summary.json",
        &Summary {
            noise_floor: report.noise_floor,
            energy_distance: report
                .evals
                .iter()
                .map(|r| (r.step_count, r.energy_distance))
                .collect(),
        },
    )?;

    if cfg.dump_samples > 0 {
        let root = Rng::new(cfg.seed).fork(50);
        for &n in &cfg.flow.eval.step_counts {
            let pts = flow.sample(&mut root.fork(n as u64), cfg.dump_samples, n)?;
            let rows: Vec<Vec<String>> =
                pts.chunks(2).map(|p| vec![num(p[0]), num(p[1])]).collect();
            write_table(
                &cfg.out_dir,
                &format!("samples_{n}.csv"),
                &["x".into(), "y".into()],
                &rows,
            )?;
        }
    }
    checkpoint::save(
        &cfg.out_dir.join("flow.nta"),
        &flow.params,
        ArtifactKind::Flow2d,
        &flow.model.config,
        cfg.seed,
    )?;
    Ok(())
}
