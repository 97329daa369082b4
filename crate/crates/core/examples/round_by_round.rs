//! Driving workers and the server by hand, one synchronous round at a time,
//! and watching the same loop through an `Observer`.
//!
//! `cargo run --release --example round_by_round`

use distnewton::harness::{
    derive_seed, run_experiment_observed, server_round, worker_round, BatchSchedule, DataConfig,
    ExperimentConfig, ObjectiveConfig, Observer, RoundStats,
};
use distnewton::linalg::Vector;
use distnewton::objectives::{Activation, Batch};
use distnewton::operator::WorkerReport;

struct Print;

impl Observer for Print {
    fn round_completed(&self, round: usize, reports: &[WorkerReport], _: &Vector, s: &RoundStats) {
        if round < 3 {
            println!(
                "  observed round {round}: {} reports, sigma_max {:.4}, j = {}, tau {}",
                reports.len(),
                s.sigma_max(),
                s.retained,
                s.tau
            );
        }
    }
}

fn main() -> distnewton::Result<()> {
    let cfg = ExperimentConfig {
        objective: ObjectiveConfig::Mlp {
            layers: vec![8, 16, 4],
            activation: Activation::Tanh,
            init_scale: 1.0,
        },
        data: DataConfig::Blobs {
            features: 8,
            classes: 4,
            samples: 1024,
        },
        workers: 4,
        global_batch: 64,
        local_lr: 0.05,
        server_tau: 0.05,
        epochs: 1,
        ..Default::default()
    };
    let problem = cfg.build_problem()?;
    let ds = &problem.dataset;
    let full = Some(Batch::full(ds));

    println!("by hand:");
    let mut theta = problem.initial.clone();
    let mut schedule = BatchSchedule::new(
        ds.len(),
        cfg.workers,
        cfg.global_batch,
        cfg.local_steps,
        derive_seed(cfg.seed, 100),
    )?;
    for round in 0..BatchSchedule::rounds_per_epoch(ds.len(), cfg.global_batch, cfg.local_steps) {
        let mut reports = Vec::new();
        for draws in schedule.next_round() {
            let steps = vec![Some(Batch::subset(ds, &draws[0])?)];
            let report = Some(Batch::subset(ds, &draws[1])?);
            reports.push(worker_round(
                &theta,
                problem.objective.as_ref(),
                &steps,
                report,
                cfg.local_lr,
            )?);
        }
        let (next, stats) = server_round(&reports, &cfg.server_params())?;
        theta = next;
        if round < 3 {
            println!(
                "  round {round}: sigma_max {:.4}, j = {}",
                stats.sigma_max(),
                stats.retained
            );
        }
    }
    let by_hand = problem.objective.value(&theta, full)?;

    println!("through the harness:");
    let h = run_experiment_observed(&cfg, &Print)?;
    println!(
        "final NLL by hand {by_hand:.12}, harness {:.12}",
        h.final_nll().unwrap_or(f64::NAN)
    );
    Ok(())
}
