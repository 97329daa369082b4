//! Spanning workers on a quadratic: the server step is a Newton step.
//!
//! Runs the shipped quadratic preset once with the quasi-Newton server and
//! once with plain parameter averaging.
//!
//! `cargo run --release --example quadratic_convergence`

use distnewton::config;
use distnewton::harness::{run_experiment, Aggregator, ExperimentConfig};
use std::path::Path;

fn main() -> distnewton::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quadratic.conf");
    let newton = config::load(&path)?.experiment;
    let averaging = ExperimentConfig {
        aggregator: Aggregator::SgdAverage,
        epochs: 20,
        ..newton.clone()
    };

    for cfg in [newton, averaging] {
        let h = run_experiment(&cfg)?;
        println!(
            "{} with m = {}: J0 = {:.3e}",
            cfg.aggregator, cfg.workers, h.initial_nll
        );
        for r in &h.records {
            println!(
                "  epoch {:>2}  J = {:.3e}  sigma_max = {:.3e}  j = {:.2}",
                r.epoch, r.train_nll, r.sigma_max, r.retained_j
            );
        }
    }
    Ok(())
}
