//! A deep ReLU net with a unit server step diverges. The run stops with a
//! flag and keeps the epochs it finished; averaging at the same local rate
//! stays finite.
//!
//! `cargo run --release --example relu_divergence`

use distnewton::cli::{run, ExitStatus};
use distnewton::config;
use distnewton::harness::{run_experiment, Aggregator, ExperimentConfig};
use std::path::Path;

fn main() -> distnewton::Result<()> {
    let preset = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/relu_divergence.conf");
    let cfg = config::load(&preset)?;
    let out = std::env::temp_dir().join("distnewton_relu_divergence");

    let outcome = run(&cfg, &out)?;
    print!("{}", outcome.summary);
    println!(
        "exit status {:?} (code {}); csv at {}",
        outcome.exit_status(),
        outcome.exit_status().code(),
        outcome.csv_path.display()
    );
    assert_eq!(outcome.exit_status(), ExitStatus::Diverged);
    print!(
        "{}",
        std::fs::read_to_string(&outcome.csv_path).expect("csv")
    );

    let baseline = run_experiment(&ExperimentConfig {
        aggregator: Aggregator::SgdAverage,
        ..cfg.experiment.clone()
    })?;
    println!(
        "sgd_average, same rates: {} with final NLL {:.4}",
        baseline.status,
        baseline.final_nll().unwrap_or(f64::NAN)
    );
    Ok(())
}
