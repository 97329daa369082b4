//! Worker-count sweep on the MNIST subset, written as CSV files.
//!
//! `cargo run --release --example mnist_sweep -- [epochs] [out_dir]`
//!
//! Defaults to 5 epochs into `runs/mnist_sweep`. The shipped preset uses 20.

use distnewton::cli::{sweep, SWEEP_WORKERS};
use distnewton::config;
use std::path::{Path, PathBuf};

fn main() -> distnewton::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(5, |a| a.parse().expect("epochs"));
    let out = args
        .next()
        .map_or_else(|| PathBuf::from("runs/mnist_sweep"), PathBuf::from);

    let preset = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mnist_tanh.conf");
    let mut cfg = config::load(&preset)?;
    cfg.experiment.epochs = epochs;

    let outcome = sweep(&cfg, &SWEEP_WORKERS, &out)?;
    print!("{}", outcome.summary);
    println!("curves written to {}", out.display());
    Ok(())
}
