//! Loading MNIST, sharding it across workers and drawing round batches.
//!
//! `cargo run --example data_sharding`

use distnewton::data::{load_idx, worker_batch_sizes};
use distnewton::harness::{derive_seed, BatchSchedule};
use std::path::Path;

fn main() -> distnewton::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let ds = load_idx(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )?
    .truncated(5000);
    let mut counts = [0usize; 10];
    ds.labels().iter().for_each(|&l| counts[l] += 1);
    println!(
        "{} images of {} pixels, label counts {counts:?}",
        ds.len(),
        ds.features()
    );

    let (global_batch, local_steps) = (256, 1);
    for m in [1, 2, 4, 8] {
        let mut schedule =
            BatchSchedule::new(ds.len(), m, global_batch, local_steps, derive_seed(0, 100))?;
        let rounds = BatchSchedule::rounds_per_epoch(ds.len(), global_batch, local_steps);
        let mut consumed = 0;
        for _ in 0..rounds {
            consumed += schedule
                .next_round()
                .iter()
                .flatten()
                .map(Vec::len)
                .sum::<usize>();
        }
        println!(
            "m = {m}: shard sizes {:?}, per-worker batch {:?}, {rounds} rounds, {consumed} samples per epoch",
            schedule.plan().shard_sizes(),
            worker_batch_sizes(global_batch, m)
        );
    }
    Ok(())
}
