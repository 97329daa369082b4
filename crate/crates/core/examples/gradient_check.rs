//! Finite-difference checks of every objective, plus a corrupted gradient
//! that the check must reject.
//!
//! `cargo run --release --example gradient_check`

use distnewton::cli::grad_check;
use distnewton::config;
use std::path::Path;

fn main() -> distnewton::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in [
        "quadratic",
        "rosenbrock",
        "blobs",
        "mnist_tanh",
        "relu_divergence",
    ] {
        let cfg = config::load(&dir.join(format!("{name}.conf")))?;
        let r = grad_check(&cfg)?;
        println!(
            "{name:<16} max error {:.2e} <= {:.0e}: {:<5} ({} coordinates, {} skipped at kinks)",
            r.max_error,
            r.threshold,
            r.passed(),
            r.checked,
            r.skipped
        );
    }

    let mut broken = config::load(&dir.join("quadratic.conf"))?;
    broken.grad_check.corrupt = true;
    let r = grad_check(&broken)?;
    println!(
        "corrupted        max error {:.2e}: passed = {}, worst coordinate {} at point {}",
        r.max_error,
        r.passed(),
        r.worst_coord,
        r.worst_point
    );
    Ok(())
}
