//! The low-rank inverse Hessian a server infers from worker reports.
//!
//! Workers sit at different points of a quadratic with known Hessian `A`.
//! The operator built from their centered reports acts as `A⁻¹` on the
//! directions the workers explored and as the identity elsewhere. Five
//! workers in six dimensions leave one direction unexplored; seven span the
//! space and a unit step lands on the minimizer.
//!
//! `cargo run --example inverse_hessian`

use distnewton::linalg::{matvec, Matrix, Vector};
use distnewton::objectives::QuadraticSpec;
use distnewton::operator::{build_operator, center_reports, lr_cap, newton_update, WorkerReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> distnewton::Result<()> {
    let n = 6;
    let spec = QuadraticSpec::generate(n, 50.0, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let spanning = (0..7)
        .map(|_| {
            let theta: Vector = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let (_, grad) = spec.value_grad(&theta)?;
            WorkerReport::new(theta, grad)
        })
        .collect::<distnewton::Result<Vec<_>>>()?;
    let reports = &spanning[..5];

    let batch = center_reports(reports)?;
    let op = build_operator(&batch, 1e-6)?;
    println!(
        "singular values of centered gradients: {:.4?}",
        op.sigma_full().as_slice()
    );
    println!(
        "retained rank j = {} (m - 1 = {})",
        op.rank(),
        reports.len() - 1
    );

    // Secant check: H⁻¹ (g_k - ḡ) should give θ_k - θ̄.
    for k in 0..reports.len() {
        let got = op.apply(batch.big_g().column(k))?;
        let want = batch.big_theta().column(k);
        let err: f64 = got
            .iter()
            .zip(want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        println!("worker {k}: |H^-1 g_k - theta_k| = {err:.2e}");
    }

    // Off the explored span the operator leaves vectors alone.
    let mut z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    for k in 0..op.rank() {
        let u = op.left_vector(k);
        let c: f64 = z.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
        z.iter_mut()
            .zip(u.iter())
            .for_each(|(zi, ui)| *zi -= c * ui);
    }
    let hz = op.apply(&z)?;
    let moved: f64 = hz
        .iter()
        .zip(&z)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("complement vector moved by {moved:.2e}");

    println!("lr cap for tau = 1: {:.4}", lr_cap(1.0, &op));

    let batch7 = center_reports(&spanning)?;
    let op7 = build_operator(&batch7, 1e-6)?;
    let theta = newton_update(&op7, batch7.theta_bar(), batch7.g_bar(), 1.0)?;
    let dist = |t: &[f64]| {
        t.iter()
            .zip(spec.minimizer().iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    println!(
        "7 workers, j = {}: distance to minimizer {:.4} at the mean point, {:.2e} after a unit step",
        op7.rank(),
        dist(batch7.theta_bar()),
        dist(&theta)
    );

    // Dense reference, fine at this size: A (θ_k - θ̄) reproduces g_k - ḡ.
    let a: &Matrix = spec.hessian();
    let back = matvec(a, batch.big_theta().column(0))?;
    println!("A (theta_0 - theta_bar) = {:.4?}", back.as_slice());
    println!("g_0 - g_bar             = {:.4?}", batch.big_g().column(0));
    Ok(())
}
