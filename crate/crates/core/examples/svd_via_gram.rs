//! Thin SVD of a tall matrix through its small Gram matrix.
//!
//! `cargo run --example svd_via_gram`

use distnewton::linalg::{dot, gram, sym_eig, thin_svd_via_gram, Matrix, DEFAULT_RANK_TOLERANCE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> distnewton::Result<()> {
    let (n, m) = (10_000, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut data: Vec<f64> = (0..n * m)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    // Make the last column a combination of the first two: rank 5.
    for i in 0..n {
        data[5 * n + i] = data[i] - 0.5 * data[n + i];
    }
    let g = Matrix::from_col_major(n, m, data)?;

    let svd = thin_svd_via_gram(&g, DEFAULT_RANK_TOLERANCE)?;
    let eig = sym_eig(&gram(&g))?;
    println!("k  sigma_k               sqrt(eig_k of G^T G)");
    for k in 0..m {
        println!(
            "{k}  {:<20.12e}  {:.12e}",
            svd.sigma[k],
            eig.eigenvalues[k].max(0.0).sqrt()
        );
    }
    println!("retained left vectors: {} of {m}", svd.retained());

    let mut off = 0.0f64;
    for (i, a) in svd.left_vectors.iter().enumerate() {
        for (j, b) in svd.left_vectors.iter().enumerate() {
            let want = if i == j { 1.0 } else { 0.0 };
            off = off.max((dot(a, b) - want).abs());
        }
    }
    println!("max |U^T U - I| = {off:.2e}");
    Ok(())
}
