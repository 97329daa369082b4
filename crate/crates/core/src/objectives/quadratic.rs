use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{linear_noise, Batch, Objective};
use crate::data::gaussian;
use crate::error::{check_len, Error, Result};
use crate::linalg::{axpy, dot, matvec, norm, sym_eig, Matrix, Vector};

/// Largest dimension for which a dense Hessian is allowed to exist.
pub const MAX_QUADRATIC_DIM: usize = 64;

/// `J(θ) = ½ (θ - θ*)ᵀ A (θ - θ*)` with a known SPD Hessian `A`.
#[derive(Clone, Debug)]
pub struct QuadraticSpec {
    a: Matrix,
    theta_star: Vector,
}

impl QuadraticSpec {
    pub fn new(a: Matrix, theta_star: Vector) -> Result<Self> {
        let n = theta_star.len();
        check_len("QuadraticSpec rows", n, a.rows())?;
        check_len("QuadraticSpec cols", n, a.cols())?;
        if n > MAX_QUADRATIC_DIM {
            return Err(Error::InvalidArgument(format!(
                "quadratic dimension {n} exceeds {MAX_QUADRATIC_DIM}"
            )));
        }
        let eig = sym_eig(&a)?;
        if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidArgument(
                "quadratic Hessian must be positive definite".into(),
            ));
        }
        Ok(QuadraticSpec { a, theta_star })
    }

    /// Random orthogonal eigenbasis with eigenvalues spread log-uniformly
    /// over `[1, condition]`; both ends are always present.
    pub fn generate(dim: usize, condition: f64, seed: u64) -> Result<Self> {
        if dim == 0 || !(condition >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "quadratic needs dim > 0 and condition >= 1 (got {dim}, {condition})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = random_orthogonal(dim, &mut rng);
        let log_k = condition.ln();
        let eigenvalues: Vec<f64> = (0..dim)
            .map(|i| match i {
                0 => 1.0,
                _ if i == dim - 1 => condition,
                _ => (rng.random::<f64>() * log_k).exp(),
            })
            .collect();

        let mut a = Matrix::zeros(dim, dim);
        for (k, &l) in eigenvalues.iter().enumerate() {
            let q = basis.column(k);
            for j in 0..dim {
                for i in j..dim {
                    let v = a.get(i, j) + l * q[i] * q[j];
                    a.set(i, j, v);
                    a.set(j, i, v);
                }
            }
        }
        let theta_star: Vector = (0..dim).map(|_| gaussian(&mut rng)).collect();
        QuadraticSpec::new(a, theta_star)
    }

    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    pub fn hessian(&self) -> &Matrix {
        &self.a
    }

    pub fn minimizer(&self) -> &Vector {
        &self.theta_star
    }

    /// Value and gradient `A (θ - θ*)`.
    pub fn value_grad(&self, theta: &[f64]) -> Result<(f64, Vector)> {
        check_len("quadratic theta", self.dim(), theta.len())?;
        let d: Vector = theta
            .iter()
            .zip(self.theta_star.iter())
            .map(|(t, s)| t - s)
            .collect();
        let grad = matvec(&self.a, &d)?;
        Ok((0.5 * dot(&d, &grad), grad))
    }
}

/// Modified Gram-Schmidt (applied twice) on a Gaussian matrix.
fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut q = Matrix::zeros(n, n);
    for j in 0..n {
        let mut v: Vec<f64> = (0..n).map(|_| gaussian(rng)).collect();
        for _ in 0..2 {
            for k in 0..j {
                let proj = dot(q.column(k), &v);
                axpy(-proj, q.column(k), &mut v);
            }
        }
        let len = norm(&v);
        for (dst, x) in q.column_mut(j).iter_mut().zip(&v) {
            *dst = x / len;
        }
    }
    q
}

/// Quadratic objective. When perturbed, a batch adds `mean(ξ) · (θ - θ*)`
/// where `ξ` are the batch's sample vectors; with zero-mean data the full
/// dataset leaves the quadratic unchanged.
#[derive(Clone, Debug)]
pub struct Quadratic {
    spec: QuadraticSpec,
    perturbed: bool,
}

impl Quadratic {
    pub fn new(spec: QuadraticSpec) -> Self {
        Quadratic {
            spec,
            perturbed: false,
        }
    }

    pub fn perturbed(spec: QuadraticSpec) -> Self {
        Quadratic {
            spec,
            perturbed: true,
        }
    }

    pub fn spec(&self) -> &QuadraticSpec {
        &self.spec
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn is_stochastic(&self) -> bool {
        self.perturbed
    }

    fn value_grad(&self, theta: &[f64], batch: Option<Batch<'_>>) -> Result<(f64, Vector)> {
        let (mut value, mut grad) = self.spec.value_grad(theta)?;
        if self.perturbed {
            if let Some((v, g)) = linear_noise(theta, &self.spec.theta_star, batch)? {
                value += v;
                axpy(1.0, &g, &mut grad);
            }
        }
        Ok((value, grad))
    }
}
