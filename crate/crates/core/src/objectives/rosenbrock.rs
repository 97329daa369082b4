use super::{linear_noise, Batch, Objective};
use crate::error::{Error, Result};
use crate::linalg::{axpy, Vector};

/// Sum over consecutive pairs `(x, y)` of `100 (y - x²)² + (1 - x)²`.
pub fn rosenbrock_value_grad(theta: &[f64]) -> Result<(f64, Vector)> {
    let n = theta.len();
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "rosenbrock needs an even dimension >= 2, got {n}"
        )));
    }
    let mut value = 0.0;
    let mut grad = Vector::zeros(n);
    for (pair, g) in theta.chunks_exact(2).zip(grad.chunks_exact_mut(2)) {
        let (x, y) = (pair[0], pair[1]);
        let r = y - x * x;
        value += 100.0 * r * r + (1.0 - x) * (1.0 - x);
        g[0] = -400.0 * x * r - 2.0 * (1.0 - x);
        g[1] = 200.0 * r;
    }
    Ok((value, grad))
}

/// Rosenbrock objective; a perturbed instance adds `mean(ξ) · (θ - 1)`.
#[derive(Clone, Debug)]
pub struct Rosenbrock {
    dim: usize,
    ones: Vector,
    perturbed: bool,
}

impl Rosenbrock {
    pub fn new(dim: usize) -> Result<Self> {
        rosenbrock_value_grad(&vec![1.0; dim])?;
        Ok(Rosenbrock {
            dim,
            ones: Vector::from(vec![1.0; dim]),
            perturbed: false,
        })
    }

    pub fn perturbed(dim: usize) -> Result<Self> {
        Ok(Rosenbrock {
            perturbed: true,
            ..Rosenbrock::new(dim)?
        })
    }

    /// The customary starting point `(-1.2, 1, -1.2, 1, …)`.
    pub fn standard_start(&self) -> Vector {
        (0..self.dim)
            .map(|i| if i % 2 == 0 { -1.2 } else { 1.0 })
            .collect()
    }
}

impl Objective for Rosenbrock {
    fn dim(&self) -> usize {
        self.dim
    }

    fn is_stochastic(&self) -> bool {
        self.perturbed
    }

    fn value_grad(&self, theta: &[f64], batch: Option<Batch<'_>>) -> Result<(f64, Vector)> {
        let (mut value, mut grad) = rosenbrock_value_grad(theta)?;
        if self.perturbed {
            if let Some((v, g)) = linear_noise(theta, &self.ones, batch)? {
                value += v;
                axpy(1.0, &g, &mut grad);
            }
        }
        Ok((value, grad))
    }
}
