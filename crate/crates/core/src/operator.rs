//! Low-rank inverse Hessian inferred from the spread of worker reports.
//!
//! Each worker `k` reports parameters `θ_k` and a gradient `∇J(θ_k)`. After
//! centering, the gradient differences `G` and parameter differences `Θ`
//! satisfy `G ≈ H Θ`. With the thin SVD `G = U Σ Vᵀ`, the operator maps the
//! leading left singular directions as `σ_k u_k ↦ Θ v_k` and acts as the
//! identity on their orthogonal complement:
//!
//! ```text
//! H⁻¹ z = z - Σ α_k u_k + Σ α_k σ_k⁻¹ Θ v_k,    α_k = z · u_k
//! ```
//!
//! Only the retained `(σ_k, u_k, Θ v_k)` triples are kept, so storage is
//! `O(j n)` and nothing of size `n × n` is ever formed.

use crate::error::{check_len, Error, Result};
use crate::linalg::{axpy, dot, matvec, thin_svd_via_gram, Matrix, Vector};

/// Rank threshold used when a configuration does not name one.
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// What one worker sends back after its local steps.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerReport {
    /// Parameters after the local steps.
    pub theta: Vector,
    /// Gradient evaluated at `theta`.
    pub grad: Vector,
}

impl WorkerReport {
    pub fn new(theta: Vector, grad: Vector) -> Result<Self> {
        check_len("WorkerReport gradient", theta.len(), grad.len())?;
        if !theta.is_finite() {
            return Err(Error::NonFinite { what: "parameters" });
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite { what: "gradient" });
        }
        Ok(WorkerReport { theta, grad })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

/// Worker reports with their means removed, stacked as columns.
#[derive(Clone, Debug)]
pub struct CenteredBatch {
    big_theta: Matrix,
    big_g: Matrix,
    theta_bar: Vector,
    g_bar: Vector,
}

impl CenteredBatch {
    /// `n × m`, column `k` is `θ_k - θ̄`.
    pub fn big_theta(&self) -> &Matrix {
        &self.big_theta
    }

    /// `n × m`, column `k` is `∇J(θ_k) - ḡ`.
    pub fn big_g(&self) -> &Matrix {
        &self.big_g
    }

    pub fn theta_bar(&self) -> &Vector {
        &self.theta_bar
    }

    pub fn g_bar(&self) -> &Vector {
        &self.g_bar
    }

    pub fn worker_count(&self) -> usize {
        self.big_g.cols()
    }

    pub fn dim(&self) -> usize {
        self.theta_bar.len()
    }
}

/// Averages the reports and stacks the deviations from the averages.
pub fn center_reports(reports: &[WorkerReport]) -> Result<CenteredBatch> {
    let first = reports.first().ok_or(Error::EmptyReports)?;
    let n = first.dim();
    for r in reports {
        check_len("center_reports parameters", n, r.theta.len())?;
        check_len("center_reports gradient", n, r.grad.len())?;
    }
    let m = reports.len();
    let inv_m = 1.0 / m as f64;

    let mut theta_bar = Vector::zeros(n);
    let mut g_bar = Vector::zeros(n);
    for r in reports {
        axpy(1.0, &r.theta, &mut theta_bar);
        axpy(1.0, &r.grad, &mut g_bar);
    }
    theta_bar.iter_mut().for_each(|v| *v *= inv_m);
    g_bar.iter_mut().for_each(|v| *v *= inv_m);

    let mut big_theta = Matrix::zeros(n, m);
    let mut big_g = Matrix::zeros(n, m);
    for (k, r) in reports.iter().enumerate() {
        deviation(&r.theta, &theta_bar, big_theta.column_mut(k));
        deviation(&r.grad, &g_bar, big_g.column_mut(k));
    }

    Ok(CenteredBatch {
        big_theta,
        big_g,
        theta_bar,
        g_bar,
    })
}

fn deviation(x: &[f64], mean: &[f64], out: &mut [f64]) {
    for ((o, a), b) in out.iter_mut().zip(x).zip(mean) {
        *o = a - b;
    }
}

/// One retained singular direction.
#[derive(Clone, Debug)]
struct Direction {
    sigma: f64,
    u: Vector,
    y: Vector,
}

/// Rank-`j` approximation of the inverse Hessian.
#[derive(Clone, Debug)]
pub struct InverseHessianOperator {
    dim: usize,
    directions: Vec<Direction>,
    sigma_full: Vector,
    lambda: f64,
}

impl InverseHessianOperator {
    /// The operator with no retained directions, i.e. the identity on `ℝⁿ`.
    pub fn identity(dim: usize) -> Self {
        InverseHessianOperator {
            dim,
            directions: Vec::new(),
            sigma_full: Vector::default(),
            lambda: f64::INFINITY,
        }
    }

    /// Number of retained directions, `j`.
    pub fn rank(&self) -> usize {
        self.directions.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// All singular values of `G`, descending.
    pub fn sigma_full(&self) -> &Vector {
        &self.sigma_full
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_full.first().copied().unwrap_or(0.0)
    }

    pub fn retained_sigma(&self, k: usize) -> f64 {
        self.directions[k].sigma
    }

    pub fn left_vector(&self, k: usize) -> &Vector {
        &self.directions[k].u
    }

    /// `y_k = Θ v_k`.
    pub fn image_vector(&self, k: usize) -> &Vector {
        &self.directions[k].y
    }

    /// Count of `f64` values held by the operator.
    pub fn stored_scalars(&self) -> usize {
        self.directions
            .iter()
            .map(|d| 1 + d.u.len() + d.y.len())
            .sum::<usize>()
            + self.sigma_full.len()
    }

    /// `H⁻¹ z`.
    pub fn apply(&self, z: &[f64]) -> Result<Vector> {
        check_len("InverseHessianOperator::apply", self.dim, z.len())?;
        let mut out = Vector::from_slice(z);
        for d in &self.directions {
            let alpha = dot(z, &d.u);
            axpy(-alpha, &d.u, &mut out);
            axpy(alpha / d.sigma, &d.y, &mut out);
        }
        Ok(out)
    }
}

/// Builds the operator from a centered batch, keeping every leading
/// direction with `σ_k ≥ λ σ_1`.
///
/// `λ > 1` always yields `j = 0`, which turns the Newton update into an
/// averaged gradient step.
pub fn build_operator(batch: &CenteredBatch, lambda: f64) -> Result<InverseHessianOperator> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let svd = thin_svd_via_gram(batch.big_g(), 0.0)?;
    let sigma_max = svd.sigma_max();
    let threshold = lambda * sigma_max;

    let mut directions = Vec::new();
    for (k, u) in svd.left_vectors.iter().enumerate() {
        let sigma = svd.sigma[k];
        if !(sigma > 0.0 && sigma >= threshold) {
            break;
        }
        let y = matvec(batch.big_theta(), svd.right_vector(k))?;
        directions.push(Direction {
            sigma,
            u: u.clone(),
            y,
        });
    }
    debug_assert!(directions.iter().all(|d| d.sigma > 0.0));

    Ok(InverseHessianOperator {
        dim: batch.dim(),
        directions,
        sigma_full: svd.sigma,
        lambda,
    })
}

/// `θ̄ - τ H⁻¹ ḡ`.
pub fn newton_update(
    op: &InverseHessianOperator,
    theta_bar: &[f64],
    g_bar: &[f64],
    tau: f64,
) -> Result<Vector> {
    check_len("newton_update", op.dim(), theta_bar.len())?;
    let step = op.apply(g_bar)?;
    let mut out = Vector::from_slice(theta_bar);
    axpy(-tau, &step, &mut out);
    Ok(out)
}

/// Caps the server step size at `1 / σ_max`.
pub fn lr_cap(tau: f64, op: &InverseHessianOperator) -> f64 {
    let sigma_max = op.sigma_max();
    if sigma_max > 0.0 {
        tau.min(1.0 / sigma_max)
    } else {
        tau
    }
}
