//! Differentiable objectives with hand-derived gradients, plus the central
//! finite-difference oracle used to check them.

mod mlp;
mod quadratic;
mod rosenbrock;

pub use mlp::{Activation, Mlp, MlpSpec};
pub use quadratic::{Quadratic, QuadraticSpec};
pub use rosenbrock::{rosenbrock_value_grad, Rosenbrock};

use crate::data::Dataset;
use crate::error::{check_len, Error, Result};
use crate::linalg::Vector;

/// A view of some samples of a dataset. `indices == None` means all of them.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    dataset: &'a Dataset,
    indices: Option<&'a [usize]>,
}

impl<'a> Batch<'a> {
    pub fn full(dataset: &'a Dataset) -> Self {
        Batch {
            dataset,
            indices: None,
        }
    }

    pub fn subset(dataset: &'a Dataset, indices: &'a [usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= dataset.len()) {
            return Err(Error::InvalidArgument(format!(
                "sample index {bad} out of range for {} samples",
                dataset.len()
            )));
        }
        Ok(Batch {
            dataset,
            indices: Some(indices),
        })
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    pub fn len(&self) -> usize {
        self.indices.map_or(self.dataset.len(), <[usize]>::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample indices in batch order.
    pub fn sample_indices(&self) -> impl Iterator<Item = usize> + 'a {
        let all = self.dataset.len();
        let subset = self.indices;
        (0..subset.map_or(all, <[usize]>::len)).map(move |k| subset.map_or(k, |s| s[k]))
    }

    /// Mean of the sample vectors in the batch.
    pub(crate) fn mean_input(&self) -> Vector {
        let mut mean = Vector::zeros(self.dataset.features());
        for s in self.sample_indices() {
            crate::linalg::axpy(1.0, self.dataset.sample(s), &mut mean);
        }
        let count = self.len().max(1) as f64;
        mean.iter_mut().for_each(|v| *v /= count);
        mean
    }
}

/// A cost functional `J(θ; batch)` with an analytic gradient.
pub trait Objective: Send + Sync {
    /// Parameter count `n`.
    fn dim(&self) -> usize;

    /// Whether the value depends on the batch.
    fn is_stochastic(&self) -> bool;

    fn value(&self, theta: &[f64], batch: Option<Batch<'_>>) -> Result<f64> {
        self.value_grad(theta, batch).map(|(v, _)| v)
    }

    fn value_grad(&self, theta: &[f64], batch: Option<Batch<'_>>) -> Result<(f64, Vector)>;

    /// False when moving coordinate `coord` by `±h` crosses a point where the
    /// objective is not differentiable, which makes finite differences
    /// meaningless there.
    fn smooth_along(
        &self,
        _theta: &[f64],
        _batch: Option<Batch<'_>>,
        _coord: usize,
        _h: f64,
    ) -> Result<bool> {
        Ok(true)
    }
}

/// Central differences `(J(θ + h eᵢ) - J(θ - h eᵢ)) / 2h` for every coordinate.
pub fn finite_diff_grad(
    obj: &dyn Objective,
    theta: &[f64],
    batch: Option<Batch<'_>>,
    h: f64,
) -> Result<Vector> {
    let coords: Vec<usize> = (0..theta.len()).collect();
    finite_diff_coords(obj, theta, batch, h, &coords).map(Vector::from)
}

/// Central differences restricted to `coords`, in that order.
pub fn finite_diff_coords(
    obj: &dyn Objective,
    theta: &[f64],
    batch: Option<Batch<'_>>,
    h: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step h must be positive, got {h}"
        )));
    }
    check_len("finite_diff theta", obj.dim(), theta.len())?;
    let mut probe = theta.to_vec();
    coords
        .iter()
        .map(|&i| {
            probe[i] = theta[i] + h;
            let plus = obj.value(&probe, batch)?;
            probe[i] = theta[i] - h;
            let minus = obj.value(&probe, batch)?;
            probe[i] = theta[i];
            Ok((plus - minus) / (2.0 * h))
        })
        .collect()
}

/// Mixed relative error: relative for entries of magnitude above one,
/// absolute below.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_error: f64,
    /// Coordinate holding `max_error`.
    pub worst_coord: usize,
    pub checked: usize,
    /// Coordinates skipped because a kink lies within `±h`.
    pub skipped: usize,
}

/// Checks `coords` (all coordinates when `None`) at `theta`.
pub fn check_gradient(
    obj: &dyn Objective,
    theta: &[f64],
    batch: Option<Batch<'_>>,
    h: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheck> {
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..obj.dim()).collect();
            &all
        }
    };
    let (_, analytic) = obj.value_grad(theta, batch)?;
    let mut smooth = Vec::with_capacity(coords.len());
    for &c in coords {
        if obj.smooth_along(theta, batch, c, h)? {
            smooth.push(c);
        }
    }
    let numeric = finite_diff_coords(obj, theta, batch, h, &smooth)?;
    let mut report = GradCheck {
        max_error: 0.0,
        worst_coord: smooth.first().copied().unwrap_or(0),
        checked: smooth.len(),
        skipped: coords.len() - smooth.len(),
    };
    for (&c, &fd) in smooth.iter().zip(&numeric) {
        let err = gradient_error(analytic[c], fd);
        if err > report.max_error || err.is_nan() {
            report.max_error = err;
            report.worst_coord = c;
        }
    }
    Ok(report)
}

/// Per-sample perturbation term `mean(ξ) · (θ - θ_ref)` shared by the
/// analytic objectives. Returns the value and the gradient contribution.
pub(crate) fn linear_noise(
    theta: &[f64],
    reference: &[f64],
    batch: Option<Batch<'_>>,
) -> Result<Option<(f64, Vector)>> {
    let Some(batch) = batch else {
        return Ok(None);
    };
    check_len(
        "noise batch features",
        theta.len(),
        batch.dataset().features(),
    )?;
    let mean = batch.mean_input();
    let value = mean
        .iter()
        .zip(theta.iter().zip(reference))
        .map(|(m, (t, r))| m * (t - r))
        .sum();
    Ok(Some((value, mean)))
}
