//! Distributed quasi-Newton aggregation.
//!
//! A parameter server collects `(θ_k, ∇J(θ_k))` from `m` workers, infers a
//! rank-`j` inverse Hessian from the centered reports through an `m × m`
//! Gram matrix, and steps `θ_new = θ̄ − τ H⁻¹ ḡ`. With `j = 0` the step is an
//! averaged gradient step.
//!
//! The pieces, bottom up:
//!
//! - [`linalg`]: dense vectors and matrices, a Jacobi eigensolver and the
//!   thin SVD through the Gram matrix.
//! - [`operator`]: centering, the inverse Hessian operator, the update and
//!   the learning-rate cap.
//! - [`objectives`]: quadratic, Rosenbrock and MLP objectives with analytic
//!   gradients, plus finite-difference checking.
//! - [`data`]: IDX loading, synthetic data and worker sharding.
//! - [`harness`]: the synchronous worker/server simulation.
//! - [`config`] and [`cli`]: run files, CSV histories, sweeps, and the
//!   `distnewton` binary's commands.
//!
//! ```
//! use distnewton::linalg::Vector;
//! use distnewton::operator::{build_operator, center_reports, newton_update, WorkerReport};
//!
//! // J(θ) = ½‖θ‖², so ∇J(θ) = θ and the Hessian is the identity.
//! let report = |t: [f64; 2]| WorkerReport::new(Vector::from_slice(&t), Vector::from_slice(&t));
//! let reports = [report([1.0, 0.0])?, report([0.0, 1.0])?, report([1.0, 1.0])?];
//! let batch = center_reports(&reports)?;
//! let op = build_operator(&batch, 1e-6)?;
//! let theta = newton_update(&op, batch.theta_bar(), batch.g_bar(), 1.0)?;
//! assert!(theta.norm() < 1e-12);
//! # Ok::<(), distnewton::Error>(())
//! ```
//!
//! Runnable examples live in `examples/`: `svd_via_gram`, `inverse_hessian`,
//! `quadratic_convergence`, `round_by_round`, `gradient_check`,
//! `data_sharding`, `mnist_sweep` and `relu_divergence`.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod objectives;
pub mod operator;

pub use error::{Error, Result};
