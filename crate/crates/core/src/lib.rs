//! Set-membership estimation for linear-in-parameter dynamical models driven
//! by unbounded sub-Gaussian noise.
//!
//! A trajectory `X = θ* Z + W` is reduced to an ellipsoidal parameter set
//! that contains `θ*` with probability at least `1 − δ`. The bound comes from
//! a concentration inequality on the largest singular value of the stacked
//! noise matrix rather than from a per-sample bound on the noise support, so
//! Gaussian noise is handled directly.
//!
//! Modules:
//!
//! - [`numerics`]: pseudoinverse, kernel basis, PSD tests, χ² quantile, ellipsoid volume.
//! - [`noise`]: noise models, concentration constants and the `κ_δ` / `ε` machinery.
//! - [`systems`]: the LTI and pendulum benchmark simulators, lifting and rescaling.
//! - [`sme`]: OLS, the stochastic set and its QMI form, the two baseline sets.
//! - [`experiments`]: the seeded Monte Carlo harness, CSV export and summaries.

pub mod error;
pub mod experiments;
pub mod noise;
pub mod numerics;
mod serde_rows;
pub mod sme;
pub mod systems;

pub use error::{Result, SmeError};
pub use nalgebra::DMatrix;
