//! Benchmark simulators, the pendulum lifting, isotropy rescaling and
//! persistency-of-excitation diagnostics.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmeError};
use crate::numerics::{ensure_finite, symmetric_eigenvalues};

/// Successor states `X = [x_1 … x_N]`, regressors `Z = [z_0 … z_{N−1}]` and,
/// when the data was simulated, the noise `W` that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryData {
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    w: Option<DMatrix<f64>>,
}

impl TrajectoryData {
    pub fn new(x: DMatrix<f64>, z: DMatrix<f64>, w: Option<DMatrix<f64>>) -> Result<Self> {
        ensure_finite(&x)?;
        ensure_finite(&z)?;
        if x.ncols() != z.ncols() {
            return Err(SmeError::DimensionMismatch(format!(
                "X has {} columns, Z has {}",
                x.ncols(),
                z.ncols()
            )));
        }
        if let Some(w) = &w {
            ensure_finite(w)?;
            if w.shape() != x.shape() {
                return Err(SmeError::DimensionMismatch(format!(
                    "W is {}x{}, X is {}x{}",
                    w.nrows(),
                    w.ncols(),
                    x.nrows(),
                    x.ncols()
                )));
            }
        }
        Ok(TrajectoryData { x, z, w })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn w(&self) -> Option<&DMatrix<f64>> {
        self.w.as_ref()
    }

    /// Number of samples `N`.
    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_x(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_z(&self) -> usize {
        self.z.nrows()
    }

    /// The first `n` samples.
    pub fn prefix(&self, n: usize) -> Result<TrajectoryData> {
        if n == 0 || n > self.len() {
            return Err(SmeError::invalid(
                "n",
                format!("prefix length {n} outside 1..={}", self.len()),
            ));
        }
        Ok(TrajectoryData {
            x: self.x.columns(0, n).into_owned(),
            z: self.z.columns(0, n).into_owned(),
            w: self.w.as_ref().map(|w| w.columns(0, n).into_owned()),
        })
    }

    /// Largest entry of `|X − θ·Z − W|`, or `None` without stored noise.
    pub fn generation_residual(&self, theta: &DMatrix<f64>) -> Option<f64> {
        let w = self.w.as_ref()?;
        Some((&self.x - theta * &self.z - w).amax())
    }
}

/// `x_{t+1} = a·x_t + b·u_t + w_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LtiParams {
    pub a: f64,
    pub b: f64,
}

impl Default for LtiParams {
    fn default() -> Self {
        LtiParams { a: 0.9, b: 1.0 }
    }
}

impl LtiParams {
    /// `θ* = (a, b)` for regressors `z_t = (x_t, u_t)`.
    pub fn theta_star(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 2, &[self.a, self.b])
    }
}

/// Discrete pendulum
///
/// ```text
/// Ψ_{t+1} = Ψ_t + Ω_t
/// Ω_{t+1} = Ω_t − (g/l)·sin Ψ_t − d·Ω_t + b·u_t + w_t
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub g_over_l: f64,
    pub d: f64,
    pub b: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            g_over_l: 0.1,
            d: 0.02,
            b: 1.0,
        }
    }
}

impl PendulumParams {
    /// `θ* = (−g/l, 1 − d, b)` for the Ω-equation with regressors from [`lift_pendulum`].
    pub fn theta_star(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 3, &[-self.g_over_l, 1.0 - self.d, self.b])
    }
}

fn check_lengths(inputs: &[f64], noise: &DMatrix<f64>) -> Result<()> {
    if noise.nrows() != 1 || noise.ncols() != inputs.len() {
        return Err(SmeError::DimensionMismatch(format!(
            "{} inputs but noise is {}x{}",
            inputs.len(),
            noise.nrows(),
            noise.ncols()
        )));
    }
    if inputs.is_empty() {
        return Err(SmeError::invalid("inputs", "need at least one sample"));
    }
    Ok(())
}

pub fn simulate_lti(
    params: LtiParams,
    inputs: &[f64],
    noise: &DMatrix<f64>,
    x0: f64,
) -> Result<TrajectoryData> {
    check_lengths(inputs, noise)?;
    let n = inputs.len();
    let mut x = DMatrix::zeros(1, n);
    let mut z = DMatrix::zeros(2, n);
    let mut state = x0;
    for (t, &u) in inputs.iter().enumerate() {
        z[(0, t)] = state;
        z[(1, t)] = u;
        state = params.a * state + params.b * u + noise[(0, t)];
        x[(0, t)] = state;
    }
    TrajectoryData::new(x, z, Some(noise.clone()))
}

/// `z = (sin ψ, ω, u)`.
pub fn lift_pendulum(psi: f64, omega: f64, u: f64) -> [f64; 3] {
    [psi.sin(), omega, u]
}

/// States `(Ψ_t, Ω_t)` for `t = 0..=N`.
pub fn pendulum_states(
    params: PendulumParams,
    inputs: &[f64],
    noise: &DMatrix<f64>,
    psi0: f64,
    omega0: f64,
) -> Result<Vec<(f64, f64)>> {
    check_lengths(inputs, noise)?;
    let theta = params.theta_star();
    let mut states = Vec::with_capacity(inputs.len() + 1);
    let (mut psi, mut omega) = (psi0, omega0);
    states.push((psi, omega));
    for (t, &u) in inputs.iter().enumerate() {
        let z = lift_pendulum(psi, omega, u);
        let next_omega = theta[0] * z[0] + theta[1] * z[1] + theta[2] * z[2] + noise[(0, t)];
        psi += omega;
        omega = next_omega;
        states.push((psi, omega));
    }
    Ok(states)
}

/// Data for the Ω-equation: `X = [Ω_1 … Ω_N]`, `Z` the lifted regressors.
///
/// The Ψ-equation is noise free and known, so it is not part of the estimate.
pub fn simulate_pendulum(
    params: PendulumParams,
    inputs: &[f64],
    noise: &DMatrix<f64>,
    psi0: f64,
    omega0: f64,
) -> Result<TrajectoryData> {
    let states = pendulum_states(params, inputs, noise, psi0, omega0)?;
    let n = inputs.len();
    let x = DMatrix::from_fn(1, n, |_, t| states[t + 1].1);
    let mut z = DMatrix::zeros(3, n);
    for (t, &u) in inputs.iter().enumerate() {
        let (psi, omega) = states[t];
        for (i, v) in lift_pendulum(psi, omega, u).into_iter().enumerate() {
            z[(i, t)] = v;
        }
    }
    TrajectoryData::new(x, z, Some(noise.clone()))
}

/// I.i.d. `N(0, σ_u²)` excitation.
pub fn gaussian_inputs<R: Rng + ?Sized>(sigma_u: f64, n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| sigma_u * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RescaleMode {
    /// `X` and `Z` divided by `σ`: `θ*` unchanged, scalar outputs only.
    Joint,
    /// `X` multiplied by `Σ_w^{−1/2} = 1/σ`: `θ*` becomes `θ*/σ`.
    LeftMultiply,
}

/// Rescales data so that the residual noise `W/σ` is isotropic.
pub fn rescale_isotropic(
    data: &TrajectoryData,
    sigma: f64,
    mode: RescaleMode,
) -> Result<TrajectoryData> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(SmeError::invalid(
            "sigma",
            format!("{sigma} must be positive"),
        ));
    }
    let s = 1.0 / sigma;
    match mode {
        RescaleMode::Joint => {
            if data.n_x() != 1 {
                return Err(SmeError::invalid(
                    "mode",
                    format!("joint rescaling needs n_x = 1, got {}", data.n_x()),
                ));
            }
            TrajectoryData::new(&data.x * s, &data.z * s, data.w.as_ref().map(|w| w * s))
        }
        RescaleMode::LeftMultiply => {
            TrajectoryData::new(&data.x * s, data.z.clone(), data.w.as_ref().map(|w| w * s))
        }
    }
}

/// Extreme eigenvalues of the regressor sample covariance `(1/N)·Z·Zᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeReport {
    pub c3_hat: f64,
    pub c4_hat: f64,
    pub is_pe: bool,
}

pub const PE_THRESHOLD: f64 = 1e-8;

pub fn check_pe(z: &DMatrix<f64>) -> Result<PeReport> {
    ensure_finite(z)?;
    let gram = z * z.transpose() / z.ncols() as f64;
    let eig = symmetric_eigenvalues(&gram)?;
    // rounding can push a zero eigenvalue slightly negative
    let c3_hat = eig[0].max(0.0);
    let c4_hat = eig[eig.len() - 1].max(c3_hat);
    Ok(PeReport {
        c3_hat,
        c4_hat,
        is_pe: c3_hat > PE_THRESHOLD,
    })
}
