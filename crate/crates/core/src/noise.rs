//! Sub-Gaussian noise models and the singular-value concentration bound.
//!
//! The stacked noise matrix `W ∈ ℝ^{n_x × N}` of isotropic sub-Gaussian
//! columns satisfies, with probability at least `1 − δ`,
//!
//! ```text
//! σ_max(Wᵀ) ≤ √N + κ_δ,    κ_δ = c1·√n_x + √(ln(2/δ) / c2)
//! ```
//!
//! which is the same as `(1/N)·W·Wᵀ ⪯ ε(N, κ_δ)²·I` with `ε = 1 + κ_δ/√N`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmeError};
use crate::numerics::singular_values;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    Gaussian,
    /// Symmetric ±1 entries.
    Rademacher,
    /// Uniform on `[−√3, √3]` per coordinate.
    UniformBounded,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    /// `σ²·I` stored as the standard deviation `σ`.
    Isotropic {
        sigma: f64,
    },
    Full(DMatrix<f64>),
}

/// A zero-mean noise distribution `w = Σ^{1/2} ξ` with `ξ` isotropic.
///
/// `c1`/`c2` are the concentration constants of the isotropic part. They are
/// only known in closed form for the Gaussian family (`c1 = 1`, `c2 = 1/2`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NoiseModelFields", into = "NoiseModelFields")]
pub struct NoiseModel {
    family: NoiseFamily,
    covariance: Covariance,
    c1: Option<f64>,
    c2: Option<f64>,
}

/// On-disk form of a [`NoiseModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct NoiseModelFields {
    family: NoiseFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    covariance: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    c1: Option<f64>,
    #[serde(default)]
    c2: Option<f64>,
}

impl TryFrom<NoiseModelFields> for NoiseModel {
    type Error = SmeError;

    fn try_from(fields: NoiseModelFields) -> Result<Self> {
        let covariance = match (fields.sigma, fields.covariance) {
            (Some(sigma), None) => Covariance::Isotropic { sigma },
            (None, Some(rows)) => Covariance::Full(
                crate::serde_rows::from_rows(&rows)
                    .map_err(|e| SmeError::invalid("covariance", e))?,
            ),
            (None, None) => Covariance::Isotropic { sigma: 1.0 },
            (Some(_), Some(_)) => {
                return Err(SmeError::invalid(
                    "covariance",
                    "give either `sigma` or `covariance`, not both",
                ))
            }
        };
        let (c1, c2) = match (fields.family, fields.c1, fields.c2) {
            (NoiseFamily::Gaussian, None, None) => (Some(1.0), Some(0.5)),
            (_, c1, c2) => (c1, c2),
        };
        let model = NoiseModel {
            family: fields.family,
            covariance,
            c1,
            c2,
        };
        model.validate()?;
        Ok(model)
    }
}

impl From<NoiseModel> for NoiseModelFields {
    fn from(m: NoiseModel) -> Self {
        let (sigma, covariance) = match m.covariance {
            Covariance::Isotropic { sigma } => (Some(sigma), None),
            Covariance::Full(c) => (None, Some(crate::serde_rows::to_rows(&c))),
        };
        NoiseModelFields {
            family: m.family,
            sigma,
            covariance,
            c1: m.c1,
            c2: m.c2,
        }
    }
}

impl NoiseModel {
    /// Gaussian noise `N(0, σ²·I)` with the closed-form constants.
    pub fn gaussian(sigma: f64) -> Result<Self> {
        Self::new(
            NoiseFamily::Gaussian,
            Covariance::Isotropic { sigma },
            Some(1.0),
            Some(0.5),
        )
    }

    pub fn rademacher(sigma: f64) -> Result<Self> {
        Self::new(
            NoiseFamily::Rademacher,
            Covariance::Isotropic { sigma },
            None,
            None,
        )
    }

    pub fn uniform_bounded(sigma: f64) -> Result<Self> {
        Self::new(
            NoiseFamily::UniformBounded,
            Covariance::Isotropic { sigma },
            None,
            None,
        )
    }

    pub fn new(
        family: NoiseFamily,
        covariance: Covariance,
        c1: Option<f64>,
        c2: Option<f64>,
    ) -> Result<Self> {
        let model = NoiseModel {
            family,
            covariance,
            c1,
            c2,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        match &self.covariance {
            Covariance::Isotropic { sigma } => {
                if !(sigma.is_finite() && *sigma > 0.0) {
                    return Err(SmeError::invalid(
                        "sigma",
                        format!("{sigma} must be positive"),
                    ));
                }
            }
            Covariance::Full(c) => {
                if !c.is_square() || c.nrows() == 0 {
                    return Err(SmeError::invalid(
                        "covariance",
                        "must be a nonempty square matrix",
                    ));
                }
                if (c - c.transpose()).amax() > 1e-10 * c.amax().max(1.0) {
                    return Err(SmeError::invalid("covariance", "must be symmetric"));
                }
                if c.clone().cholesky().is_none() {
                    return Err(SmeError::invalid("covariance", "must be positive definite"));
                }
            }
        }
        for (name, c) in [("c1", self.c1), ("c2", self.c2)] {
            if let Some(c) = c {
                if !(c.is_finite() && c > 0.0) {
                    return Err(SmeError::invalid(name, format!("{c} must be positive")));
                }
            }
        }
        Ok(())
    }

    pub fn family(&self) -> NoiseFamily {
        self.family
    }

    pub fn covariance(&self) -> &Covariance {
        &self.covariance
    }

    /// `(c1, c2)` if both are known.
    pub fn constants(&self) -> Option<(f64, f64)> {
        self.c1.zip(self.c2)
    }

    /// Analytic `κ_δ` for this model, or [`SmeError::UnknownConstants`].
    pub fn kappa(&self, delta: f64, n_x: usize) -> Result<f64> {
        let (c1, c2) = self.constants().ok_or(SmeError::UnknownConstants)?;
        kappa_delta(delta, n_x, c1, c2)
    }

    /// Lower-triangular `L` with `L·Lᵀ = Σ_w`.
    fn sqrt_factor(&self, n_x: usize) -> Result<DMatrix<f64>> {
        match &self.covariance {
            Covariance::Isotropic { sigma } => Ok(DMatrix::identity(n_x, n_x) * *sigma),
            Covariance::Full(c) => {
                if c.nrows() != n_x {
                    return Err(SmeError::DimensionMismatch(format!(
                        "covariance is {}x{}, state dimension is {n_x}",
                        c.nrows(),
                        c.ncols()
                    )));
                }
                Ok(c.clone()
                    .cholesky()
                    .ok_or(SmeError::NotPositiveDefinite)?
                    .unpack())
            }
        }
    }

    fn draw_isotropic<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.family {
            NoiseFamily::Gaussian => rng.sample(StandardNormal),
            NoiseFamily::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            NoiseFamily::UniformBounded => {
                let bound = 3f64.sqrt();
                rng.random_range(-bound..=bound)
            }
        }
    }
}

/// ChaCha stream `stream` under the master seed; trial `i` uses stream `i`.
pub fn stream_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// `n_x × n` matrix of i.i.d. columns drawn from `model`, reproducible from `seed`.
pub fn sample_noise(model: &NoiseModel, n_x: usize, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    sample_noise_with(model, n_x, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_noise_with<R: Rng + ?Sized>(
    model: &NoiseModel,
    n_x: usize,
    n: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if n_x == 0 || n == 0 {
        return Err(SmeError::invalid("n", "noise dimensions must be positive"));
    }
    let factor = model.sqrt_factor(n_x)?;
    let mut xi = DMatrix::zeros(n_x, n);
    // time-major draw order: column t is w_t
    for j in 0..n {
        for i in 0..n_x {
            xi[(i, j)] = model.draw_isotropic(rng);
        }
    }
    Ok(match &model.covariance {
        Covariance::Isotropic { sigma } => xi * *sigma,
        Covariance::Full(_) => factor * xi,
    })
}

/// `c1·√n_x + √(ln(2/δ) / c2)`.
pub fn kappa_delta(delta: f64, n_x: usize, c1: f64, c2: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(SmeError::invalid("delta", format!("{delta} not in (0, 1)")));
    }
    if n_x == 0 {
        return Err(SmeError::invalid("n_x", "must be at least 1"));
    }
    if !(c1 > 0.0 && c1.is_finite()) {
        return Err(SmeError::invalid("c1", format!("{c1} must be positive")));
    }
    if !(c2 > 0.0 && c2.is_finite()) {
        return Err(SmeError::invalid("c2", format!("{c2} must be positive")));
    }
    Ok(c1 * (n_x as f64).sqrt() + ((2.0 / delta).ln() / c2).sqrt())
}

/// `1 + κ/√N`.
pub fn epsilon(n: usize, kappa: f64) -> f64 {
    1.0 + kappa / (n as f64).sqrt()
}

/// Bundled bound parameters for one `(δ, N)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseBoundParams {
    pub delta: f64,
    pub kappa: f64,
    pub n: usize,
    pub epsilon: f64,
    /// `κ/√N`; equals `c1·√(n_x/N) + √(ln(2/δ)/(c2·N))` for analytic `κ`.
    pub eta: f64,
}

impl NoiseBoundParams {
    pub fn analytic(delta: f64, n_x: usize, n: usize, c1: f64, c2: f64) -> Result<Self> {
        Self::from_kappa(delta, kappa_delta(delta, n_x, c1, c2)?, n)
    }

    pub fn from_kappa(delta: f64, kappa: f64, n: usize) -> Result<Self> {
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(SmeError::invalid(
                "kappa",
                format!("{kappa} must be nonnegative"),
            ));
        }
        if n == 0 {
            return Err(SmeError::invalid("n", "must be at least 1"));
        }
        Ok(NoiseBoundParams {
            delta,
            kappa,
            n,
            epsilon: epsilon(n, kappa),
            eta: kappa / (n as f64).sqrt(),
        })
    }
}

/// Empirical `(1 − δ)`-quantile of `σ_max(Wᵀ) − √N` over fresh draws of `W`.
///
/// Trial `i` draws from [`stream_rng`]`(seed, i)`. The quantile takes the
/// `⌈(1 − δ)·trials⌉`-th order statistic.
pub fn calibrate_kappa(
    model: &NoiseModel,
    n_x: usize,
    n: usize,
    delta: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials < 100 {
        return Err(SmeError::invalid("trials", format!("{trials} < 100")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(SmeError::invalid("delta", format!("{delta} not in (0, 1)")));
    }
    let root_n = (n as f64).sqrt();
    let mut excess = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let w = sample_noise_with(model, n_x, n, &mut stream_rng(seed, i))?;
            Ok(singular_values(&w)[0] - root_n)
        })
        .collect::<Result<Vec<f64>>>()?;
    excess.sort_by(f64::total_cmp);
    let rank = ((1.0 - delta) * trials as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(excess[rank.min(trials) - 1])
}

/// Outcome of checking a noise realization against the concentration bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CovarianceBoundReport {
    pub sigma_max: f64,
    pub sigma_min: f64,
    /// `σ_max ≤ √N + κ`.
    pub upper_ok: bool,
    /// `σ_min ≥ √N − κ`.
    pub lower_ok: bool,
    /// Spectral norm of `(1/N)·W·Wᵀ − I`.
    pub gram_deviation: f64,
    /// `gram_deviation ≤ max(η, η²)` with `η = κ/√N`.
    pub gram_ok: bool,
}

pub fn verify_covariance_bounds(w: &DMatrix<f64>, kappa: f64) -> CovarianceBoundReport {
    let (n_x, n) = w.shape();
    let root_n = (n as f64).sqrt();
    let sv = singular_values(&w.transpose());
    let sigma_max = sv[0];
    let sigma_min = *sv.last().expect("nonempty");

    let gram = w * w.transpose() / n as f64 - DMatrix::<f64>::identity(n_x, n_x);
    let gram_deviation = SymmetricEigen::new(crate::numerics::symmetrize(&gram))
        .eigenvalues
        .amax();
    let eta = kappa / root_n;

    CovarianceBoundReport {
        sigma_max,
        sigma_min,
        upper_ok: sigma_max <= root_n + kappa,
        lower_ok: sigma_min >= root_n - kappa,
        gram_deviation,
        gram_ok: gram_deviation <= eta.max(eta * eta),
    }
}

/// `W ∈ 𝒲`: `σ_max(Wᵀ) ≤ √N·ε(N, κ)`.
pub fn in_noise_set(w: &DMatrix<f64>, kappa: f64) -> bool {
    let n = w.ncols();
    singular_values(w)[0] <= (n as f64).sqrt() * epsilon(n, kappa)
}
