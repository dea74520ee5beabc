//! Ellipsoidal parameter sets built from trajectory data.
//!
//! Every set here has the form
//!
//! ```text
//! { θ : (θ − θ̂)·S·(θ − θ̂)ᵀ ⪯ R }
//! ```
//!
//! with `θ̂ = X·Z†` the least-squares estimate. For the stochastic set,
//! `S = (1/N)·Z·Zᵀ` and `R = ε(N, κ)²·I − (1/N)·Ê·Êᵀ` where `Ê = X − θ̂·Z`
//! is the least-squares residual. This is the set of all `θ` for which
//! `W = X − θ·Z` passes the noise bound `(1/N)·W·Wᵀ ⪯ ε²·I`.
//!
//! The same set in quadratic-matrix-inequality form is
//! `[θᵀ; I]ᵀ·Φ·[θᵀ; I] ⪰ 0`, see [`QmiBlocks`].

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmeError};
use crate::noise::epsilon;
use crate::numerics::{
    chi2_quantile, ellipsoid_volume, is_psd, kernel_basis, max_eigenvalue, min_eigenvalue,
    pseudoinverse, symmetric_eigenvalues, symmetrize,
};
use crate::systems::{check_pe, PeReport, TrajectoryData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SetKind {
    /// Sets derived from the sample-covariance bound on the noise.
    StochasticSme,
    /// Baseline that bounds `W·Z†` instead of `W`; does not shrink with `N`.
    NoiseFiltered,
    /// Baseline from the χ² confidence region of the least-squares estimate.
    Chi2,
}

impl SetKind {
    pub const ALL: [SetKind; 3] = [
        SetKind::StochasticSme,
        SetKind::NoiseFiltered,
        SetKind::Chi2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SetKind::StochasticSme => "stochastic-sme",
            SetKind::NoiseFiltered => "noise-filtered",
            SetKind::Chi2 => "chi2",
        }
    }
}

impl fmt::Display for SetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SetKind {
    type Err = SmeError;

    fn from_str(s: &str) -> Result<Self> {
        SetKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| SmeError::invalid("method", format!("unknown set kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSet")]
pub struct EllipsoidalParamSet {
    kind: SetKind,
    #[serde(with = "crate::serde_rows")]
    center: DMatrix<f64>,
    #[serde(with = "crate::serde_rows")]
    shape: DMatrix<f64>,
    #[serde(with = "crate::serde_rows")]
    radius: DMatrix<f64>,
    n: usize,
}

#[derive(Deserialize)]
struct RawSet {
    kind: SetKind,
    #[serde(with = "crate::serde_rows")]
    center: DMatrix<f64>,
    #[serde(with = "crate::serde_rows")]
    shape: DMatrix<f64>,
    #[serde(with = "crate::serde_rows")]
    radius: DMatrix<f64>,
    n: usize,
}

impl TryFrom<RawSet> for EllipsoidalParamSet {
    type Error = SmeError;

    fn try_from(r: RawSet) -> Result<Self> {
        EllipsoidalParamSet::new(r.kind, r.center, r.shape, r.radius, r.n)
    }
}

fn check_symmetric(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !m.is_square() {
        return Err(SmeError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if (m - m.transpose()).amax() > 1e-10 * m.amax().max(1.0) {
        return Err(SmeError::invalid(name, "must be symmetric"));
    }
    Ok(())
}

impl EllipsoidalParamSet {
    /// Validates dimensions and symmetry; `shape` and `radius` are stored symmetrized.
    pub fn new(
        kind: SetKind,
        center: DMatrix<f64>,
        shape: DMatrix<f64>,
        radius: DMatrix<f64>,
        n: usize,
    ) -> Result<Self> {
        check_symmetric(&shape, "shape")?;
        check_symmetric(&radius, "radius")?;
        if center.nrows() != radius.nrows() || center.ncols() != shape.nrows() {
            return Err(SmeError::DimensionMismatch(format!(
                "center {}x{}, shape {}x{}, radius {}x{}",
                center.nrows(),
                center.ncols(),
                shape.nrows(),
                shape.ncols(),
                radius.nrows(),
                radius.ncols()
            )));
        }
        Ok(EllipsoidalParamSet {
            kind,
            center,
            shape: symmetrize(&shape),
            radius: symmetrize(&radius),
            n,
        })
    }

    pub fn kind(&self) -> SetKind {
        self.kind
    }

    pub fn center(&self) -> &DMatrix<f64> {
        &self.center
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    pub fn radius(&self) -> &DMatrix<f64> {
        &self.radius
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_x(&self) -> usize {
        self.center.nrows()
    }

    pub fn n_z(&self) -> usize {
        self.center.ncols()
    }

    /// `1e-9 · (1 + |λ|_max(R))`.
    pub fn default_tol(&self) -> f64 {
        let spectral = symmetric_eigenvalues(&self.radius)
            .map(|e| e.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .unwrap_or(0.0);
        1e-9 * (1.0 + spectral)
    }

    /// `R − (θ − θ̂)·S·(θ − θ̂)ᵀ ⪰ −tol·I`.
    pub fn is_member(&self, theta: &DMatrix<f64>, tol: f64) -> Result<bool> {
        if theta.shape() != self.center.shape() {
            return Err(SmeError::DimensionMismatch(format!(
                "θ is {}x{}, set parameters are {}x{}",
                theta.nrows(),
                theta.ncols(),
                self.n_x(),
                self.n_z()
            )));
        }
        let d = theta - &self.center;
        is_psd(&(&self.radius - &d * &self.shape * d.transpose()), tol)
    }

    pub fn contains(&self, theta: &DMatrix<f64>) -> Result<bool> {
        self.is_member(theta, self.default_tol())
    }

    /// No `θ` satisfies the inequality: the radius matrix is not PSD.
    pub fn is_empty(&self, tol: f64) -> bool {
        !is_psd(&self.radius, tol).expect("radius is square")
    }

    pub fn is_empty_default(&self) -> bool {
        self.is_empty(self.default_tol())
    }

    /// `sup ‖θ − θ̂‖² = λ_max(R) / λ_min(S)`; exact for scalar outputs, an upper bound otherwise.
    pub fn radius_sq(&self) -> Result<f64> {
        if self.is_empty_default() {
            return Err(SmeError::EmptySet);
        }
        let s_min = min_eigenvalue(&self.shape)?;
        if s_min <= 0.0 {
            return Err(SmeError::NotPositiveDefinite);
        }
        Ok(max_eigenvalue(&self.radius)?.max(0.0) / s_min)
    }

    /// Volume of `{v : v·S·vᵀ ≤ r}` for scalar outputs; `0` for an empty set.
    pub fn volume(&self) -> Result<f64> {
        if self.n_x() != 1 {
            return Err(SmeError::invalid(
                "n_x",
                format!("volume needs a vector parameter, got n_x = {}", self.n_x()),
            ));
        }
        if self.is_empty_default() {
            return Ok(0.0);
        }
        ellipsoid_volume(&self.shape, self.radius[(0, 0)])
    }

    pub fn qmi_blocks(&self) -> QmiBlocks {
        let sc = &self.shape * self.center.transpose();
        QmiBlocks {
            phi11: -&self.shape,
            phi22: &self.radius - &self.center * &sc,
            phi12: sc,
        }
    }
}

/// Blocks of a symmetric `Φ` defining `{θ : [θᵀ; I]ᵀ·Φ·[θᵀ; I] ⪰ 0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct QmiBlocks {
    /// `n_z × n_z`, negative semidefinite.
    pub phi11: DMatrix<f64>,
    /// `n_z × n_x`.
    pub phi12: DMatrix<f64>,
    /// `n_x × n_x`.
    pub phi22: DMatrix<f64>,
}

impl QmiBlocks {
    /// Direct expansion of the noise inequality with `W = X − θ·Z`:
    /// `Φ11 = −(1/N)·Z·Zᵀ`, `Φ12 = (1/N)·Z·Xᵀ`, `Φ22 = ε²·I − (1/N)·X·Xᵀ`.
    pub fn from_data(data: &TrajectoryData, kappa: f64) -> Result<Self> {
        check_kappa(kappa)?;
        let n = data.len() as f64;
        let eps = epsilon(data.len(), kappa);
        let (x, z) = (data.x(), data.z());
        Ok(QmiBlocks {
            phi11: -(z * z.transpose()) / n,
            phi12: z * x.transpose() / n,
            phi22: DMatrix::identity(data.n_x(), data.n_x()) * (eps * eps) - x * x.transpose() / n,
        })
    }

    pub fn assemble(&self) -> DMatrix<f64> {
        let (nz, nx) = self.phi12.shape();
        let mut phi = DMatrix::zeros(nz + nx, nz + nx);
        phi.view_mut((0, 0), (nz, nz)).copy_from(&self.phi11);
        phi.view_mut((0, nz), (nz, nx)).copy_from(&self.phi12);
        phi.view_mut((nz, 0), (nx, nz))
            .copy_from(&self.phi12.transpose());
        phi.view_mut((nz, nz), (nx, nx)).copy_from(&self.phi22);
        phi
    }

    /// `[θᵀ; I]ᵀ·Φ·[θᵀ; I]`.
    pub fn evaluate(&self, theta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if theta.nrows() != self.phi22.nrows() || theta.ncols() != self.phi11.nrows() {
            return Err(SmeError::DimensionMismatch(format!(
                "θ is {}x{}, QMI expects {}x{}",
                theta.nrows(),
                theta.ncols(),
                self.phi22.nrows(),
                self.phi11.nrows()
            )));
        }
        let cross = theta * &self.phi12;
        Ok(theta * &self.phi11 * theta.transpose() + &cross + cross.transpose() + &self.phi22)
    }

    pub fn is_member(&self, theta: &DMatrix<f64>, tol: f64) -> Result<bool> {
        is_psd(&self.evaluate(theta)?, tol)
    }
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa >= 0.0 && kappa.is_finite() {
        Ok(())
    } else {
        Err(SmeError::invalid(
            "kappa",
            format!("{kappa} must be nonnegative"),
        ))
    }
}

/// Least-squares fit with the Gram matrices every set constructor needs.
#[derive(Debug, Clone)]
pub struct OlsFit {
    center: DMatrix<f64>,
    /// `Z·Zᵀ`
    regressor_gram: DMatrix<f64>,
    /// `Ê·Êᵀ`
    residual_gram: DMatrix<f64>,
    /// `Z†ᵀ·Z†`
    pinv_gram: DMatrix<f64>,
    n: usize,
    pe: PeReport,
}

impl OlsFit {
    pub fn new(data: &TrajectoryData) -> Result<Self> {
        let pe = check_pe(data.z())?;
        if !pe.is_pe {
            return Err(SmeError::NotPersistentlyExciting { c3_hat: pe.c3_hat });
        }
        let (x, z) = (data.x(), data.z());
        let pinv = pseudoinverse(z).matrix;
        let center = x * &pinv;
        let residual = x - &center * z;
        Ok(OlsFit {
            regressor_gram: symmetrize(&(z * z.transpose())),
            residual_gram: symmetrize(&(&residual * residual.transpose())),
            pinv_gram: symmetrize(&(pinv.transpose() * &pinv)),
            center,
            n: data.len(),
            pe,
        })
    }

    pub fn center(&self) -> &DMatrix<f64> {
        &self.center
    }

    pub fn pe(&self) -> PeReport {
        self.pe
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `(1/N)·Ê·Êᵀ`.
    pub fn residual_covariance(&self) -> DMatrix<f64> {
        &self.residual_gram / self.n as f64
    }

    pub fn stochastic_set(&self, kappa: f64) -> Result<EllipsoidalParamSet> {
        check_kappa(kappa)?;
        let n = self.n as f64;
        let eps = epsilon(self.n, kappa);
        let n_x = self.center.nrows();
        EllipsoidalParamSet::new(
            SetKind::StochasticSme,
            self.center.clone(),
            &self.regressor_gram / n,
            DMatrix::identity(n_x, n_x) * (eps * eps) - &self.residual_gram / n,
            self.n,
        )
    }

    /// `(1/N)·vᵀv ⪯ ε²·Z†ᵀZ†` with `v = θ − θ̂`, stored as `v·(N ε² Z†ᵀZ†)⁻¹·vᵀ ≤ 1`.
    pub fn noise_filtered_set(&self, kappa: f64) -> Result<EllipsoidalParamSet> {
        check_kappa(kappa)?;
        if self.center.nrows() != 1 {
            return Err(SmeError::invalid(
                "n_x",
                format!(
                    "noise-filtered set needs n_x = 1, got {}",
                    self.center.nrows()
                ),
            ));
        }
        let eps = epsilon(self.n, kappa);
        let bound = &self.pinv_gram * (self.n as f64 * eps * eps);
        let shape = bound
            .cholesky()
            .ok_or(SmeError::NotPositiveDefinite)?
            .inverse();
        EllipsoidalParamSet::new(
            SetKind::NoiseFiltered,
            self.center.clone(),
            symmetrize(&shape),
            DMatrix::identity(1, 1),
            self.n,
        )
    }

    /// `(θ − θ̂)·Z·Zᵀ·(θ − θ̂)ᵀ ⪯ c_δ·I` with `c_δ` the χ²(dof) quantile at `1 − δ`.
    pub fn chi2_set(&self, delta: f64, dof: u32) -> Result<EllipsoidalParamSet> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(SmeError::invalid("delta", format!("{delta} not in (0, 1)")));
        }
        let c = chi2_quantile(1.0 - delta, dof)?;
        let n_x = self.center.nrows();
        EllipsoidalParamSet::new(
            SetKind::Chi2,
            self.center.clone(),
            self.regressor_gram.clone(),
            DMatrix::identity(n_x, n_x) * c,
            self.n,
        )
    }
}

/// `X·Z†`; fails when `Z` is not persistently exciting.
pub fn ols_estimate(data: &TrajectoryData) -> Result<DMatrix<f64>> {
    Ok(OlsFit::new(data)?.center)
}

pub fn build_stochastic_set(data: &TrajectoryData, kappa: f64) -> Result<EllipsoidalParamSet> {
    OlsFit::new(data)?.stochastic_set(kappa)
}

pub fn build_noise_filtered_set(data: &TrajectoryData, kappa: f64) -> Result<EllipsoidalParamSet> {
    OlsFit::new(data)?.noise_filtered_set(kappa)
}

pub fn build_chi2_set(data: &TrajectoryData, delta: f64, dof: u32) -> Result<EllipsoidalParamSet> {
    OlsFit::new(data)?.chi2_set(delta, dof)
}

/// The stochastic set built literally from an orthonormal kernel basis `Z⊥`
/// of `Z`: `R = ε²·I − (1/N)·θ₀·Z⊥·Z⊥ᵀ·θ₀ᵀ` with `θ₀ = X·Z⊥ᵀ`.
///
/// Needs `O(N²)` memory. It exists to cross-check [`build_stochastic_set`],
/// which gets the same radius from the least-squares residual.
pub fn lemma1_oracle_set(data: &TrajectoryData, kappa: f64) -> Result<EllipsoidalParamSet> {
    check_kappa(kappa)?;
    let pe = check_pe(data.z())?;
    if !pe.is_pe {
        return Err(SmeError::NotPersistentlyExciting { c3_hat: pe.c3_hat });
    }
    let (x, z) = (data.x(), data.z());
    let n = data.len() as f64;
    let eps = epsilon(data.len(), kappa);
    let n_x = data.n_x();

    let perp = kernel_basis(z)?.basis;
    let mut radius = DMatrix::identity(n_x, n_x) * (eps * eps);
    if perp.nrows() > 0 {
        let theta0 = x * perp.transpose();
        radius -= &theta0 * (&perp * perp.transpose()) * theta0.transpose() / n;
    }
    EllipsoidalParamSet::new(
        SetKind::StochasticSme,
        x * pseudoinverse(z).matrix,
        z * z.transpose() / n,
        radius,
        data.len(),
    )
}
