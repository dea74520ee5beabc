//! Dense linear-algebra and special-function primitives.
//!
//! Rank decisions use the singular-value cutoff
//! `max(rows, cols) · ε_machine · σ_max`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen, QR, SVD};
use statrs::function::gamma::{checked_gamma_lr, ln_gamma};

use crate::error::{Result, SmeError};

/// Moore–Penrose pseudoinverse together with the numerical rank used to form it.
#[derive(Debug, Clone)]
pub struct Pseudoinverse {
    pub matrix: DMatrix<f64>,
    pub rank: usize,
}

/// Orthonormal rows spanning the right kernel of a source matrix.
///
/// `source · basisᵀ = 0` and `basis · basisᵀ = I`. The basis has
/// `cols − rank(source)` rows and may be empty.
#[derive(Debug, Clone)]
pub struct KernelBasis {
    pub basis: DMatrix<f64>,
}

impl KernelBasis {
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.nrows() == 0
    }
}

pub fn ensure_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(SmeError::EmptyMatrix);
    }
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SmeError::NonFinite)
    }
}

fn ensure_square(m: &DMatrix<f64>) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(SmeError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        })
    }
}

fn rank_cutoff(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

/// `(S + Sᵀ) / 2`.
pub fn symmetrize(s: &DMatrix<f64>) -> DMatrix<f64> {
    (s + s.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part of `s`, ascending.
pub fn symmetric_eigenvalues(s: &DMatrix<f64>) -> Result<Vec<f64>> {
    ensure_square(s)?;
    let mut eig: Vec<f64> = SymmetricEigen::new(symmetrize(s))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

pub fn min_eigenvalue(s: &DMatrix<f64>) -> Result<f64> {
    Ok(symmetric_eigenvalues(s)?[0])
}

pub fn max_eigenvalue(s: &DMatrix<f64>) -> Result<f64> {
    let eig = symmetric_eigenvalues(s)?;
    Ok(eig[eig.len() - 1])
}

/// True iff the smallest eigenvalue of the symmetrized matrix is `≥ −tol`.
pub fn is_psd(s: &DMatrix<f64>, tol: f64) -> Result<bool> {
    Ok(min_eigenvalue(s)? >= -tol)
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    SVD::new(m.clone(), false, false)
        .singular_values
        .iter()
        .copied()
        .collect()
}

pub fn pseudoinverse(m: &DMatrix<f64>) -> Pseudoinverse {
    let (rows, cols) = m.shape();
    let svd = SVD::new(m.clone(), true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let sigma_max = svd.singular_values.max();
    let cutoff = rank_cutoff(rows, cols, sigma_max);

    let mut pinv = DMatrix::<f64>::zeros(cols, rows);
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            rank += 1;
            pinv.ger(1.0 / s, &v_t.row(i).transpose(), &u.column(i), 1.0);
        }
    }
    Pseudoinverse { matrix: pinv, rank }
}

/// Numerical rank under the same cutoff as [`pseudoinverse`].
pub fn rank(m: &DMatrix<f64>) -> usize {
    let s = singular_values(m);
    let cutoff = rank_cutoff(m.nrows(), m.ncols(), s[0]);
    s.iter().filter(|&&v| v > cutoff && v > 0.0).count()
}

/// Orthonormal basis of `{v : M vᵀ = 0}` stored as rows.
///
/// The row space of `M` is taken from its SVD; the complement is read off the
/// full orthogonal factor of a Householder QR of that row space. Each basis
/// row is normalized so that its first nonzero entry is positive.
pub fn kernel_basis(m: &DMatrix<f64>) -> Result<KernelBasis> {
    ensure_finite(m)?;
    let (rows, cols) = m.shape();
    let svd = SVD::new(m.clone(), false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let cutoff = rank_cutoff(rows, cols, svd.singular_values.max());
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > cutoff && s > 0.0)
        .map(|(i, _)| i)
        .collect();
    let r = keep.len();
    if r == cols {
        return Ok(KernelBasis {
            basis: DMatrix::zeros(0, cols),
        });
    }

    let mut complement_t = DMatrix::<f64>::identity(cols, cols);
    if r > 0 {
        let row_space_t = DMatrix::from_fn(cols, r, |i, j| v_t[(keep[j], i)]);
        QR::new(row_space_t).q_tr_mul(&mut complement_t);
    }
    let mut basis = complement_t.rows(r, cols - r).into_owned();
    for mut row in basis.row_iter_mut() {
        let lead = row.iter().copied().find(|v| v.abs() > 1e-12).unwrap_or(0.0);
        if lead < 0.0 {
            row.neg_mut();
        }
    }
    Ok(KernelBasis { basis })
}

/// Regularized lower incomplete gamma `P(dof/2, x/2)`.
pub fn chi2_cdf(x: f64, dof: u32) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    checked_gamma_lr(0.5 * f64::from(dof), 0.5 * x).unwrap_or(f64::NAN)
}

fn chi2_pdf(x: f64, dof: u32) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let k = 0.5 * f64::from(dof);
    ((k - 1.0) * x.ln() - 0.5 * x - k * std::f64::consts::LN_2 - ln_gamma(k)).exp()
}

/// Quantile of the χ² distribution with `dof` degrees of freedom.
///
/// Safeguarded Newton iteration on the regularized incomplete gamma function;
/// steps that leave the current bracket fall back to bisection.
pub fn chi2_quantile(p: f64, dof: u32) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(SmeError::invalid("p", format!("{p} not in [0, 1)")));
    }
    if dof < 1 {
        return Err(SmeError::invalid("dof", "must be at least 1"));
    }
    if p == 0.0 {
        return Ok(0.0);
    }

    let mut lo = 0.0;
    let mut hi = f64::from(dof).max(1.0);
    while chi2_cdf(hi, dof) < p {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = chi2_cdf(x, dof) - p;
        if f.abs() <= 1e-14 {
            break;
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = chi2_pdf(x, dof);
        let newton = x - f / d;
        x = if d > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
    }
    Ok(x)
}

/// Volume of the unit ball in `n` dimensions.
pub fn unit_ball_volume(n: usize) -> f64 {
    ln_unit_ball_volume(n).exp()
}

fn ln_unit_ball_volume(n: usize) -> f64 {
    let half = 0.5 * n as f64;
    half * PI.ln() - ln_gamma(half + 1.0)
}

/// Volume of `{v ∈ ℝⁿ : v · shape · vᵀ ≤ radius}`.
pub fn ellipsoid_volume(shape: &DMatrix<f64>, radius: f64) -> Result<f64> {
    ensure_square(shape)?;
    ensure_finite(shape)?;
    let chol = symmetrize(shape)
        .cholesky()
        .ok_or(SmeError::NotPositiveDefinite)?;
    if radius <= 0.0 {
        return Ok(0.0);
    }
    let n = shape.nrows();
    let ln_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    Ok((ln_unit_ball_volume(n) + 0.5 * n as f64 * radius.ln() - 0.5 * ln_det).exp())
}
