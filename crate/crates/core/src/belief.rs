//! Gaussian beliefs over the model parameter, in moment and information form.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SabreError};

/// Eigenvalue floor applied before inverting a covariance in the simulator.
pub const EIGEN_FLOOR: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-10;

/// How social beliefs carry covariance between clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceMode {
    /// Full covariance matrices are exchanged and fused.
    #[default]
    Full,
    /// Only per-coordinate variances are kept; off-diagonal entries are zero.
    Diagonal,
}

/// A Gaussian belief in moment form: mean vector and covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

/// A Gaussian belief in information form: precision matrix and
/// precision-weighted mean (`precision * mean`).
#[derive(Debug, Clone, PartialEq)]
pub struct InformationBelief {
    precision: DMatrix<f64>,
    shift: DVector<f64>,
}

impl GaussianBelief {
    /// Builds a belief, checking shapes and symmetry.
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let k = mean.len();
        if covariance.nrows() != k || covariance.ncols() != k {
            return Err(SabreError::Dimension {
                expected: k,
                found: covariance.nrows(),
            });
        }
        for r in 0..k {
            for c in (r + 1)..k {
                let diff = (covariance[(r, c)] - covariance[(c, r)]).abs();
                if diff > SYMMETRY_TOL {
                    return Err(SabreError::config(format!(
                        "covariance is not symmetric at ({r}, {c}): difference {diff:e}"
                    )));
                }
            }
        }
        Ok(Self { mean, covariance })
    }

    /// Zero mean with covariance `variance * I`.
    pub fn isotropic(dim: usize, variance: f64) -> Self {
        Self {
            mean: DVector::zeros(dim),
            covariance: DMatrix::identity(dim, dim) * variance,
        }
    }

    /// Builds a diagonal belief from per-coordinate variances.
    pub fn diagonal(mean: DVector<f64>, variances: &DVector<f64>) -> Result<Self> {
        Self::new(mean, DMatrix::from_diagonal(variances))
    }

    pub(crate) fn from_parts_unchecked(mean: DVector<f64>, covariance: DMatrix<f64>) -> Self {
        Self { mean, covariance }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn mean_mut(&mut self) -> &mut DVector<f64> {
        &mut self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn covariance_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.covariance
    }

    pub fn variances(&self) -> DVector<f64> {
        self.covariance.diagonal()
    }

    pub fn trace(&self) -> f64 {
        self.covariance.trace()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite()) && self.covariance.iter().all(|v| v.is_finite())
    }

    pub fn is_diagonal(&self) -> bool {
        let k = self.dim();
        (0..k).all(|r| (0..k).all(|c| r == c || self.covariance[(r, c)] == 0.0))
    }

    /// Drops every off-diagonal covariance entry.
    pub fn diagonalized(&self) -> Self {
        Self {
            mean: self.mean.clone(),
            covariance: DMatrix::from_diagonal(&self.covariance.diagonal()),
        }
    }

    /// Converts to information form, failing if the covariance is not
    /// positive definite.
    pub fn to_information_form(&self) -> Result<InformationBelief> {
        let precision = invert_spd(&self.covariance)?;
        let shift = &precision * &self.mean;
        Ok(InformationBelief { precision, shift })
    }

    /// Converts to information form, flooring covariance eigenvalues at
    /// [`EIGEN_FLOOR`] when the matrix is not numerically positive definite.
    /// The flag reports whether the floor was applied.
    pub fn to_information_form_floored(&self) -> (InformationBelief, bool) {
        let (precision, floored) = invert_spd_floored(&self.covariance);
        let shift = &precision * &self.mean;
        (InformationBelief { precision, shift }, floored)
    }
}

impl InformationBelief {
    pub fn new(precision: DMatrix<f64>, shift: DVector<f64>) -> Result<Self> {
        if precision.nrows() != shift.len() || precision.ncols() != shift.len() {
            return Err(SabreError::Dimension {
                expected: shift.len(),
                found: precision.nrows(),
            });
        }
        Ok(Self { precision, shift })
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// The precision-weighted mean.
    pub fn shift(&self) -> &DVector<f64> {
        &self.shift
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut DMatrix<f64>, &mut DVector<f64>) {
        (&mut self.precision, &mut self.shift)
    }

    pub fn to_moment_form(&self) -> Result<GaussianBelief> {
        let covariance = invert_spd(&self.precision)?;
        let mean = &covariance * &self.shift;
        Ok(GaussianBelief { mean, covariance })
    }

    pub(crate) fn to_moment_form_floored(&self) -> (GaussianBelief, bool) {
        let (covariance, floored) = invert_spd_floored(&self.precision);
        let mean = &covariance * &self.shift;
        (GaussianBelief { mean, covariance }, floored)
    }
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let k = m.nrows();
    for r in 0..k {
        for c in (r + 1)..k {
            let avg = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = avg;
            m[(c, r)] = avg;
        }
    }
}

fn invert_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(chol) = m.clone().cholesky() {
        let mut inv = chol.inverse();
        symmetrize(&mut inv);
        return Ok(inv);
    }
    let eigen = SymmetricEigen::new(m.clone());
    let eigenvalue = eigen
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, |acc, v| if v.is_nan() || v < acc { v } else { acc });
    Err(SabreError::Degenerate { eigenvalue })
}

fn invert_spd_floored(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if let Some(chol) = m.clone().cholesky() {
        let mut inv = chol.inverse();
        symmetrize(&mut inv);
        return (inv, false);
    }
    let eigen = SymmetricEigen::new(m.clone());
    let inv_vals = eigen.eigenvalues.map(|v| 1.0 / v.max(EIGEN_FLOOR));
    let q = &eigen.eigenvectors;
    let mut inv = q * DMatrix::from_diagonal(&inv_vals) * q.transpose();
    symmetrize(&mut inv);
    (inv, true)
}
