use nalgebra::{DMatrix, DVector};

use crate::error::{PlnError, Result};
use crate::linalg::symmetrize;

/// Position of `B_kj` in `vec(B)` for a regression matrix with `m` rows.
/// Columns are stacked, so the index is `j*m + k` (0-based).
pub fn vec_index(k: usize, j: usize, m: usize) -> usize {
    j * m + k
}

/// Model parameters θ = (B, Ω), with Σ = Ω⁻¹ cached alongside.
///
/// Ω is only ever set through the constructors, which refresh Σ and
/// `log|Ω|` together.
#[derive(Debug, Clone)]
pub struct ModelParams {
    regression: DMatrix<f64>,
    precision: DMatrix<f64>,
    covariance: DMatrix<f64>,
    log_det_precision: f64,
}

impl ModelParams {
    /// Builds θ from B (m×p) and a symmetric positive definite Ω (p×p).
    pub fn from_precision(regression: DMatrix<f64>, precision: DMatrix<f64>) -> Result<Self> {
        let precision = checked_symmetric(precision, regression.ncols(), "precision")?;
        let chol = precision
            .clone()
            .cholesky()
            .ok_or_else(|| PlnError::ParameterDomain("precision matrix is not positive definite".into()))?;
        let log_det_precision = log_det_from_chol(chol.l_dirty());
        let mut covariance = chol.inverse();
        symmetrize(&mut covariance);
        Ok(Self { regression, precision, covariance, log_det_precision })
    }

    /// Builds θ from B (m×p) and a symmetric positive definite Σ (p×p).
    pub fn from_covariance(regression: DMatrix<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let covariance = checked_symmetric(covariance, regression.ncols(), "covariance")?;
        let chol = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| PlnError::ParameterDomain("covariance matrix is not positive definite".into()))?;
        let log_det_precision = -log_det_from_chol(chol.l_dirty());
        let mut precision = chol.inverse();
        symmetrize(&mut precision);
        Ok(Self { regression, precision, covariance, log_det_precision })
    }

    /// Same Ω, different B.
    pub fn with_regression(&self, regression: DMatrix<f64>) -> Result<Self> {
        if regression.shape() != self.regression.shape() {
            return Err(PlnError::Dimension(format!(
                "regression is {}x{}, expected {}x{}",
                regression.nrows(),
                regression.ncols(),
                self.m(),
                self.p()
            )));
        }
        Ok(Self { regression, ..self.clone() })
    }

    pub fn regression(&self) -> &DMatrix<f64> {
        &self.regression
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn log_det_precision(&self) -> f64 {
        self.log_det_precision
    }

    pub fn m(&self) -> usize {
        self.regression.nrows()
    }

    pub fn p(&self) -> usize {
        self.regression.ncols()
    }

    /// `vec(B)`, columns stacked.
    pub fn vec_regression(&self) -> DVector<f64> {
        DVector::from_column_slice(self.regression.as_slice())
    }
}

fn log_det_from_chol(l: &DMatrix<f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

fn checked_symmetric(mut mat: DMatrix<f64>, p: usize, what: &str) -> Result<DMatrix<f64>> {
    if mat.shape() != (p, p) {
        return Err(PlnError::Dimension(format!("{what} is {}x{}, expected {p}x{p}", mat.nrows(), mat.ncols())));
    }
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(PlnError::ParameterDomain(format!("{what} has non-finite entries")));
    }
    let scale = mat.amax().max(f64::MIN_POSITIVE);
    let asym = (&mat - mat.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(PlnError::ParameterDomain(format!("{what} is not symmetric (max asymmetry {asym:.3e})")));
    }
    symmetrize(&mut mat);
    Ok(mat)
}

/// Variational parameters ψ: per-observation Gaussian means M (n×p) and
/// standard deviations S (n×p).
///
/// Standard deviations are held as `log s` so that optimizers can move them
/// freely; `sdevs()` always returns the positive values.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    means: DMatrix<f64>,
    log_sdevs: DMatrix<f64>,
    sdevs: DMatrix<f64>,
}

/// ψ_i = (m_i, s_i) for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalRow {
    pub means: DVector<f64>,
    pub sdevs: DVector<f64>,
}

impl VariationalRow {
    pub fn new(means: DVector<f64>, sdevs: DVector<f64>) -> Result<Self> {
        if means.len() != sdevs.len() {
            return Err(PlnError::Dimension("means and sdevs differ in length".into()));
        }
        if sdevs.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(PlnError::ParameterDomain("variational sdevs must be positive".into()));
        }
        Ok(Self { means, sdevs })
    }
}

impl VariationalParams {
    pub fn new(means: DMatrix<f64>, sdevs: DMatrix<f64>) -> Result<Self> {
        if means.shape() != sdevs.shape() {
            return Err(PlnError::Dimension("means and sdevs differ in shape".into()));
        }
        if let Some(bad) = sdevs.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
            return Err(PlnError::ParameterDomain(format!(
                "variational sdevs must be positive and finite (found {bad})"
            )));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(PlnError::ParameterDomain("variational means must be finite".into()));
        }
        let log_sdevs = sdevs.map(f64::ln);
        Ok(Self { means, log_sdevs, sdevs })
    }

    pub fn from_log_sdevs(means: DMatrix<f64>, log_sdevs: DMatrix<f64>) -> Result<Self> {
        Self::new(means, log_sdevs.map(f64::exp))
    }

    /// Assembles ψ from per-row values, in row order.
    pub fn from_rows(rows: &[VariationalRow]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, |r| r.means.len());
        let means = DMatrix::from_fn(n, p, |i, j| rows[i].means[j]);
        let sdevs = DMatrix::from_fn(n, p, |i, j| rows[i].sdevs[j]);
        Self::new(means, sdevs)
    }

    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    pub fn sdevs(&self) -> &DMatrix<f64> {
        &self.sdevs
    }

    pub fn log_sdevs(&self) -> &DMatrix<f64> {
        &self.log_sdevs
    }

    pub fn n(&self) -> usize {
        self.means.nrows()
    }

    pub fn p(&self) -> usize {
        self.means.ncols()
    }

    pub fn row(&self, i: usize) -> VariationalRow {
        VariationalRow { means: self.means.row(i).transpose(), sdevs: self.sdevs.row(i).transpose() }
    }

    /// Diagonal of `S̄² = Σ_i diag(s_i²)`.
    pub fn sum_sq_sdevs(&self) -> DVector<f64> {
        DVector::from_fn(self.p(), |j, _| self.sdevs.column(j).iter().map(|s| s * s).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vec_index_is_column_major() {
        let b = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let theta = ModelParams::from_precision(b, DMatrix::identity(3, 3)).unwrap();
        let v = theta.vec_regression();
        for k in 0..2 {
            for j in 0..3 {
                assert_eq!(v[vec_index(k, j, 2)], theta.regression()[(k, j)]);
            }
        }
        assert_eq!(v.as_slice(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn covariance_inverts_precision() {
        let omega = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let theta = ModelParams::from_precision(DMatrix::zeros(1, 3), omega.clone()).unwrap();
        let prod = theta.covariance() * theta.precision();
        let err = (prod - DMatrix::identity(3, 3)).norm() / 3f64.sqrt();
        assert!(err < 1e-10);
        let expected_log_det = omega.determinant().ln();
        assert!((theta.log_det_precision() - expected_log_det).abs() < 1e-12);

        let back = ModelParams::from_covariance(DMatrix::zeros(1, 3), theta.covariance().clone()).unwrap();
        assert!((back.precision() - &omega).amax() < 1e-12);
    }

    #[test]
    fn rejects_indefinite_and_asymmetric_precision() {
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            ModelParams::from_precision(DMatrix::zeros(1, 2), indefinite),
            Err(PlnError::ParameterDomain(_))
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(ModelParams::from_precision(DMatrix::zeros(1, 2), asym), Err(PlnError::ParameterDomain(_))));
    }

    #[test]
    fn sdevs_must_be_positive() {
        let m = DMatrix::zeros(2, 2);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        assert!(VariationalParams::new(m, s).is_err());
    }

    #[test]
    fn log_sdev_roundtrip_and_sum_sq() {
        let m = DMatrix::zeros(2, 2);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 0.5]);
        let v = VariationalParams::new(m, s.clone()).unwrap();
        let back = VariationalParams::from_log_sdevs(v.means().clone(), v.log_sdevs().clone()).unwrap();
        assert!((back.sdevs() - &s).amax() < 1e-14);
        assert_eq!(v.sum_sq_sdevs().as_slice(), &[10.0, 4.25]);
    }
}
