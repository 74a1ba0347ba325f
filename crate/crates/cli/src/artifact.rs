//! The fit artifact: a JSON document with top-level keys `params`,
//! `variational`, `trace` and `manifest`. Matrices are stored row-major with
//! explicit dimensions.

use std::path::Path;

use anyhow::{bail, Context};
use nalgebra::DMatrix;
use pln_core::fit::StationarityReport;
use pln_core::{FitResult, ModelParams, VariationalParams};
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixDoc {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixDoc {
    pub fn from_matrix(mat: &DMatrix<f64>) -> Self {
        let data = (0..mat.nrows()).flat_map(|i| mat.row(i).iter().copied().collect::<Vec<_>>()).collect();
        Self { rows: mat.nrows(), cols: mat.ncols(), data }
    }

    pub fn to_matrix(&self, what: &str) -> anyhow::Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            bail!("{what}: {} values for a {}x{} matrix", self.data.len(), self.rows, self.cols);
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsDoc {
    pub covariates: Vec<String>,
    pub variables: Vec<String>,
    /// B̂, m×p.
    pub regression: MatrixDoc,
    /// Σ̂, p×p.
    pub covariance: MatrixDoc,
    /// Ω̂ = Σ̂⁻¹, p×p.
    pub precision: MatrixDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalDoc {
    pub means: MatrixDoc,
    pub sdevs: MatrixDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDoc {
    pub elbo: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub stationarity: StationarityReport,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub params: ParamsDoc,
    pub variational: VariationalDoc,
    pub trace: TraceDoc,
    pub manifest: RunManifest,
}

impl FitArtifact {
    pub fn new(result: &FitResult, covariates: Vec<String>, variables: Vec<String>, manifest: RunManifest) -> Self {
        let theta = &result.theta_hat;
        Self {
            params: ParamsDoc {
                covariates,
                variables,
                regression: MatrixDoc::from_matrix(theta.regression()),
                covariance: MatrixDoc::from_matrix(theta.covariance()),
                precision: MatrixDoc::from_matrix(theta.precision()),
            },
            variational: VariationalDoc {
                means: MatrixDoc::from_matrix(result.vpar_hat.means()),
                sdevs: MatrixDoc::from_matrix(result.vpar_hat.sdevs()),
            },
            trace: TraceDoc {
                elbo: result.elbo_trace.clone(),
                converged: result.converged,
                iterations: result.iterations,
                stationarity: result.stationarity,
                warnings: result.warnings.clone(),
            },
            manifest,
        }
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read fit file {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("{} is not a valid fit artifact", path.display()))
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("artifact serializes");
        text.push('\n');
        text
    }

    /// Rebuilds θ̂ from B̂ and Ω̂, the parameters the fit optimizes.
    pub fn model_params(&self) -> anyhow::Result<ModelParams> {
        let b = self.params.regression.to_matrix("params.regression")?;
        let omega = self.params.precision.to_matrix("params.precision")?;
        ModelParams::from_precision(b, omega).context("fit artifact holds invalid parameters")
    }

    pub fn variational_params(&self) -> anyhow::Result<VariationalParams> {
        let means = self.variational.means.to_matrix("variational.means")?;
        let sdevs = self.variational.sdevs.to_matrix("variational.sdevs")?;
        VariationalParams::new(means, sdevs).context("fit artifact holds invalid variational parameters")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_doc_is_row_major() {
        let mat = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let doc = MatrixDoc::from_matrix(&mat);
        assert_eq!(doc.data, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(doc.to_matrix("m").unwrap(), mat);
        let bad = MatrixDoc { rows: 2, cols: 2, data: vec![1.0] };
        assert!(bad.to_matrix("m").is_err());
    }

    #[test]
    fn floats_survive_json() {
        let mat = DMatrix::from_row_slice(1, 3, &[0.1 + 0.2, -1.0 / 3.0, 5e-324]);
        let json = serde_json::to_string(&MatrixDoc::from_matrix(&mat)).unwrap();
        let back: MatrixDoc = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_matrix("m").unwrap(), mat);
    }
}
