//! Variance estimators for the regression coefficients: the variational
//! Fisher information and the Sandwich (M-estimation) variance.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::data::{CountDataset, Observation};
use crate::elbo::{check_shapes, compute_a_tilde, linear_predictor, row_a_tilde};
use crate::error::{PlnError, Result};
use crate::linalg::{add_kron_outer, chunked_sum, kron, spd_inverse, symmetrize};
use crate::params::{vec_index, ModelParams, VariationalParams, VariationalRow};
use crate::stats::normal_quantile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarianceMethod {
    Fisher,
    Sandwich,
}

impl VarianceMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            VarianceMethod::Fisher => "fisher",
            VarianceMethod::Sandwich => "sandwich",
        }
    }
}

impl fmt::Display for VarianceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-coefficient variances of B̂ with normal confidence intervals.
#[derive(Debug, Clone)]
pub struct VarianceReport {
    method: VarianceMethod,
    estimate: DMatrix<f64>,
    var_b: DMatrix<f64>,
    full_matrix: Option<DMatrix<f64>>,
    var_omega: Option<DMatrix<f64>>,
    level: f64,
    quantile: f64,
    ci_lower: DMatrix<f64>,
    ci_upper: DMatrix<f64>,
    warnings: Vec<String>,
}

impl VarianceReport {
    fn new(method: VarianceMethod, estimate: &DMatrix<f64>, var_b: DMatrix<f64>, level: f64) -> Result<Self> {
        let quantile = two_sided_quantile(level)?;
        if let Some((idx, v)) = var_b.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            let m = var_b.nrows();
            return Err(PlnError::LinearAlgebra(format!(
                "{method} variance of B[{}, {}] is {v}, expected a positive finite value",
                idx % m,
                idx / m
            )));
        }
        let half = var_b.map(|v| quantile * v.sqrt());
        Ok(Self {
            method,
            estimate: estimate.clone(),
            ci_lower: estimate - &half,
            ci_upper: estimate + &half,
            var_b,
            full_matrix: None,
            var_omega: None,
            level,
            quantile,
            warnings: Vec::new(),
        })
    }

    pub fn method(&self) -> VarianceMethod {
        self.method
    }

    /// B̂ (m×p).
    pub fn estimate(&self) -> &DMatrix<f64> {
        &self.estimate
    }

    pub fn var_b(&self) -> &DMatrix<f64> {
        &self.var_b
    }

    pub fn std_errors(&self) -> DMatrix<f64> {
        self.var_b.map(f64::sqrt)
    }

    /// `Ĉ_n⁻¹ D̂_n Ĉ_n⁻¹ / n` in vec(B) order (sandwich only).
    pub fn full_matrix(&self) -> Option<&DMatrix<f64>> {
        self.full_matrix.as_ref()
    }

    /// Uncorrected variances of Ω̂ entries (Fisher only).
    pub fn var_omega(&self) -> Option<&DMatrix<f64>> {
        self.var_omega.as_ref()
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    /// `Φ⁻¹(1 − (1 − level)/2)`.
    pub fn quantile(&self) -> f64 {
        self.quantile
    }

    pub fn ci_lower(&self) -> &DMatrix<f64> {
        &self.ci_lower
    }

    pub fn ci_upper(&self) -> &DMatrix<f64> {
        &self.ci_upper
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

fn two_sided_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(PlnError::InvalidConfig(format!("confidence level {level} is outside (0, 1)")));
    }
    Ok(normal_quantile(1.0 - 0.5 * (1.0 - level)))
}

/// Blocks of the variational Fisher information.
#[derive(Debug, Clone)]
pub struct FisherBlocks {
    b_blocks: Vec<DMatrix<f64>>,
    covariance: DMatrix<f64>,
    n: usize,
}

impl FisherBlocks {
    /// `Xᵀ D_{Ã_{·j}} X` for each column j.
    pub fn b_blocks(&self) -> &[DMatrix<f64>] {
        &self.b_blocks
    }

    /// `(n/2) Σ ⊗ Σ`, p²×p².
    pub fn omega_block(&self) -> DMatrix<f64> {
        kron(&self.covariance, &self.covariance) * (0.5 * self.n as f64)
    }
}

pub fn fisher_blocks(theta: &ModelParams, vpar: &VariationalParams, data: &CountDataset) -> Result<FisherBlocks> {
    let a = compute_a_tilde(theta, vpar, data)?;
    let x = data.covariates();
    let b_blocks = (0..data.p())
        .map(|j| {
            let weighted = DMatrix::from_fn(x.nrows(), x.ncols(), |i, k| a.values()[(i, j)] * x[(i, k)]);
            let mut block = x.tr_mul(&weighted);
            symmetrize(&mut block);
            block
        })
        .collect();
    Ok(FisherBlocks { b_blocks, covariance: theta.covariance().clone(), n: data.n() })
}

/// Fisher variances: `[(XᵀD_{Ã_{·j}}X)⁻¹]_kk` for B and `(2/n) Ω_kk Ω_ll` for Ω.
pub fn fisher_variance(
    theta: &ModelParams,
    vpar: &VariationalParams,
    data: &CountDataset,
    level: f64,
) -> Result<VarianceReport> {
    let blocks = fisher_blocks(theta, vpar, data)?;
    let (m, p) = (theta.m(), theta.p());
    let mut var_b = DMatrix::zeros(m, p);
    for (j, block) in blocks.b_blocks.iter().enumerate() {
        let inv = spd_inverse(block, &format!("Fisher block for column {j}"))?;
        for k in 0..m {
            var_b[(k, j)] = inv[(k, k)];
        }
    }
    let omega = theta.precision();
    let scale = 2.0 / data.n() as f64;
    let var_omega = DMatrix::from_fn(p, p, |k, l| scale * omega[(k, k)] * omega[(l, l)]);

    let mut report = VarianceReport::new(VarianceMethod::Fisher, theta.regression(), var_b, level)?;
    report.var_omega = Some(var_omega);
    Ok(report)
}

/// `D̂_n = (1/n) Σ_i (r_i r_iᵀ) ⊗ (x_i x_iᵀ)` with `r_i = Y_i − ã_i`.
pub fn compute_dn(theta: &ModelParams, vpar: &VariationalParams, data: &CountDataset) -> Result<DMatrix<f64>> {
    let a = compute_a_tilde(theta, vpar, data)?;
    let (n, m, p) = (data.n(), data.m(), data.p());
    let resid = data.counts() - a.values();
    let x = data.covariates();
    // Row i of W is r_i ⊗ x_i in vec order, so D̂_n = WᵀW / n.
    let w = DMatrix::from_fn(n, m * p, |i, idx| resid[(i, idx / m)] * x[(i, idx % m)]);
    let mut dn = w.tr_mul(&w) / n as f64;
    symmetrize(&mut dn);
    Ok(dn)
}

/// `K_i = (Σ + D_{ã}⁻¹ + D_s⁴(I + D_s²(D_ã + Ω_D))⁻¹)⁻¹`, the p×p factor of
/// the profiled curvature `−K_i ⊗ x_i x_iᵀ`.
pub(crate) fn profiled_curvature(
    covariance: &DMatrix<f64>,
    omega_diag: &DVector<f64>,
    a_tilde: &DVector<f64>,
    sdevs: &DVector<f64>,
    row: usize,
) -> Result<DMatrix<f64>> {
    let mut inner = covariance.clone();
    for j in 0..a_tilde.len() {
        let (a, s2) = (a_tilde[j], sdevs[j] * sdevs[j]);
        inner[(j, j)] += 1.0 / a + s2 * s2 / (1.0 + s2 * (a + omega_diag[j]));
    }
    inner
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| PlnError::LinearAlgebra(format!("row {row}: curvature block is not positive definite")))
}

/// `Ĉ_n = −(1/n) Σ_i K_i ⊗ (x_i x_iᵀ)`, mp×mp in vec(B) order.
pub fn compute_cn(theta: &ModelParams, vpar: &VariationalParams, data: &CountDataset) -> Result<DMatrix<f64>> {
    check_shapes(theta, vpar, data)?;
    let (n, m, p) = (data.n(), data.m(), data.p());
    let omega_diag = theta.precision().diagonal();
    let scale = -1.0 / n as f64;
    // Rows are visited one at a time so the working set stays O((mp)² + p²).
    let mut cn = chunked_sum(n, m * p, m * p, |i, acc| {
        let obs = data.observation(i);
        let row = vpar.row(i);
        let a_i = row_a_tilde(&linear_predictor(theta, &obs), &row.means, &row.sdevs, i)?;
        let k = profiled_curvature(theta.covariance(), &omega_diag, &a_i, &row.sdevs, i)?;
        add_kron_outer(acc, &k, obs.covariates.as_slice(), scale);
        Ok(())
    })?;
    symmetrize(&mut cn);
    Ok(cn)
}

/// Sandwich variance of vec(B̂): `Ĉ_n⁻¹ D̂_n Ĉ_n⁻¹ / n`.
pub fn sandwich_variance(
    theta: &ModelParams,
    vpar: &VariationalParams,
    data: &CountDataset,
    level: f64,
) -> Result<VarianceReport> {
    two_sided_quantile(level)?;
    let (n, m, p) = (data.n(), data.m(), data.p());
    let cn = compute_cn(theta, vpar, data)?;
    let dn = compute_dn(theta, vpar, data)?;
    let neg_inv = spd_inverse(&(-&cn), "sandwich bread").map_err(|_| {
        PlnError::LinearAlgebra(format!(
            "Ĉ_n is singular (n={n}, mp={}); use more observations or fewer covariates",
            m * p
        ))
    })?;
    let mut full = &neg_inv * &dn * &neg_inv / n as f64;
    symmetrize(&mut full);
    let var_b = DMatrix::from_fn(m, p, |k, j| {
        let idx = vec_index(k, j, m);
        full[(idx, idx)]
    });

    let mut report = VarianceReport::new(VarianceMethod::Sandwich, theta.regression(), var_b, level)?;
    report.full_matrix = Some(full);
    if n <= m * p {
        report.warnings.push(format!(
            "n = {n} does not exceed mp = {}; D̂_n is rank deficient and the sandwich is unreliable",
            m * p
        ));
    }
    Ok(report)
}

/// Per-observation quantities for the closed-form inverse of `∇²_{ψψ}J_i`.
///
/// `λ = ãs² / (1 + s²(ã + ãs² + ω_jj))`, `G = D_s Λ D_s`,
/// `C = (I + D_ã^{-1/2} Ω D_ã^{-1/2} − G)⁻¹` and `E = G + (I − G)C(I − G)`.
#[derive(Debug, Clone)]
pub struct SandwichWorkspace {
    pub a_tilde: DVector<f64>,
    pub sdevs: DVector<f64>,
    pub omega_diag: DVector<f64>,
    pub lambda: DVector<f64>,
    pub g: DVector<f64>,
    pub c: DMatrix<f64>,
    pub e: DMatrix<f64>,
}

impl SandwichWorkspace {
    pub fn new(theta: &ModelParams, vpar_i: &VariationalRow, obs_i: &Observation) -> Result<Self> {
        let p = theta.p();
        if vpar_i.means.len() != p || obs_i.p() != p || obs_i.m() != theta.m() {
            return Err(PlnError::Dimension("workspace row does not match θ".into()));
        }
        let eta = linear_predictor(theta, obs_i);
        let a = row_a_tilde(&eta, &vpar_i.means, &vpar_i.sdevs, 0)?;
        let omega = theta.precision();
        let omega_diag = omega.diagonal();
        let s = &vpar_i.sdevs;

        let lambda = DVector::from_fn(p, |j, _| {
            let s2 = s[j] * s[j];
            a[j] * s2 / (1.0 + s2 * (a[j] + a[j] * s2 + omega_diag[j]))
        });
        let g = DVector::from_fn(p, |j, _| s[j] * s[j] * lambda[j]);
        let inv_sqrt_a = a.map(|v| 1.0 / v.sqrt());
        let mut c_inv = DMatrix::from_fn(p, p, |k, l| inv_sqrt_a[k] * omega[(k, l)] * inv_sqrt_a[l]);
        for j in 0..p {
            c_inv[(j, j)] += 1.0 - g[j];
        }
        symmetrize(&mut c_inv);
        let c = spd_inverse(&c_inv, "workspace C")?;
        let one_minus_g = g.map(|v| 1.0 - v);
        let mut e = DMatrix::from_fn(p, p, |k, l| one_minus_g[k] * c[(k, l)] * one_minus_g[l]);
        for j in 0..p {
            e[(j, j)] += g[j];
        }
        Ok(Self { a_tilde: a, sdevs: s.clone(), omega_diag, lambda, g, c, e })
    }

    pub fn p(&self) -> usize {
        self.a_tilde.len()
    }

    /// `K_i = D_ã^{1/2} (I − E) D_ã^{1/2}`.
    pub fn curvature(&self) -> DMatrix<f64> {
        let p = self.p();
        let sqrt_a = self.a_tilde.map(f64::sqrt);
        DMatrix::from_fn(p, p, |k, l| {
            let id = if k == l { 1.0 } else { 0.0 };
            sqrt_a[k] * (id - self.e[(k, l)]) * sqrt_a[l]
        })
    }
}

/// Closed-form `(∇²_{ψ_i ψ_i} J_i)⁻¹`, ordered (m, s).
pub fn inverse_variational_hessian(ws: &SandwichWorkspace) -> DMatrix<f64> {
    let p = ws.p();
    let c = &ws.c;
    let ds_lambda = DVector::from_fn(p, |j, _| ws.sdevs[j] * ws.lambda[j]);
    let mut inner = DMatrix::zeros(2 * p, 2 * p);
    for k in 0..p {
        for l in 0..p {
            inner[(k, l)] = c[(k, l)];
            inner[(k, p + l)] = -c[(k, l)] * ds_lambda[l];
            inner[(p + k, l)] = -ds_lambda[k] * c[(k, l)];
            inner[(p + k, p + l)] = ds_lambda[k] * c[(k, l)] * ds_lambda[l];
        }
        inner[(p + k, p + k)] += ws.lambda[k];
    }
    let inv_sqrt_a = ws.a_tilde.map(|v| 1.0 / v.sqrt());
    DMatrix::from_fn(2 * p, 2 * p, |r, q| -inv_sqrt_a[r % p] * inner[(r, q)] * inv_sqrt_a[q % p])
}
