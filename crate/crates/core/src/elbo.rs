//! The variational lower bound and its closed-form derivatives.
//!
//! For one observation with linear predictor `η_i = o_i + Bᵀx_i`,
//!
//! ```text
//! J_i = Y_iᵀ(η_i + m_i) − 1ᵀã_i − Σ_j log(Y_ij!) + ½ log|Ω|
//!       − ½ m_iᵀΩm_i − ½ diag(Ω)ᵀs_i² + Σ_j log s_ij + p/2
//! ã_i = exp(η_i + m_i + s_i²/2)
//! ```
//!
//! All derivatives with respect to the standard deviations are taken in `s`
//! (not `log s`).

use nalgebra::{DMatrix, DVector};

use crate::data::{CountDataset, Observation};
use crate::error::{PlnError, Result};
use crate::linalg::CompensatedSum;
use crate::params::{ModelParams, VariationalParams, VariationalRow};

/// Entries of Ã above this value are treated as overflow.
pub const A_TILDE_LIMIT: f64 = 1e300;

/// `ln(A_TILDE_LIMIT)`: the largest admissible exponent.
pub(crate) fn max_exponent() -> f64 {
    A_TILDE_LIMIT.ln()
}

/// `Ã_ij = exp(o_ij + x_iᵀB_j + m_ij + s_ij²/2)`, strictly positive and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ATilde {
    values: DMatrix<f64>,
}

impl ATilde {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }
}

/// Second derivatives of `J_i` in ψ_i = (m_i, s_i).
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalHessianBlocks {
    /// `∇²_{m m} = −D_ã − Ω`
    pub mm: DMatrix<f64>,
    /// Diagonal of `∇²_{m s} = −D_{ã⊙s}`
    pub ms: DVector<f64>,
    /// Diagonal of `∇²_{s s} = −D_ã(I + D_s²) − D_s⁻² − Ω_D`
    pub ss: DVector<f64>,
    /// The full 2p×2p Hessian, ordered (m, s).
    pub assembled: DMatrix<f64>,
}

/// Derivatives of `J_i` involving vec(B).
#[derive(Debug, Clone, PartialEq)]
pub struct BDerivatives {
    /// `(Y_i − ã_i) ⊗ x_i`, length mp.
    pub gradient: DVector<f64>,
    /// `−D_ã ⊗ x_i x_iᵀ`, mp×mp.
    pub hessian: DMatrix<f64>,
    /// `−[D_ã ⊗ x_i, D_{ã⊙s} ⊗ x_i]`, mp×2p.
    pub cross: DMatrix<f64>,
}

/// Per-θ quantities reused across rows.
#[derive(Debug, Clone)]
pub(crate) struct ModelTerms<'a> {
    pub omega: &'a DMatrix<f64>,
    pub omega_diag: DVector<f64>,
    pub half_log_det: f64,
}

impl<'a> ModelTerms<'a> {
    pub fn new(theta: &'a ModelParams) -> Self {
        Self {
            omega: theta.precision(),
            omega_diag: theta.precision().diagonal(),
            half_log_det: 0.5 * theta.log_det_precision(),
        }
    }
}

/// `o_i + Bᵀ x_i`.
pub(crate) fn linear_predictor(theta: &ModelParams, obs: &Observation) -> DVector<f64> {
    theta.regression().tr_mul(&obs.covariates) + &obs.offsets
}

/// `O + XB` for the whole dataset.
pub(crate) fn linear_predictors(theta: &ModelParams, data: &CountDataset) -> DMatrix<f64> {
    data.covariates() * theta.regression() + data.offsets()
}

pub(crate) fn row_a_tilde(
    eta: &DVector<f64>,
    means: &DVector<f64>,
    sdevs: &DVector<f64>,
    row: usize,
) -> Result<DVector<f64>> {
    let limit = max_exponent();
    let mut out = DVector::zeros(eta.len());
    for j in 0..eta.len() {
        let e = eta[j] + means[j] + 0.5 * sdevs[j] * sdevs[j];
        if !(e <= limit) {
            return Err(PlnError::NumericOverflow { row, col: j, exponent: e });
        }
        out[j] = e.exp();
    }
    Ok(out)
}

/// `J_i` given a precomputed ã_i.
pub(crate) fn row_elbo(
    terms: &ModelTerms<'_>,
    obs: &Observation,
    eta: &DVector<f64>,
    means: &DVector<f64>,
    sdevs: &DVector<f64>,
    a_tilde: &DVector<f64>,
) -> f64 {
    let p = eta.len();
    let mut acc = CompensatedSum::default();
    for j in 0..p {
        acc.add(obs.counts[j] * (eta[j] + means[j]));
        acc.add(-a_tilde[j]);
        acc.add(-0.5 * terms.omega_diag[j] * sdevs[j] * sdevs[j]);
        acc.add(sdevs[j].ln());
    }
    acc.add(-obs.log_factorial);
    acc.add(terms.half_log_det);
    acc.add(-0.5 * quad_form(terms.omega, means));
    acc.add(0.5 * p as f64);
    acc.value()
}

fn quad_form(mat: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let p = v.len();
    let mut total = 0.0;
    for j in 0..p {
        let col = mat.column(j);
        let mut s = 0.0;
        for i in 0..p {
            s += col[i] * v[i];
        }
        total += s * v[j];
    }
    total
}

/// (∇_m J_i, ∇_s J_i) given ã_i.
pub(crate) fn row_gradient(
    terms: &ModelTerms<'_>,
    counts: &DVector<f64>,
    means: &DVector<f64>,
    sdevs: &DVector<f64>,
    a_tilde: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let omega_m = terms.omega * means;
    let gm = counts - a_tilde - omega_m;
    let gs = DVector::from_fn(sdevs.len(), |j, _| {
        let s = sdevs[j];
        -s * a_tilde[j] + 1.0 / s - s * terms.omega_diag[j]
    });
    (gm, gs)
}

fn check_row_shapes(theta: &ModelParams, vpar: &VariationalRow, obs: &Observation) -> Result<()> {
    let (m, p) = (theta.m(), theta.p());
    if obs.p() != p || obs.m() != m || vpar.means.len() != p || vpar.sdevs.len() != p {
        return Err(PlnError::Dimension(format!(
            "row shapes disagree with θ (m={m}, p={p}): counts {}, covariates {}, ψ {}",
            obs.p(),
            obs.m(),
            vpar.means.len()
        )));
    }
    if vpar.sdevs.iter().any(|&s| !(s > 0.0)) {
        return Err(PlnError::ParameterDomain("variational sdevs must be positive".into()));
    }
    Ok(())
}

pub(crate) fn check_shapes(theta: &ModelParams, vpar: &VariationalParams, data: &CountDataset) -> Result<()> {
    if data.p() != theta.p() || data.m() != theta.m() || vpar.n() != data.n() || vpar.p() != data.p() {
        return Err(PlnError::Dimension(format!(
            "dataset is {}x{} with m={}, θ has m={} p={}, ψ is {}x{}",
            data.n(),
            data.p(),
            data.m(),
            theta.m(),
            theta.p(),
            vpar.n(),
            vpar.p()
        )));
    }
    Ok(())
}

/// Ã for the whole dataset.
pub fn compute_a_tilde(theta: &ModelParams, vpar: &VariationalParams, data: &CountDataset) -> Result<ATilde> {
    check_shapes(theta, vpar, data)?;
    let eta = linear_predictors(theta, data);
    let (n, p) = eta.shape();
    let limit = max_exponent();
    let (means, sdevs) = (vpar.means(), vpar.sdevs());
    let mut values = DMatrix::zeros(n, p);
    for j in 0..p {
        for i in 0..n {
            let s = sdevs[(i, j)];
            let e = eta[(i, j)] + means[(i, j)] + 0.5 * s * s;
            if !(e <= limit) {
                return Err(PlnError::NumericOverflow { row: i, col: j, exponent: e });
            }
            values[(i, j)] = e.exp();
        }
    }
    Ok(ATilde { values })
}

/// `J_i(θ, ψ_i)` for a single observation.
pub fn elbo_single(theta: &ModelParams, vpar_i: &VariationalRow, obs_i: &Observation) -> Result<f64> {
    check_row_shapes(theta, vpar_i, obs_i)?;
    let terms = ModelTerms::new(theta);
    let eta = linear_predictor(theta, obs_i);
    let a = row_a_tilde(&eta, &vpar_i.means, &vpar_i.sdevs, 0)?;
    Ok(row_elbo(&terms, obs_i, &eta, &vpar_i.means, &vpar_i.sdevs, &a))
}

/// `J̄(θ, ψ) = Σ_i J_i`, evaluated through the trace form
///
/// ```text
/// Tr(Yᵀ[O + M + XB]) − 1ᵀÃ1 + K(Y) + (n/2) log|Ω| − ½Tr(MΩMᵀ)
///   − ½Tr(S̄²Ω) + Σ log S + np/2
/// ```
pub fn elbo_total(theta: &ModelParams, vpar: &VariationalParams, data: &CountDataset) -> Result<f64> {
    let a = compute_a_tilde(theta, vpar, data)?;
    let eta = linear_predictors(theta, data);
    Ok(elbo_total_with(theta, vpar, data, &eta, a.values()))
}

pub(crate) fn elbo_total_with(
    theta: &ModelParams,
    vpar: &VariationalParams,
    data: &CountDataset,
    eta: &DMatrix<f64>,
    a_tilde: &DMatrix<f64>,
) -> f64 {
    let (n, p) = (data.n(), data.p());
    let y = data.counts();
    let (means, sdevs) = (vpar.means(), vpar.sdevs());
    let m_omega = means * theta.precision();
    let omega_diag = theta.precision().diagonal();

    let mut acc = CompensatedSum::default();
    for j in 0..p {
        for i in 0..n {
            let s = sdevs[(i, j)];
            acc.add(y[(i, j)] * (eta[(i, j)] + means[(i, j)]));
            acc.add(-a_tilde[(i, j)]);
            acc.add(-0.5 * m_omega[(i, j)] * means[(i, j)]);
            acc.add(-0.5 * omega_diag[j] * s * s);
            acc.add(vpar.log_sdevs()[(i, j)]);
        }
    }
    acc.add(data.log_factorial_constant());
    acc.add(0.5 * n as f64 * theta.log_det_precision());
    acc.add(0.5 * (n * p) as f64);
    acc.value()
}

/// `(∇_B J̄, ∇_Ω J̄) = (Xᵀ(Y − Ã), (n/2)[Ω⁻¹ − (MᵀM + S̄²)/n])`.
pub fn grad_model(
    theta: &ModelParams,
    vpar: &VariationalParams,
    data: &CountDataset,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let a = compute_a_tilde(theta, vpar, data)?;
    let grad_b = data.covariates().tr_mul(&(data.counts() - a.values()));
    Ok((grad_b, grad_omega(theta, vpar)))
}

pub(crate) fn grad_omega(theta: &ModelParams, vpar: &VariationalParams) -> DMatrix<f64> {
    let n = vpar.n() as f64;
    let mut second = vpar.means().tr_mul(vpar.means());
    for (j, v) in vpar.sum_sq_sdevs().iter().enumerate() {
        second[(j, j)] += v;
    }
    (theta.covariance() - second / n) * (0.5 * n)
}

/// `(∇_{m_i} J_i, ∇_{s_i} J_i)`.
pub fn grad_variational(
    theta: &ModelParams,
    vpar_i: &VariationalRow,
    obs_i: &Observation,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_row_shapes(theta, vpar_i, obs_i)?;
    let terms = ModelTerms::new(theta);
    let eta = linear_predictor(theta, obs_i);
    let a = row_a_tilde(&eta, &vpar_i.means, &vpar_i.sdevs, 0)?;
    Ok(row_gradient(&terms, &obs_i.counts, &vpar_i.means, &vpar_i.sdevs, &a))
}

pub(crate) fn hessian_blocks(
    omega: &DMatrix<f64>,
    a_tilde: &DVector<f64>,
    sdevs: &DVector<f64>,
) -> VariationalHessianBlocks {
    let p = a_tilde.len();
    let mut mm = -omega.clone();
    for j in 0..p {
        mm[(j, j)] -= a_tilde[j];
    }
    let ms = DVector::from_fn(p, |j, _| -a_tilde[j] * sdevs[j]);
    let ss = DVector::from_fn(p, |j, _| {
        let s2 = sdevs[j] * sdevs[j];
        -a_tilde[j] * (1.0 + s2) - 1.0 / s2 - omega[(j, j)]
    });
    let mut assembled = DMatrix::zeros(2 * p, 2 * p);
    assembled.view_mut((0, 0), (p, p)).copy_from(&mm);
    for j in 0..p {
        assembled[(j, p + j)] = ms[j];
        assembled[(p + j, j)] = ms[j];
        assembled[(p + j, p + j)] = ss[j];
    }
    VariationalHessianBlocks { mm, ms, ss, assembled }
}

/// `∇²_{ψ_i ψ_i} J_i` in blocks.
pub fn hess_variational(
    theta: &ModelParams,
    vpar_i: &VariationalRow,
    obs_i: &Observation,
) -> Result<VariationalHessianBlocks> {
    check_row_shapes(theta, vpar_i, obs_i)?;
    let eta = linear_predictor(theta, obs_i);
    let a = row_a_tilde(&eta, &vpar_i.means, &vpar_i.sdevs, 0)?;
    Ok(hessian_blocks(theta.precision(), &a, &vpar_i.sdevs))
}

/// Gradient, Hessian and ψ-cross derivatives of `J_i` in vec(B).
pub fn single_obs_b_derivatives(
    theta: &ModelParams,
    vpar_i: &VariationalRow,
    obs_i: &Observation,
) -> Result<BDerivatives> {
    check_row_shapes(theta, vpar_i, obs_i)?;
    let (m, p) = (theta.m(), theta.p());
    let eta = linear_predictor(theta, obs_i);
    let a = row_a_tilde(&eta, &vpar_i.means, &vpar_i.sdevs, 0)?;
    let x = &obs_i.covariates;

    let gradient = DVector::from_fn(m * p, |idx, _| {
        let (j, k) = (idx / m, idx % m);
        (obs_i.counts[j] - a[j]) * x[k]
    });
    let mut hessian = DMatrix::zeros(m * p, m * p);
    let mut cross = DMatrix::zeros(m * p, 2 * p);
    for j in 0..p {
        for k1 in 0..m {
            for k2 in 0..m {
                hessian[(j * m + k1, j * m + k2)] = -a[j] * x[k1] * x[k2];
            }
            cross[(j * m + k1, j)] = -a[j] * x[k1];
            cross[(j * m + k1, p + j)] = -a[j] * vpar_i.sdevs[j] * x[k1];
        }
    }
    Ok(BDerivatives { gradient, hessian, cross })
}
