//! Variational EM for the PLN model.
//!
//! Each outer iteration takes a Newton step on B for the profiled objective
//! `L(B, Ω) = Σ_i max_{ψ_i} J_i`, whose gradient is `Xᵀ(Y − Ã)` and whose
//! Hessian is `−Σ_i K_i ⊗ x_i x_iᵀ`, then applies the closed-form update of
//! Σ and re-profiles every ψ_i. A phase is kept only if it does not lower
//! the ELBO, so the recorded trace is nondecreasing.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CountDataset, Observation};
use crate::elbo::{grad_omega, linear_predictor, linear_predictors, row_a_tilde, row_elbo, row_gradient, ModelTerms};
use crate::error::{PlnError, Result};
use crate::linalg::{add_kron_outer, chunked_sum, max_abs, spd_solve, symmetrize, CompensatedSum};
use crate::params::{ModelParams, VariationalParams, VariationalRow};
use crate::variance::profiled_curvature;

/// Initial standard deviation of every variational factor.
pub const INITIAL_SDEV: f64 = 0.1;
/// Ridge added to the initial covariance.
pub const INITIAL_RIDGE: f64 = 1e-4;

/// Tolerances and iteration caps of [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Threshold on `|ΔJ̄| / (1 + |J̄|)`.
    pub outer_tol: f64,
    pub max_outer_iters: usize,
    /// Threshold on `‖∇_{ψ_i} J_i‖_∞` when profiling a row.
    pub psi_grad_tol: f64,
    pub max_psi_iters: usize,
    /// First trial step of every line search.
    pub newton_damping: f64,
    pub max_halvings: usize,
    /// First SPD-repair increment; multiplied by 10 until `max_jitter`.
    pub jitter: f64,
    pub max_jitter: f64,
    /// Convergence also requires `‖∇_B J̄‖_∞ ≤ b_grad_tol · (1 + ‖XᵀY‖_∞)`.
    pub b_grad_tol: f64,
    /// Convergence also requires `‖∇_Ω J̄‖_∞ ≤ omega_grad_tol · n`.
    pub omega_grad_tol: f64,
    /// Convergence also requires `‖Σ − (MᵀM + S̄²)/n‖_F ≤ sigma_identity_tol · ‖Σ‖_F`.
    pub sigma_identity_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            outer_tol: 1e-8,
            max_outer_iters: 500,
            psi_grad_tol: 1e-8,
            max_psi_iters: 100,
            newton_damping: 1.0,
            max_halvings: 30,
            jitter: 1e-8,
            max_jitter: 1e-2,
            b_grad_tol: 1e-5,
            omega_grad_tol: 1e-6,
            sigma_identity_tol: 1e-6,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("outer_tol", self.outer_tol),
            ("psi_grad_tol", self.psi_grad_tol),
            ("newton_damping", self.newton_damping),
            ("jitter", self.jitter),
            ("max_jitter", self.max_jitter),
            ("b_grad_tol", self.b_grad_tol),
            ("omega_grad_tol", self.omega_grad_tol),
            ("sigma_identity_tol", self.sigma_identity_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PlnError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.newton_damping > 1.0 {
            return Err(PlnError::InvalidConfig("newton_damping must not exceed 1".into()));
        }
        if self.max_outer_iters == 0 || self.max_psi_iters == 0 {
            return Err(PlnError::InvalidConfig("iteration caps must be at least 1".into()));
        }
        if self.jitter > self.max_jitter {
            return Err(PlnError::InvalidConfig("jitter exceeds max_jitter".into()));
        }
        Ok(())
    }
}

/// Gradient norms at the returned point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub b_grad_norm: f64,
    /// `1 + ‖XᵀY‖_∞`, the scale of the B-gradient check.
    pub b_grad_scale: f64,
    pub omega_grad_norm: f64,
    pub max_psi_grad_norm: f64,
    /// `‖Σ̂ − (M̂ᵀM̂ + S̄²)/n‖_F / ‖Σ̂‖_F`.
    pub sigma_identity_error: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_hat: ModelParams,
    pub vpar_hat: VariationalParams,
    /// ELBO at the initial point, then after every outer iteration.
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub stationarity: StationarityReport,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn final_elbo(&self) -> f64 {
        *self.elbo_trace.last().expect("trace holds the initial value")
    }
}

/// A profiled row ψ̂_i with its diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfiledRow {
    pub row: VariationalRow,
    pub elbo: f64,
    pub grad_norm: f64,
    pub newton_steps: usize,
}

/// Least-squares start: B₀ regresses `log(1+Y) − O` on X, M₀ is the
/// residual, S₀ = 0.1 and `Σ₀ = M₀ᵀM₀/n + 1e-4 I`.
pub fn init_params(data: &CountDataset) -> Result<(ModelParams, VariationalParams)> {
    let target = data.counts().map(f64::ln_1p) - data.offsets();
    let qr = data.covariates().clone().qr();
    let qty = qr.q().tr_mul(&target);
    let regression = qr
        .r()
        .solve_upper_triangular(&qty)
        .ok_or_else(|| PlnError::LinearAlgebra("least-squares start: R is singular".into()))?;
    let means = &target - data.covariates() * &regression;
    let mut covariance = means.tr_mul(&means) / data.n() as f64;
    for j in 0..data.p() {
        covariance[(j, j)] += INITIAL_RIDGE;
    }
    symmetrize(&mut covariance);
    let theta = ModelParams::from_covariance(regression, covariance)?;
    let sdevs = DMatrix::from_element(data.n(), data.p(), INITIAL_SDEV);
    Ok((theta, VariationalParams::new(means, sdevs)?))
}

/// `(MᵀM + S̄²)/n`, with escalating diagonal jitter if it is not SPD.
pub fn update_sigma(vpar: &VariationalParams, cfg: &FitConfig) -> Result<DMatrix<f64>> {
    let n = vpar.n();
    if n == 0 {
        return Err(PlnError::Dimension("covariance update needs at least one row".into()));
    }
    let mut sigma = vpar.means().tr_mul(vpar.means());
    for (j, v) in vpar.sum_sq_sdevs().iter().enumerate() {
        sigma[(j, j)] += v;
    }
    sigma /= n as f64;
    symmetrize(&mut sigma);
    if sigma.clone().cholesky().is_some() {
        return Ok(sigma);
    }
    let mut jitter = cfg.jitter;
    while jitter <= cfg.max_jitter * (1.0 + 1e-12) {
        let mut repaired = sigma.clone();
        for j in 0..repaired.nrows() {
            repaired[(j, j)] += jitter;
        }
        if repaired.clone().cholesky().is_some() {
            return Ok(repaired);
        }
        jitter *= 10.0;
    }
    Err(PlnError::SpdRepair { jitter: cfg.max_jitter })
}

/// Maximizes `J_i` over ψ_i = (m_i, s_i) for fixed θ.
pub fn profile_vpar(
    theta: &ModelParams,
    obs_i: &Observation,
    init: &VariationalRow,
    cfg: &FitConfig,
) -> Result<ProfiledRow> {
    if obs_i.p() != theta.p() || obs_i.m() != theta.m() || init.means.len() != theta.p() {
        return Err(PlnError::Dimension("row does not match θ".into()));
    }
    let terms = ModelTerms::new(theta);
    let eta = linear_predictor(theta, obs_i);
    profile_row(&terms, obs_i, &eta, init, cfg, 0)
}

/// Damped Newton in (m, u = log s). In these coordinates the negated
/// Hessian is `[[D_ã + Ω, D_b], [D_b, D_d]]` with `b = ãs²` and
/// `d = ãs⁴ + 2ãs² + 2ω s²`, which is positive definite everywhere.
pub(crate) fn profile_row(
    terms: &ModelTerms<'_>,
    obs: &Observation,
    eta: &DVector<f64>,
    init: &VariationalRow,
    cfg: &FitConfig,
    row: usize,
) -> Result<ProfiledRow> {
    let p = eta.len();
    let mut m = init.means.clone();
    let mut u = init.sdevs.map(f64::ln);
    let mut s = init.sdevs.clone();
    let mut a = row_a_tilde(eta, &m, &s, row)?;
    let mut elbo = row_elbo(terms, obs, eta, &m, &s, &a);
    let mut grad_norm = f64::INFINITY;

    for step in 0..=cfg.max_psi_iters {
        let (gm, gs) = row_gradient(terms, &obs.counts, &m, &s, &a);
        grad_norm = max_abs(gm.iter().chain(gs.iter()));
        if grad_norm < cfg.psi_grad_tol {
            return Ok(ProfiledRow { row: VariationalRow { means: m, sdevs: s }, elbo, grad_norm, newton_steps: step });
        }
        if step == cfg.max_psi_iters || !grad_norm.is_finite() {
            break;
        }

        let gu = s.component_mul(&gs);
        let b = DVector::from_fn(p, |j, _| a[j] * s[j] * s[j]);
        let d = DVector::from_fn(p, |j, _| {
            let s2 = s[j] * s[j];
            a[j] * s2 * s2 + 2.0 * a[j] * s2 + 2.0 * terms.omega_diag[j] * s2
        });
        let mut reduced = terms.omega.clone();
        let mut rhs = gm.clone();
        for j in 0..p {
            reduced[(j, j)] += a[j] - b[j] * b[j] / d[j];
            rhs[j] -= b[j] / d[j] * gu[j];
        }
        let dm = spd_solve(&reduced, &rhs, "profiling step")?;
        let du = DVector::from_fn(p, |j, _| (gu[j] - b[j] * dm[j]) / d[j]);
        let gain = gm.dot(&dm) + gu.dot(&du);
        let noise = 1e-12 * (1.0 + elbo.abs());

        let mut t = cfg.newton_damping;
        let mut moved = false;
        for _ in 0..=cfg.max_halvings {
            let m_try = &m + &dm * t;
            let u_try = &u + &du * t;
            let s_try = u_try.map(f64::exp);
            if let Ok(a_try) = row_a_tilde(eta, &m_try, &s_try, row) {
                let elbo_try = row_elbo(terms, obs, eta, &m_try, &s_try, &a_try);
                if elbo_try >= elbo || (0.5 * t * gain <= noise && elbo_try.is_finite()) {
                    m = m_try;
                    u = u_try;
                    s = s_try;
                    a = a_try;
                    elbo = elbo_try;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Err(PlnError::ProfilingFailure { row, grad_norm })
}

/// State of the outer loop: θ, ψ and the per-row diagnostics.
struct State {
    theta: ModelParams,
    rows: Vec<ProfiledRow>,
    elbo: f64,
}

impl State {
    fn vpar(&self) -> Result<VariationalParams> {
        let rows: Vec<VariationalRow> = self.rows.iter().map(|r| r.row.clone()).collect();
        VariationalParams::from_rows(&rows)
    }
}

fn profile_all(
    theta: &ModelParams,
    data: &CountDataset,
    inits: &[VariationalRow],
    cfg: &FitConfig,
) -> Result<(Vec<ProfiledRow>, f64)> {
    let terms = ModelTerms::new(theta);
    let eta = linear_predictors(theta, data);
    let rows: Vec<ProfiledRow> = (0..data.n())
        .into_par_iter()
        .map(|i| {
            let eta_i = eta.row(i).transpose();
            profile_row(&terms, &data.observation(i), &eta_i, &inits[i], cfg, i)
        })
        .collect::<Result<_>>()?;
    let total: CompensatedSum = rows.iter().map(|r| r.elbo).collect();
    Ok((rows, total.value()))
}

fn a_tilde_rows(theta: &ModelParams, data: &CountDataset, rows: &[ProfiledRow]) -> Result<Vec<DVector<f64>>> {
    let eta = linear_predictors(theta, data);
    rows.iter().enumerate().map(|(i, r)| row_a_tilde(&eta.row(i).transpose(), &r.row.means, &r.row.sdevs, i)).collect()
}

fn grad_b(data: &CountDataset, a_rows: &[DVector<f64>]) -> DMatrix<f64> {
    let a = DMatrix::from_fn(data.n(), data.p(), |i, j| a_rows[i][j]);
    data.covariates().tr_mul(&(data.counts() - a))
}

/// Newton step on B for the profiled objective, with a halving line search
/// that re-profiles every row. Returns whether a step was taken.
fn regression_step(state: &mut State, data: &CountDataset, cfg: &FitConfig) -> Result<bool> {
    let (m, p) = (data.m(), data.p());
    let theta = &state.theta;
    let a_rows = a_tilde_rows(theta, data, &state.rows)?;
    let grad = grad_b(data, &a_rows);
    let grad_vec = DVector::from_column_slice(grad.as_slice());

    let omega_diag = theta.precision().diagonal();
    let x = data.covariates();
    let neg_hessian = chunked_sum(data.n(), m * p, m * p, |i, acc| {
        let k = profiled_curvature(theta.covariance(), &omega_diag, &a_rows[i], &state.rows[i].row.sdevs, i)?;
        let x_i: Vec<f64> = x.row(i).iter().copied().collect();
        add_kron_outer(acc, &k, &x_i, 1.0);
        Ok(())
    })?;
    let mut neg_hessian = neg_hessian;
    symmetrize(&mut neg_hessian);
    let step = spd_solve(&neg_hessian, &grad_vec, "regression Newton step")?;
    let gain = grad_vec.dot(&step);
    if !(0.5 * gain > 1e-12 * (1.0 + state.elbo.abs())) {
        return Ok(false);
    }
    let step_b = DMatrix::from_column_slice(m, p, step.as_slice());

    // First-order response of ψ̂_i to the change in B, used as warm start.
    let tangents: Vec<(DVector<f64>, DVector<f64>)> = state
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let delta_eta = step_b.tr_mul(&x.row(i).transpose());
            psi_tangent(theta.precision(), &a_rows[i], &r.row.sdevs, &delta_eta)
        })
        .collect::<Result<_>>()?;

    let mut t = cfg.newton_damping;
    for _ in 0..=cfg.max_halvings {
        let trial = theta.with_regression(theta.regression() + &step_b * t)?;
        let inits: Vec<VariationalRow> = state
            .rows
            .iter()
            .zip(&tangents)
            .map(|(r, (dm, ds))| VariationalRow {
                means: &r.row.means + dm * t,
                sdevs: DVector::from_fn(p, |j, _| r.row.sdevs[j] * (t * ds[j] / r.row.sdevs[j]).clamp(-2.0, 2.0).exp()),
            })
            .collect();
        if let Ok((rows, elbo)) = profile_all(&trial, data, &inits, cfg) {
            if elbo >= state.elbo {
                *state = State { theta: trial, rows, elbo };
                return Ok(true);
            }
        }
        t *= 0.5;
    }
    Ok(false)
}

/// `dψ̂/dB · ΔB` for one row, given `δη = ΔBᵀ x_i`, in (m, s) coordinates.
fn psi_tangent(
    omega: &DMatrix<f64>,
    a: &DVector<f64>,
    s: &DVector<f64>,
    delta_eta: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let p = a.len();
    let d_ss = DVector::from_fn(p, |j, _| {
        let s2 = s[j] * s[j];
        a[j] * (1.0 + s2) + 1.0 / s2 + omega[(j, j)]
    });
    let as_ = a.component_mul(s);
    let r_m = a.component_mul(delta_eta);
    let r_s = as_.component_mul(delta_eta);
    let mut reduced = omega.clone();
    let mut rhs = r_m.clone();
    for j in 0..p {
        reduced[(j, j)] += a[j] - as_[j] * as_[j] / d_ss[j];
        rhs[j] -= as_[j] / d_ss[j] * r_s[j];
    }
    let dm = spd_solve(&reduced, &rhs, "warm-start tangent")?;
    let ds = DVector::from_fn(p, |j, _| (r_s[j] - as_[j] * dm[j]) / d_ss[j]);
    Ok((-dm, -ds))
}

/// Closed-form Σ update followed by re-profiling. Returns whether it was kept.
fn covariance_step(state: &mut State, data: &CountDataset, cfg: &FitConfig) -> Result<bool> {
    let sigma = update_sigma(&state.vpar()?, cfg)?;
    let trial = ModelParams::from_covariance(state.theta.regression().clone(), sigma)?;
    let inits: Vec<VariationalRow> = state.rows.iter().map(|r| r.row.clone()).collect();
    let (rows, elbo) = profile_all(&trial, data, &inits, cfg)?;
    if elbo >= state.elbo {
        *state = State { theta: trial, rows, elbo };
        return Ok(true);
    }
    Ok(false)
}

fn stationarity(state: &State, data: &CountDataset) -> Result<StationarityReport> {
    let vpar = state.vpar()?;
    let a_rows = a_tilde_rows(&state.theta, data, &state.rows)?;
    let gb = grad_b(data, &a_rows);
    let go = grad_omega(&state.theta, &vpar);
    let xty = data.covariates().tr_mul(data.counts());
    let n = data.n() as f64;
    let mut implied = vpar.means().tr_mul(vpar.means());
    for (j, v) in vpar.sum_sq_sdevs().iter().enumerate() {
        implied[(j, j)] += v;
    }
    implied /= n;
    let sigma = state.theta.covariance();
    Ok(StationarityReport {
        b_grad_norm: max_abs(gb.iter()),
        b_grad_scale: 1.0 + max_abs(xty.iter()),
        omega_grad_norm: max_abs(go.iter()),
        max_psi_grad_norm: state.rows.iter().map(|r| r.grad_norm).fold(0.0, f64::max),
        sigma_identity_error: (sigma - implied).norm() / sigma.norm(),
    })
}

fn is_stationary(report: &StationarityReport, data: &CountDataset, cfg: &FitConfig) -> bool {
    report.b_grad_norm <= cfg.b_grad_tol * report.b_grad_scale
        && report.omega_grad_norm <= cfg.omega_grad_tol * data.n() as f64
        && report.sigma_identity_error <= cfg.sigma_identity_tol
}

/// Fits θ̂ from the least-squares start.
pub fn fit(data: &CountDataset, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let (theta, vpar) = init_params(data)?;
    fit_from(data, cfg, theta, &vpar)
}

/// Fits θ̂ starting from the given (θ, ψ).
pub fn fit_from(
    data: &CountDataset,
    cfg: &FitConfig,
    theta: ModelParams,
    vpar: &VariationalParams,
) -> Result<FitResult> {
    cfg.validate()?;
    if theta.p() != data.p() || theta.m() != data.m() || vpar.n() != data.n() || vpar.p() != data.p() {
        return Err(PlnError::Dimension("starting point does not match the dataset".into()));
    }
    let mut warnings = Vec::new();
    for j in 0..data.p() {
        if data.counts().column(j).iter().all(|&y| y == 0.0) {
            warnings.push(format!(
                "column {j} has no nonzero counts; its coefficients diverge and are capped by the iteration limit"
            ));
        }
    }

    let inits: Vec<VariationalRow> = (0..data.n()).map(|i| vpar.row(i)).collect();
    let (rows, elbo) = profile_all(&theta, data, &inits, cfg)?;
    let mut state = State { theta, rows, elbo };
    let mut trace = vec![elbo];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_outer_iters {
        iterations += 1;
        let previous = state.elbo;
        let moved_b = regression_step(&mut state, data, cfg)?;
        let moved_sigma = covariance_step(&mut state, data, cfg)?;
        trace.push(state.elbo);

        let rel_change = (state.elbo - previous).abs() / (1.0 + state.elbo.abs());
        if rel_change < cfg.outer_tol {
            let report = stationarity(&state, data)?;
            if is_stationary(&report, data, cfg) {
                converged = true;
                break;
            }
            if !moved_b && !moved_sigma {
                // Neither phase can improve the ELBO at working precision.
                warnings.push("outer iterations stalled before the gradient tolerances were met".into());
                break;
            }
        }
    }

    let stationarity = stationarity(&state, data)?;
    let vpar_hat = state.vpar()?;
    Ok(FitResult { theta_hat: state.theta, vpar_hat, elbo_trace: trace, converged, iterations, stationarity, warnings })
}
