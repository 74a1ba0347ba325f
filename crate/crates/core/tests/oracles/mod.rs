//! Independent reference computations: finite differences, a brute-force
//! Schur complement, Gauss–Hermite marginal likelihoods and seeded random
//! instances. Nothing here calls the closed forms under test.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pln_core::{
    elbo_single, elbo_total, grad_model, grad_variational, hess_variational, single_obs_b_derivatives, CountDataset,
    ModelParams, Observation, VariationalParams, VariationalRow,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

pub struct Instance {
    pub theta: ModelParams,
    pub vpar: VariationalParams,
    pub data: CountDataset,
}

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// A random SPD matrix with eigenvalues bounded away from zero.
pub fn random_spd(rng: &mut ChaCha20Rng, p: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| normal(rng));
    let mut spd = &a * a.transpose() / p as f64;
    for j in 0..p {
        spd[(j, j)] += 0.5;
    }
    spd
}

/// Covariates with an intercept column and Gaussian entries elsewhere.
pub fn random_covariates(rng: &mut ChaCha20Rng, n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, k| if k == 0 { 1.0 } else { 0.7 * normal(rng) })
}

/// Random (θ, ψ, data) with moderate exponents. Needs `n ≥ m`.
pub fn random_instance(seed: u64, n: usize, p: usize, m: usize) -> Instance {
    let mut rng = rng(seed);
    let regression = DMatrix::from_fn(m, p, |_, _| 0.5 * normal(&mut rng));
    let theta = ModelParams::from_precision(regression, random_spd(&mut rng, p)).unwrap();
    let means = DMatrix::from_fn(n, p, |_, _| 0.5 * normal(&mut rng));
    let sdevs = DMatrix::from_fn(n, p, |_, _| rng.random_range(0.3..1.2));
    let vpar = VariationalParams::new(means, sdevs).unwrap();
    let counts = DMatrix::from_fn(n, p, |_, _| rng.random_range(0..12) as f64);
    let covariates = random_covariates(&mut rng, n, m);
    let offsets = DMatrix::from_fn(n, p, |_, _| 0.2 * normal(&mut rng));
    let data = CountDataset::new(counts, covariates, Some(offsets)).unwrap();
    Instance { theta, vpar, data }
}

/// Central-difference step for a parameter of magnitude `x`.
pub fn fd_step(x: f64) -> f64 {
    1e-5 * (1.0 + x.abs())
}

pub fn central_difference(x: f64, f: impl Fn(f64) -> f64) -> f64 {
    let h = fd_step(x);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Largest entrywise relative error, with entries compared against a floor
/// of `1e-3 · ‖reference‖_∞` so that near-zero entries are judged on scale.
pub fn max_rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let scale = reference.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-10);
    analytic.iter().zip(reference).map(|(a, r)| (a - r).abs() / r.abs().max(floor)).fold(0.0, f64::max)
}

/// `(1/n) Σ_i [∇²_BB J_i − ∇²_Bψ J_i (∇²_ψψ J_i)⁻¹ ∇²_ψB J_i]`, with the
/// 2p×2p Hessian inverted by dense LU.
pub fn schur_complement_cn(theta: &ModelParams, vpar: &VariationalParams, data: &CountDataset) -> DMatrix<f64> {
    let mp = theta.m() * theta.p();
    let mut total = DMatrix::zeros(mp, mp);
    for i in 0..data.n() {
        let row = vpar.row(i);
        let obs = data.observation(i);
        let d = single_obs_b_derivatives(theta, &row, &obs).unwrap();
        let h = hess_variational(theta, &row, &obs).unwrap().assembled;
        let h_inv = h.lu().try_inverse().expect("variational Hessian is invertible");
        total += &d.hessian - &d.cross * h_inv * d.cross.transpose();
    }
    total / data.n() as f64
}

/// Gauss–Hermite nodes `t_k` and log-weights `log w_k` for
/// `∫ e^{−t²} f(t) dt`. Nodes are eigenvalues of the Jacobi matrix;
/// `w_k e^{t_k²} = 1 / Σ_j h_j(t_k)²` with `h_j` the normalized Hermite
/// functions, which stays accurate in the tails.
pub fn gauss_hermite(nodes: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::zeros(nodes, nodes);
    for k in 1..nodes {
        let off = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let mut t: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
    t.sort_by(f64::total_cmp);
    let log_w = t
        .iter()
        .map(|&x| {
            let mut prev = std::f64::consts::PI.powf(-0.25) * (-0.5 * x * x).exp();
            let mut cur = std::f64::consts::SQRT_2 * x * prev;
            let mut total = prev * prev + cur * cur;
            for j in 1..nodes - 1 {
                let jf = j as f64;
                let next = (2.0 / (jf + 1.0)).sqrt() * x * cur - (jf / (jf + 1.0)).sqrt() * prev;
                prev = cur;
                cur = next;
                total += cur * cur;
            }
            -total.ln() - x * x
        })
        .collect();
    (t, log_w)
}

/// `log p(y)` for the scalar model `y | z ~ P(e^{η+z})`, `z ~ N(0, σ²)`,
/// by Gauss–Hermite quadrature centred at the Laplace mode.
pub fn log_marginal_scalar(y: f64, eta: f64, sigma2: f64, nodes: usize) -> f64 {
    let log_fact = log_factorial_by_sum(y);
    let log_joint = |z: f64| {
        y * (eta + z)
            - (eta + z).exp()
            - log_fact
            - 0.5 * z * z / sigma2
            - 0.5 * (2.0 * std::f64::consts::PI * sigma2).ln()
    };
    let mut mode = 0.0_f64;
    for _ in 0..200 {
        let g = y - (eta + mode).exp() - mode / sigma2;
        let h = -(eta + mode).exp() - 1.0 / sigma2;
        let step = g / h;
        mode -= step;
        if step.abs() < 1e-14 * (1.0 + mode.abs()) {
            break;
        }
    }
    let curvature = (eta + mode).exp() + 1.0 / sigma2;
    let tau = (2.0 / curvature).sqrt();
    let (t, log_w) = gauss_hermite(nodes);
    let terms: Vec<f64> = t.iter().zip(&log_w).map(|(&tk, &lw)| lw + tk * tk + log_joint(mode + tau * tk)).collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + terms.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + tau.ln()
}

/// `log(y!)` by direct summation, for integral `y`.
fn log_factorial_by_sum(y: f64) -> f64 {
    (2..=(y as u64)).map(|k| (k as f64).ln()).sum()
}

/// One-observation view with explicit values.
pub fn scalar_observation(y: f64, x: f64, o: f64) -> Observation {
    Observation::new(DVector::from_element(1, y), DVector::from_element(1, x), DVector::from_element(1, o)).unwrap()
}

pub fn scalar_row(m: f64, s: f64) -> VariationalRow {
    VariationalRow::new(DVector::from_element(1, m), DVector::from_element(1, s)).unwrap()
}

/// Worst relative errors of the analytic derivatives against central
/// differences at one instance.
#[derive(Debug, Clone, Copy, Default)]
pub struct DerivativeErrors {
    pub first_order: f64,
    pub second_order: f64,
}

impl DerivativeErrors {
    fn first(&mut self, analytic: &[f64], fd: &[f64]) {
        self.first_order = self.first_order.max(max_rel_err(analytic, fd));
    }

    fn second(&mut self, analytic: &[f64], fd: &[f64]) {
        self.second_order = self.second_order.max(max_rel_err(analytic, fd));
    }
}

fn perturbed_row(row: &VariationalRow, q: usize, value: f64) -> VariationalRow {
    let p = row.means.len();
    let mut out = row.clone();
    if q < p {
        out.means[q] = value;
    } else {
        out.sdevs[q - p] = value;
    }
    out
}

fn psi_value(row: &VariationalRow, q: usize) -> f64 {
    let p = row.means.len();
    if q < p {
        row.means[q]
    } else {
        row.sdevs[q - p]
    }
}

fn with_b(theta: &ModelParams, idx: usize, value: f64) -> ModelParams {
    let mut b = theta.regression().clone();
    b.as_mut_slice()[idx] = value;
    theta.with_regression(b).unwrap()
}

fn psi_gradient(theta: &ModelParams, row: &VariationalRow, obs: &Observation) -> Vec<f64> {
    let (gm, gs) = grad_variational(theta, row, obs).unwrap();
    gm.iter().chain(gs.iter()).copied().collect()
}

fn b_gradient(theta: &ModelParams, row: &VariationalRow, obs: &Observation) -> Vec<f64> {
    single_obs_b_derivatives(theta, row, obs).unwrap().gradient.as_slice().to_vec()
}

/// Checks every closed-form first and second derivative of the ELBO.
pub fn derivative_errors(inst: &Instance) -> DerivativeErrors {
    let Instance { theta, vpar, data } = inst;
    let (m, p) = (theta.m(), theta.p());
    let mut errors = DerivativeErrors::default();

    // Model gradient of the full-data ELBO, B then Ω.
    let (gb, go) = grad_model(theta, vpar, data).unwrap();
    let fd_b: Vec<f64> = (0..m * p)
        .map(|idx| {
            let b0 = theta.regression().as_slice()[idx];
            central_difference(b0, |v| elbo_total(&with_b(theta, idx, v), vpar, data).unwrap())
        })
        .collect();
    errors.first(gb.as_slice(), &fd_b);

    let (mut an_o, mut fd_o) = (Vec::new(), Vec::new());
    for k in 0..p {
        for l in k..p {
            let base = theta.precision()[(k, l)];
            let fd = central_difference(base, |v| {
                let mut omega = theta.precision().clone();
                omega[(k, l)] = v;
                omega[(l, k)] = v;
                let t = ModelParams::from_precision(theta.regression().clone(), omega).unwrap();
                elbo_total(&t, vpar, data).unwrap()
            });
            // A symmetric perturbation moves both Ω_kl and Ω_lk.
            an_o.push(if k == l { go[(k, k)] } else { go[(k, l)] + go[(l, k)] });
            fd_o.push(fd);
        }
    }
    errors.first(&an_o, &fd_o);

    for i in 0..data.n() {
        let row = vpar.row(i);
        let obs = data.observation(i);

        let fd_psi: Vec<f64> = (0..2 * p)
            .map(|q| {
                central_difference(psi_value(&row, q), |v| {
                    elbo_single(theta, &perturbed_row(&row, q, v), &obs).unwrap()
                })
            })
            .collect();
        errors.first(&psi_gradient(theta, &row, &obs), &fd_psi);

        let fd_bi: Vec<f64> = (0..m * p)
            .map(|idx| {
                let b0 = theta.regression().as_slice()[idx];
                central_difference(b0, |v| elbo_single(&with_b(theta, idx, v), &row, &obs).unwrap())
            })
            .collect();
        errors.first(&b_gradient(theta, &row, &obs), &fd_bi);

        let hess = hess_variational(theta, &row, &obs).unwrap().assembled;
        let derivs = single_obs_b_derivatives(theta, &row, &obs).unwrap();
        for q in 0..2 * p {
            let h = fd_step(psi_value(&row, q));
            let x0 = psi_value(&row, q);
            let up = perturbed_row(&row, q, x0 + h);
            let down = perturbed_row(&row, q, x0 - h);
            let col: Vec<f64> = psi_gradient(theta, &up, &obs)
                .iter()
                .zip(psi_gradient(theta, &down, &obs))
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect();
            errors.second(hess.column(q).as_slice(), &col);

            let cross_col: Vec<f64> = b_gradient(theta, &up, &obs)
                .iter()
                .zip(b_gradient(theta, &down, &obs))
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect();
            errors.second(derivs.cross.column(q).as_slice(), &cross_col);
        }
        for idx in 0..m * p {
            let b0 = theta.regression().as_slice()[idx];
            let h = fd_step(b0);
            let col: Vec<f64> = b_gradient(&with_b(theta, idx, b0 + h), &row, &obs)
                .iter()
                .zip(b_gradient(&with_b(theta, idx, b0 - h), &row, &obs))
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect();
            errors.second(derivs.hessian.column(idx).as_slice(), &col);
        }
    }
    errors
}
