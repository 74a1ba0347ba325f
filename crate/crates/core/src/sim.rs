//! Simulation harness: scenario generation, PLN sampling and the coverage
//! experiment.
//!
//! Randomness comes from ChaCha20 seeded with the 64-bit experiment seed;
//! independent draws use distinct stream numbers of that seed:
//! stream 0 builds the scenario, stream 1 feeds [`sample_counts`] and
//! replicate k of the coverage experiment uses stream `2 + k`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CountDataset;
use crate::error::{PlnError, Result};
use crate::fit::{fit, FitConfig};
use crate::params::vec_index;
use crate::stats::{coverage_rate, ks_pvalue_std_normal, normal_quantile, rmse, standardize};
use crate::variance::{fisher_variance, sandwich_variance, VarianceReport};

/// Largest Poisson rate the sampler accepts.
pub const MAX_RATE: f64 = 1e12;
/// Significance level of the per-coefficient KS tests.
pub const KS_ALPHA: f64 = 0.05;
/// Range of the randomly drawn Toeplitz correlation.
pub const RHO_RANGE: (f64, f64) = (0.8, 0.95);

const SCENARIO_STREAM: u64 = 0;
const COUNTS_STREAM: u64 = 1;
const FIRST_REPLICATE_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rho {
    /// Drawn uniformly from [`RHO_RANGE`].
    Random,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n: usize,
    pub p: usize,
    pub m: usize,
    pub rho: Rho,
    pub seed: u64,
    pub replicates: usize,
    pub level: f64,
}

impl ScenarioConfig {
    pub fn new(n: usize, p: usize, m: usize, seed: u64) -> Self {
        Self { n, p, m, rho: Rho::Random, seed, replicates: 1, level: 0.95 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.m == 0 || self.replicates == 0 {
            return Err(PlnError::InvalidConfig(format!(
                "n, p, m and replicates must be at least 1 (got n={}, p={}, m={}, replicates={})",
                self.n, self.p, self.m, self.replicates
            )));
        }
        if let Rho::Fixed(rho) = self.rho {
            if !(0.0..1.0).contains(&rho) {
                return Err(PlnError::InvalidConfig(format!("rho {rho} is outside [0, 1)")));
            }
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(PlnError::InvalidConfig(format!("level {} is outside (0, 1)", self.level)));
        }
        Ok(())
    }
}

/// True parameters and a one-hot design.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub b_star: DMatrix<f64>,
    pub sigma_star: DMatrix<f64>,
    pub design: DMatrix<f64>,
    pub rho: f64,
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `Σ*_kj = 1{j = k} + ρ^{|j−k|}`.
pub fn toeplitz_covariance(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |k, j| {
        let base = rho.powi(k.abs_diff(j) as i32);
        if k == j {
            base + 1.0
        } else {
            base
        }
    })
}

/// n×m design whose rows each hold a single 1 at a uniformly chosen column.
pub fn one_hot_design<R: Rng>(n: usize, m: usize, rng: &mut R) -> DMatrix<f64> {
    let mut design = DMatrix::zeros(n, m);
    for i in 0..n {
        design[(i, rng.random_range(0..m))] = 1.0;
    }
    design
}

pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, SCENARIO_STREAM);
    let rho = match cfg.rho {
        Rho::Fixed(rho) => rho,
        Rho::Random => rng.random_range(RHO_RANGE.0..=RHO_RANGE.1),
    };
    let normal = Normal::new(2.0, 1.0).expect("unit scale is valid");
    let b_star = DMatrix::from_fn(cfg.m, cfg.p, |_, _| normal.sample(&mut rng));
    let sigma_star = toeplitz_covariance(cfg.p, rho);
    if sigma_star.clone().cholesky().is_none() {
        return Err(PlnError::ParameterDomain(format!("Σ* is not positive definite for rho = {rho}")));
    }
    let design = one_hot_design(cfg.n, cfg.m, &mut rng);
    Ok(Scenario { b_star, sigma_star, design, rho })
}

/// Draws `Y_ij ~ P(exp(x_iᵀB*_{·j} + Z_ij))` with `Z_i ~ N(0, Σ*)`, using
/// stream 1 of `seed`.
pub fn sample_counts(scenario: &Scenario, seed: u64) -> Result<CountDataset> {
    let mut rng = stream_rng(seed, COUNTS_STREAM);
    sample_counts_with(scenario, &scenario.design, &mut rng)
}

fn sample_counts_with<R: Rng>(scenario: &Scenario, design: &DMatrix<f64>, rng: &mut R) -> Result<CountDataset> {
    let (n, p) = (design.nrows(), scenario.b_star.ncols());
    let chol = scenario
        .sigma_star
        .clone()
        .cholesky()
        .ok_or_else(|| PlnError::ParameterDomain("Σ* is not positive definite".into()))?;
    let l = chol.l();
    let eta = design * &scenario.b_star;
    let mut counts = DMatrix::zeros(n, p);
    for i in 0..n {
        let xi = nalgebra::DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = &l * xi;
        for j in 0..p {
            let rate = (eta[(i, j)] + z[j]).exp();
            if !(rate <= MAX_RATE) {
                return Err(PlnError::Sampling { row: i, col: j, rate });
            }
            counts[(i, j)] = if rate > 0.0 {
                Poisson::new(rate).map_err(|_| PlnError::Sampling { row: i, col: j, rate })?.sample(rng)
            } else {
                0.0
            };
        }
    }
    CountDataset::new(counts, design.clone(), None)
}

/// Fresh design and counts for replicate `index`.
pub fn replicate_dataset(scenario: &Scenario, seed: u64, index: usize) -> Result<CountDataset> {
    let mut rng = stream_rng(seed, FIRST_REPLICATE_STREAM + index as u64);
    let design = one_hot_design(scenario.design.nrows(), scenario.b_star.nrows(), &mut rng);
    sample_counts_with(scenario, &design, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub stream: u64,
    pub converged: bool,
    pub iterations: usize,
    pub rmse_b: Option<f64>,
    pub rmse_sigma: Option<f64>,
    /// Standardized sandwich estimates in vec(B) order.
    pub sandwich_z: Option<Vec<f64>>,
    /// Standardized Fisher estimates in vec(B) order.
    pub fisher_z: Option<Vec<f64>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientKs {
    pub covariate: usize,
    pub variable: usize,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    /// Pooled over all replicates and coefficients.
    pub coverage: Option<f64>,
    pub ks: Vec<CoefficientKs>,
    /// Fraction of coefficients whose KS p-value exceeds [`KS_ALPHA`].
    pub ks_pass_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub config: ScenarioConfig,
    pub rho: f64,
    /// Row-major m×p.
    pub b_star: Vec<Vec<f64>>,
    /// Row-major p×p.
    pub sigma_star: Vec<Vec<f64>>,
    pub quantile: f64,
    pub replicates: Vec<ReplicateRecord>,
    pub failures: usize,
    pub sandwich: MethodSummary,
    pub fisher: MethodSummary,
}

impl CoverageReport {
    pub fn rmse_b(&self) -> Vec<f64> {
        self.replicates.iter().filter_map(|r| r.rmse_b).collect()
    }
}

fn rows_of(mat: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..mat.nrows()).map(|i| mat.row(i).iter().copied().collect()).collect()
}

fn vec_order(mat: &DMatrix<f64>) -> Vec<f64> {
    mat.as_slice().to_vec()
}

fn run_replicate(scenario: &Scenario, cfg: &ScenarioConfig, fit_cfg: &FitConfig, index: usize) -> ReplicateRecord {
    let mut record = ReplicateRecord {
        index,
        stream: FIRST_REPLICATE_STREAM + index as u64,
        converged: false,
        iterations: 0,
        rmse_b: None,
        rmse_sigma: None,
        sandwich_z: None,
        fisher_z: None,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let data = replicate_dataset(scenario, cfg.seed, index)?;
        let fitted = fit(&data, fit_cfg)?;
        record.converged = fitted.converged;
        record.iterations = fitted.iterations;
        let theta = &fitted.theta_hat;
        record.rmse_b = Some(rmse(theta.regression(), &scenario.b_star)?);
        record.rmse_sigma = Some(rmse(theta.covariance(), &scenario.sigma_star)?);
        let z = |report: &VarianceReport| -> Result<Vec<f64>> {
            Ok(vec_order(&standardize(report.estimate(), &scenario.b_star, report.var_b())?))
        };
        let sandwich = sandwich_variance(theta, &fitted.vpar_hat, &data, cfg.level)?;
        record.sandwich_z = Some(z(&sandwich)?);
        let fisher = fisher_variance(theta, &fitted.vpar_hat, &data, cfg.level)?;
        record.fisher_z = Some(z(&fisher)?);
        Ok(())
    })();
    if let Err(e) = outcome {
        record.error = Some(e.to_string());
    }
    record
}

fn summarize(samples: &[&Vec<f64>], m: usize, p: usize, level: f64) -> Result<MethodSummary> {
    if samples.is_empty() {
        return Ok(MethodSummary { coverage: None, ks: Vec::new(), ks_pass_fraction: None });
    }
    let coverage = coverage_rate(samples.iter().flat_map(|z| z.iter()), level)?;
    let mut ks = Vec::with_capacity(m * p);
    for j in 0..p {
        for k in 0..m {
            let idx = vec_index(k, j, m);
            let column: Vec<f64> = samples.iter().map(|z| z[idx]).collect();
            let test = ks_pvalue_std_normal(&column)?;
            ks.push(CoefficientKs { covariate: k, variable: j, statistic: test.statistic, p_value: test.p_value });
        }
    }
    let passed = ks.iter().filter(|c| c.p_value > KS_ALPHA).count();
    Ok(MethodSummary { coverage: Some(coverage), ks_pass_fraction: Some(passed as f64 / ks.len() as f64), ks })
}

/// Runs the coverage experiment with the default fit configuration.
pub fn run_coverage_experiment(cfg: &ScenarioConfig) -> Result<CoverageReport> {
    run_coverage_experiment_with(cfg, &FitConfig::default())
}

/// Replicates run in parallel; records are kept in replicate order and a
/// failed replicate is recorded rather than aborting the experiment.
pub fn run_coverage_experiment_with(cfg: &ScenarioConfig, fit_cfg: &FitConfig) -> Result<CoverageReport> {
    fit_cfg.validate()?;
    let scenario = generate_scenario(cfg)?;
    let replicates: Vec<ReplicateRecord> =
        (0..cfg.replicates).into_par_iter().map(|k| run_replicate(&scenario, cfg, fit_cfg, k)).collect();
    let failures = replicates.iter().filter(|r| r.error.is_some()).count();
    let (m, p) = (cfg.m, cfg.p);
    let sandwich: Vec<&Vec<f64>> = replicates.iter().filter_map(|r| r.sandwich_z.as_ref()).collect();
    let fisher: Vec<&Vec<f64>> = replicates.iter().filter_map(|r| r.fisher_z.as_ref()).collect();
    Ok(CoverageReport {
        config: cfg.clone(),
        rho: scenario.rho,
        b_star: rows_of(&scenario.b_star),
        sigma_star: rows_of(&scenario.sigma_star),
        quantile: normal_quantile(1.0 - 0.5 * (1.0 - cfg.level)),
        sandwich: summarize(&sandwich, m, p, cfg.level)?,
        fisher: summarize(&fisher, m, p, cfg.level)?,
        replicates,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toeplitz_examples() {
        let s = toeplitz_covariance(2, 0.9);
        assert_eq!(s, DMatrix::from_row_slice(2, 2, &[2.0, 0.9, 0.9, 2.0]));
        let s = toeplitz_covariance(3, 0.9);
        assert_eq!(s[(0, 0)], 2.0);
        assert_eq!(s[(0, 1)], 0.9);
        assert!((s[(0, 2)] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn scenario_is_deterministic_and_one_hot() {
        let cfg = ScenarioConfig::new(300, 4, 3, 11);
        let a = generate_scenario(&cfg).unwrap();
        let b = generate_scenario(&cfg).unwrap();
        assert_eq!(a, b);
        assert!((RHO_RANGE.0..=RHO_RANGE.1).contains(&a.rho));
        for i in 0..300 {
            let row = a.design.row(i);
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.sum(), 1.0);
        }
        for c in 0..3 {
            let count = a.design.column(c).sum();
            // Binomial(300, 1/3): sd ≈ 8.2
            assert!((count - 100.0).abs() < 5.0 * 8.2, "column {c} has {count}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = ScenarioConfig { rho: Rho::Fixed(0.9), ..ScenarioConfig::new(50, 3, 2, 5) };
        let s = generate_scenario(&cfg).unwrap();
        assert_eq!(sample_counts(&s, 9).unwrap(), sample_counts(&s, 9).unwrap());
        assert_ne!(sample_counts(&s, 9).unwrap(), sample_counts(&s, 10).unwrap());
    }

    #[test]
    fn huge_rate_is_a_sampling_error() {
        let s = Scenario {
            b_star: DMatrix::from_element(1, 1, 40.0),
            sigma_star: DMatrix::from_element(1, 1, 1e-10),
            design: DMatrix::from_element(2, 1, 1.0),
            rho: 0.0,
        };
        assert!(matches!(sample_counts(&s, 1), Err(PlnError::Sampling { row: 0, col: 0, .. })));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = ScenarioConfig { rho: Rho::Fixed(1.0), ..ScenarioConfig::new(10, 2, 1, 0) };
        assert!(generate_scenario(&cfg).is_err());
        assert!(generate_scenario(&ScenarioConfig::new(0, 2, 1, 0)).is_err());
    }
}
