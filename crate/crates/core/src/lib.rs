//! Poisson-Log-Normal regression by variational EM, with Sandwich and
//! variational Fisher variances for the regression coefficients.

// `!(x <= limit)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod elbo;
pub mod error;
pub mod fit;
pub mod linalg;
pub mod params;
pub mod sim;
pub mod stats;
pub mod variance;

pub use data::{CountDataset, Observation};
pub use elbo::{
    compute_a_tilde, elbo_single, elbo_total, grad_model, grad_variational, hess_variational, single_obs_b_derivatives,
    ATilde, BDerivatives, VariationalHessianBlocks,
};
pub use error::{PlnError, Result};
pub use fit::{fit, fit_from, init_params, profile_vpar, update_sigma, FitConfig, FitResult, ProfiledRow};
pub use params::{vec_index, ModelParams, VariationalParams, VariationalRow};
pub use sim::{
    generate_scenario, run_coverage_experiment, sample_counts, CoverageReport, Rho, Scenario, ScenarioConfig,
};
pub use variance::{
    compute_cn, compute_dn, fisher_variance, inverse_variational_hessian, sandwich_variance, FisherBlocks,
    SandwichWorkspace, VarianceMethod, VarianceReport,
};

pub use nalgebra::{DMatrix, DVector};
