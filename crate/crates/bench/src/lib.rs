//! Shared fixtures for the criterion benchmarks.

use pln_core::sim::replicate_dataset;
use pln_core::{generate_scenario, init_params, CountDataset, ModelParams, ScenarioConfig, VariationalParams};

/// A simulated dataset with the least-squares starting point. Variance
/// routines cost the same at any (θ, ψ), so no fit is needed.
pub struct Fixture {
    pub data: CountDataset,
    pub theta: ModelParams,
    pub vpar: VariationalParams,
}

pub fn fixture(n: usize, p: usize, m: usize, seed: u64) -> Fixture {
    let scenario = generate_scenario(&ScenarioConfig::new(n, p, m, seed)).expect("valid scenario");
    let data = replicate_dataset(&scenario, seed, 0).expect("sampling succeeds");
    let (theta, vpar) = init_params(&data).expect("full-rank design");
    Fixture { data, theta, vpar }
}
