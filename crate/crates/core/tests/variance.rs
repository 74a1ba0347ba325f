mod oracles;

use nalgebra::{DMatrix, DVector};
use oracles::{max_rel_err, random_instance, scalar_observation, scalar_row, schur_complement_cn};
use pln_core::variance::fisher_blocks;
use pln_core::{
    compute_a_tilde, compute_cn, compute_dn, fisher_variance, hess_variational, inverse_variational_hessian,
    sandwich_variance, CountDataset, ModelParams, SandwichWorkspace, VariationalParams,
};
use proptest::prelude::*;

fn duplicated(inst: &oracles::Instance) -> (VariationalParams, CountDataset) {
    let data = inst.data.repeated(2).unwrap();
    let stack = |mat: &DMatrix<f64>| {
        let n = mat.nrows();
        DMatrix::from_fn(2 * n, mat.ncols(), |i, j| mat[(i % n, j)])
    };
    let vpar = VariationalParams::new(stack(inst.vpar.means()), stack(inst.vpar.sdevs())).unwrap();
    (vpar, data)
}

#[test]
fn closed_form_inverse_hessian_at_seeded_points() {
    for seed in 0..10u64 {
        let p = 1 + (seed as usize % 8);
        let inst = random_instance(500 + seed, 3, p, 2);
        for i in 0..3 {
            let row = inst.vpar.row(i);
            let obs = inst.data.observation(i);
            let ws = SandwichWorkspace::new(&inst.theta, &row, &obs).unwrap();
            let inv = inverse_variational_hessian(&ws);
            let h = hess_variational(&inst.theta, &row, &obs).unwrap().assembled;
            let id_err = (&inv * &h - DMatrix::identity(2 * p, 2 * p)).amax();
            assert!(id_err <= 1e-8, "seed {seed} row {i}: |H⁻¹H − I| = {id_err:.3e}");
            let numeric = h.lu().try_inverse().unwrap();
            assert!((&inv - numeric).amax() <= 1e-8);
            assert!(ws.g.iter().all(|&g| (0.0..1.0).contains(&g)));
        }
    }
}

#[test]
fn scalar_inverse_hessian_matches_explicit_two_by_two() {
    let theta = ModelParams::from_precision(DMatrix::zeros(1, 1), DMatrix::identity(1, 1)).unwrap();
    let (row, obs) = (scalar_row(0.0, 1.0), scalar_observation(0.0, 1.0, 0.0));
    let h = hess_variational(&theta, &row, &obs).unwrap().assembled;
    let a = 0.5f64.exp();
    let expected_h = DMatrix::from_row_slice(2, 2, &[-(a + 1.0), -a, -a, -(2.0 * a + 2.0)]);
    assert!((&h - &expected_h).amax() < 1e-14);
    assert!((h[(0, 0)] + 2.6487).abs() < 1e-4 && (h[(1, 1)] + 5.2974).abs() < 1e-4);
    let det = h[(0, 0)] * h[(1, 1)] - h[(0, 1)] * h[(1, 0)];
    let explicit = DMatrix::from_row_slice(2, 2, &[h[(1, 1)], -h[(0, 1)], -h[(1, 0)], h[(0, 0)]]) / det;
    let ws = SandwichWorkspace::new(&theta, &row, &obs).unwrap();
    assert!((inverse_variational_hessian(&ws) - explicit).amax() < 1e-12);
}

#[test]
fn small_sdev_limit_of_the_inverse() {
    let omega = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.5, 0.7, 2.0]));
    let theta = ModelParams::from_precision(DMatrix::from_row_slice(1, 3, &[0.2, -0.1, 0.4]), omega.clone()).unwrap();
    let row =
        pln_core::VariationalRow::new(DVector::from_column_slice(&[0.1, 0.0, -0.3]), DVector::from_element(3, 1e-7))
            .unwrap();
    let obs = pln_core::Observation::new(
        DVector::from_column_slice(&[1.0, 0.0, 4.0]),
        DVector::from_element(1, 1.0),
        DVector::zeros(3),
    )
    .unwrap();
    let ws = SandwichWorkspace::new(&theta, &row, &obs).unwrap();
    assert!(ws.lambda.amax() < 1e-12);
    let inv = inverse_variational_hessian(&ws);
    let limit = -(DMatrix::from_diagonal(&ws.a_tilde) + omega).try_inverse().unwrap();
    assert!((inv.view((0, 0), (3, 3)) - limit).amax() < 1e-10);
}

#[test]
fn closed_form_cn_matches_schur_complement_at_seeded_points() {
    for seed in 0..10u64 {
        let p = 1 + (seed as usize % 8);
        let m = 1 + (seed as usize % 3);
        let n = 5 + (seed as usize * 7) % 16;
        let inst = random_instance(900 + seed, n, p, m);
        let closed = compute_cn(&inst.theta, &inst.vpar, &inst.data).unwrap();
        let brute = schur_complement_cn(&inst.theta, &inst.vpar, &inst.data);
        let err = max_rel_err(closed.as_slice(), brute.as_slice());
        assert!(err <= 1e-6, "seed {seed}: relative error {err:.3e}");
    }
}

#[test]
fn closed_form_cn_on_the_reference_instance() {
    let inst = random_instance(46, 6, 4, 2);
    let closed = compute_cn(&inst.theta, &inst.vpar, &inst.data).unwrap();
    let brute = schur_complement_cn(&inst.theta, &inst.vpar, &inst.data);
    for (c, b) in closed.iter().zip(brute.iter()) {
        assert!((c - b).abs() <= 1e-6 * b.abs().max(1e-12), "{c} vs {b}");
    }
    assert!((-&closed).cholesky().is_some());
}

#[test]
fn workspace_route_to_curvature_agrees() {
    let inst = random_instance(77, 1, 5, 1);
    let cn = compute_cn(&inst.theta, &inst.vpar, &inst.data).unwrap();
    let ws = SandwichWorkspace::new(&inst.theta, &inst.vpar.row(0), &inst.data.observation(0)).unwrap();
    let x = inst.data.covariates()[(0, 0)];
    let via_e = ws.curvature() * (-x * x);
    assert!((cn - via_e).amax() < 1e-12);
}

#[test]
fn cn_ignores_counts_at_fixed_parameters() {
    let inst = random_instance(3, 8, 3, 2);
    let other = inst.data.with_counts(inst.data.counts().map(|y| y + 5.0)).unwrap();
    assert_eq!(
        compute_cn(&inst.theta, &inst.vpar, &inst.data).unwrap(),
        compute_cn(&inst.theta, &inst.vpar, &other).unwrap()
    );
}

#[test]
fn dn_is_symmetric_psd_with_bounded_rank() {
    for (seed, n) in [(1u64, 3usize), (2, 5), (3, 40)] {
        let inst = random_instance(seed, n, 3, 2);
        let d = compute_dn(&inst.theta, &inst.vpar, &inst.data).unwrap();
        assert_eq!(d, d.transpose());
        let eig = d.clone().symmetric_eigen();
        let max = eig.eigenvalues.amax();
        assert!(eig.eigenvalues.iter().all(|&v| v >= -1e-12 * max));
        let sv = d.singular_values();
        let rank = sv.iter().filter(|&&v| v > 1e-10 * sv.max()).count();
        assert!(rank <= n.min(6), "n={n}: rank {rank}");
    }
}

#[test]
fn dn_vanishes_at_zero_residuals() {
    let s: f64 = 1e-9;
    let b = 3f64.ln() - 0.5 * s * s;
    let theta = ModelParams::from_precision(DMatrix::from_element(1, 1, b), DMatrix::identity(1, 1)).unwrap();
    let vpar = VariationalParams::new(DMatrix::zeros(4, 1), DMatrix::from_element(4, 1, s)).unwrap();
    let data = CountDataset::new(DMatrix::from_element(4, 1, 3.0), DMatrix::from_element(4, 1, 1.0), None).unwrap();
    assert!(compute_dn(&theta, &vpar, &data).unwrap().amax() < 1e-20);
}

#[test]
fn duplicating_rows_keeps_bread_and_meat_and_halves_variances() {
    let inst = random_instance(12, 30, 3, 2);
    let (vpar2, data2) = duplicated(&inst);
    let (c1, c2) =
        (compute_cn(&inst.theta, &inst.vpar, &inst.data).unwrap(), compute_cn(&inst.theta, &vpar2, &data2).unwrap());
    assert!(max_rel_err(c2.as_slice(), c1.as_slice()) < 1e-12);
    let (d1, d2) =
        (compute_dn(&inst.theta, &inst.vpar, &inst.data).unwrap(), compute_dn(&inst.theta, &vpar2, &data2).unwrap());
    assert!(max_rel_err(d2.as_slice(), d1.as_slice()) < 1e-12);

    let s1 = sandwich_variance(&inst.theta, &inst.vpar, &inst.data, 0.95).unwrap();
    let s2 = sandwich_variance(&inst.theta, &vpar2, &data2, 0.95).unwrap();
    assert!(max_rel_err((s1.var_b() * 0.5).as_slice(), s2.var_b().as_slice()) < 1e-10);
    let f1 = fisher_variance(&inst.theta, &inst.vpar, &inst.data, 0.95).unwrap();
    let f2 = fisher_variance(&inst.theta, &vpar2, &data2, 0.95).unwrap();
    assert!(max_rel_err((f1.var_b() * 0.5).as_slice(), f2.var_b().as_slice()) < 1e-12);
}

#[test]
fn scaling_the_covariate_rescales_the_sandwich() {
    let theta = ModelParams::from_precision(DMatrix::from_element(1, 1, 0.3), DMatrix::identity(1, 1)).unwrap();
    let vpar = VariationalParams::new(
        DMatrix::from_column_slice(3, 1, &[0.1, -0.2, 0.4]),
        DMatrix::from_column_slice(3, 1, &[0.6, 0.8, 0.5]),
    )
    .unwrap();
    let counts = DMatrix::from_column_slice(3, 1, &[1.0, 4.0, 0.0]);
    let base = CountDataset::new(counts.clone(), DMatrix::from_element(3, 1, 1.0), None).unwrap();
    let v1 = sandwich_variance(&theta, &vpar, &base, 0.95).unwrap().var_b()[(0, 0)];
    for c in [2.0, -0.5, 3.0] {
        // Keep x_iᵀB unchanged so Ã is the same.
        let theta_c = theta.with_regression(theta.regression() / c).unwrap();
        let scaled = CountDataset::new(counts.clone(), DMatrix::from_element(3, 1, c), None).unwrap();
        let vc = sandwich_variance(&theta_c, &vpar, &scaled, 0.95).unwrap().var_b()[(0, 0)];
        assert!((vc * c * c - v1).abs() < 1e-12 * v1, "c = {c}");
    }
}

#[test]
fn fisher_blocks_are_spd_and_confidence_intervals_are_exact() {
    let inst = random_instance(31, 25, 4, 3);
    let blocks = fisher_blocks(&inst.theta, &inst.vpar, &inst.data).unwrap();
    assert!(blocks.b_blocks().iter().all(|b| b.clone().cholesky().is_some()));
    for report in [
        fisher_variance(&inst.theta, &inst.vpar, &inst.data, 0.9).unwrap(),
        sandwich_variance(&inst.theta, &inst.vpar, &inst.data, 0.9).unwrap(),
    ] {
        let q = report.quantile();
        assert!((q - 1.6448536269514722).abs() < 1e-12);
        for idx in 0..report.var_b().len() {
            let (b, v) = (report.estimate().as_slice()[idx], report.var_b().as_slice()[idx]);
            assert!(v > 0.0);
            assert_eq!(report.ci_lower().as_slice()[idx], b - q * v.sqrt());
            assert_eq!(report.ci_upper().as_slice()[idx], b + q * v.sqrt());
            assert!(report.ci_lower().as_slice()[idx] < report.ci_upper().as_slice()[idx]);
        }
    }
}

#[test]
fn fisher_blocks_match_weighted_gram_matrix() {
    let inst = random_instance(8, 10, 2, 2);
    let a = compute_a_tilde(&inst.theta, &inst.vpar, &inst.data).unwrap();
    let blocks = fisher_blocks(&inst.theta, &inst.vpar, &inst.data).unwrap();
    let x = inst.data.covariates();
    for j in 0..2 {
        let mut expected = DMatrix::zeros(2, 2);
        for i in 0..10 {
            let xi = x.row(i).transpose();
            expected += &xi * xi.transpose() * a.values()[(i, j)];
        }
        assert!(max_rel_err(blocks.b_blocks()[j].as_slice(), expected.as_slice()) < 1e-13);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cn_matches_schur_complement(seed in any::<u64>(), n in 2usize..12, p in 1usize..7, m in 1usize..3) {
        let inst = random_instance(seed, n.max(m), p, m);
        let closed = compute_cn(&inst.theta, &inst.vpar, &inst.data).unwrap();
        let brute = schur_complement_cn(&inst.theta, &inst.vpar, &inst.data);
        prop_assert!(max_rel_err(closed.as_slice(), brute.as_slice()) <= 1e-6);
    }

    #[test]
    fn inverse_hessian_is_exact(seed in any::<u64>(), p in 1usize..9) {
        let inst = random_instance(seed, 1, p, 1);
        let (row, obs) = (inst.vpar.row(0), inst.data.observation(0));
        let ws = SandwichWorkspace::new(&inst.theta, &row, &obs).unwrap();
        let h = hess_variational(&inst.theta, &row, &obs).unwrap().assembled;
        prop_assert!((inverse_variational_hessian(&ws) * h - DMatrix::identity(2 * p, 2 * p)).amax() <= 1e-8);
    }
}
