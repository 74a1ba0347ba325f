//! Normal distribution numerics, the one-sample Kolmogorov–Smirnov test and
//! the summary statistics of the simulation protocol.

use nalgebra::DMatrix;

use crate::error::{PlnError, Result};

/// `Φ(x)`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `Φ⁻¹(prob)` by Wichura's AS241 (PPND16), accurate to about 1e-16
/// relative. Returns ±∞ at the endpoints and NaN outside [0, 1].
#[allow(clippy::excessive_precision)] // coefficients as published
pub fn normal_quantile(prob: f64) -> f64 {
    if !(0.0..=1.0).contains(&prob) {
        return f64::NAN;
    }
    if prob == 0.0 {
        return f64::NEG_INFINITY;
    }
    if prob == 1.0 {
        return f64::INFINITY;
    }
    let q = prob - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num =
            ((((((2509.0809287301227 * r + 33430.575583588128) * r + 67265.7709270087) * r + 45921.95393154987) * r
                + 13731.693765509461)
                * r
                + 1971.5909503065514)
                * r
                + 133.14166789178438)
                * r
                + 3.3871328727963666;
        let den =
            ((((((5226.495278852546 * r + 28729.085735721943) * r + 39307.89580009271) * r + 21213.794301586597) * r
                + 5394.196021424751)
                * r
                + 687.1870074920579)
                * r
                + 42.31333070160091)
                * r
                + 1.0;
        return q * num / den;
    }
    let tail = if q < 0.0 { prob } else { 1.0 - prob };
    let mut r = (-tail.ln()).sqrt();
    let value = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745450142783414e-4 * r + 0.022723844989269184) * r + 0.2417807251774506) * r
            + 1.2704582524523684)
            * r
            + 3.6478483247632046)
            * r
            + 5.769497221460691)
            * r
            + 4.630337846156545)
            * r
            + 1.4234371107496836;
        let den = ((((((1.0507500716444168e-9 * r + 5.475938084995345e-4) * r + 0.015198666563616457) * r
            + 0.14810397642748008)
            * r
            + 0.6897673349851)
            * r
            + 1.6763848301838038)
            * r
            + 2.053191626637759)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010334399292288e-7 * r + 2.7115555687434876e-5) * r + 0.0012426609473880784) * r
            + 0.026532189526576124)
            * r
            + 0.2965605718285049)
            * r
            + 1.7848265399172913)
            * r
            + 5.463784911164114)
            * r
            + 6.657904643501103;
        let den = ((((((2.0442631033899398e-15 * r + 1.421511758316446e-7) * r + 1.8463183175100548e-5) * r
            + 7.868691311456133e-4)
            * r
            + 0.014875361290850615)
            * r
            + 0.1369298809227358)
            * r
            + 0.5998322065558879)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -value
    } else {
        value
    }
}

/// Kolmogorov survival function `Q(λ) = 2 Σ_{k≥1} (−1)^{k−1} e^{−2k²λ²}`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut total = 0.0;
    let mut sign = 1.0;
    for k in 1..=1000u32 {
        let kf = f64::from(k);
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        total += sign * term;
        if term < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * total).clamp(0.0, 1.0)
}

/// Result of a one-sample KS test against N(0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample KS test against N(0, 1); the p-value uses Stephens'
/// effective `λ = (√n + 0.12 + 0.11/√n) D`.
pub fn ks_pvalue_std_normal(samples: &[f64]) -> Result<KsTest> {
    if samples.is_empty() {
        return Err(PlnError::InvalidData("KS test needs at least one sample".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(PlnError::InvalidData("KS test samples must be finite".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let statistic = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            let above = (i as f64 + 1.0) / n - f;
            let below = f - i as f64 / n;
            above.max(below)
        })
        .fold(0.0_f64, f64::max);
    let sqrt_n = n.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * statistic;
    Ok(KsTest { statistic, p_value: kolmogorov_survival(lambda) })
}

/// Fraction of entries with `|v| ≤ Φ⁻¹(1 − (1 − level)/2)`.
pub fn coverage_rate<'a>(standardized: impl IntoIterator<Item = &'a f64>, level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(PlnError::InvalidConfig(format!("coverage level {level} is outside (0, 1)")));
    }
    let q = normal_quantile(1.0 - 0.5 * (1.0 - level));
    let (mut hits, mut total) = (0usize, 0usize);
    for v in standardized {
        total += 1;
        if v.abs() <= q {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(PlnError::InvalidData("coverage of an empty set".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// `(B̂ − B*) / √V̂`, elementwise.
pub fn standardize(estimate: &DMatrix<f64>, truth: &DMatrix<f64>, variance: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_same_shape(estimate, truth)?;
    check_same_shape(estimate, variance)?;
    if let Some(v) = variance.iter().find(|v| !(**v > 0.0)) {
        return Err(PlnError::ParameterDomain(format!("variance {v} is not positive")));
    }
    Ok(DMatrix::from_fn(estimate.nrows(), estimate.ncols(), |k, j| {
        (estimate[(k, j)] - truth[(k, j)]) / variance[(k, j)].sqrt()
    }))
}

/// Root mean squared elementwise difference.
pub fn rmse(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    check_same_shape(estimate, truth)?;
    if estimate.is_empty() {
        return Err(PlnError::Dimension("RMSE of empty matrices".into()));
    }
    let sq: f64 = estimate.iter().zip(truth.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq / estimate.len() as f64).sqrt())
}

fn check_same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(PlnError::Dimension(format!(
            "shapes {}x{} and {}x{} differ",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(())
}
