use nalgebra::{DMatrix, DVector};

use crate::error::{PlnError, Result};

/// Smallest accepted ratio between the extreme singular values of the
/// covariate matrix.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Observed counts `Y` (n×p), covariates `X` (n×m) and offsets `O` (n×p).
///
/// Counts are stored as `f64` but are guaranteed to be nonnegative integers.
/// The log-factorial constant `K(Y) = -Σ log(Y_ij!)` is computed once at
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CountDataset {
    counts: DMatrix<f64>,
    covariates: DMatrix<f64>,
    offsets: DMatrix<f64>,
    row_log_factorials: Vec<f64>,
    log_factorial_constant: f64,
}

/// One observation: row i of each of `Y`, `X` and `O`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub counts: DVector<f64>,
    pub covariates: DVector<f64>,
    pub offsets: DVector<f64>,
    /// `Σ_j log(Y_ij!)` for this row (note the sign: `K(Y_i)` is its negation).
    pub log_factorial: f64,
}

impl Observation {
    /// Builds a standalone observation, validating the counts.
    pub fn new(counts: DVector<f64>, covariates: DVector<f64>, offsets: DVector<f64>) -> Result<Self> {
        if counts.len() != offsets.len() {
            return Err(PlnError::Dimension(format!(
                "observation has {} counts but {} offsets",
                counts.len(),
                offsets.len()
            )));
        }
        for (j, &y) in counts.iter().enumerate() {
            check_count(y, 0, j)?;
        }
        let log_factorial = counts.iter().map(|&y| log_factorial(y)).sum();
        Ok(Self { counts, covariates, offsets, log_factorial })
    }

    pub fn p(&self) -> usize {
        self.counts.len()
    }

    pub fn m(&self) -> usize {
        self.covariates.len()
    }
}

fn log_factorial(y: f64) -> f64 {
    if y < 2.0 {
        0.0
    } else {
        libm::lgamma(y + 1.0)
    }
}

fn check_count(y: f64, row: usize, col: usize) -> Result<()> {
    if !y.is_finite() || y < 0.0 || y.fract() != 0.0 {
        return Err(PlnError::InvalidData(format!("count at ({row}, {col}) is {y}, expected a nonnegative integer")));
    }
    Ok(())
}

impl CountDataset {
    /// Validates and builds a dataset. Missing offsets default to zero.
    pub fn new(counts: DMatrix<f64>, covariates: DMatrix<f64>, offsets: Option<DMatrix<f64>>) -> Result<Self> {
        let (n, p) = counts.shape();
        let m = covariates.ncols();
        if n == 0 || p == 0 || m == 0 {
            return Err(PlnError::Dimension(format!("dataset needs n, p, m >= 1 (got n={n}, p={p}, m={m})")));
        }
        if covariates.nrows() != n {
            return Err(PlnError::Dimension(format!(
                "counts have {n} rows but covariates have {}",
                covariates.nrows()
            )));
        }
        let offsets = offsets.unwrap_or_else(|| DMatrix::zeros(n, p));
        if offsets.shape() != (n, p) {
            return Err(PlnError::Dimension(format!(
                "offsets are {}x{}, expected {n}x{p}",
                offsets.nrows(),
                offsets.ncols()
            )));
        }
        for j in 0..p {
            for i in 0..n {
                check_count(counts[(i, j)], i, j)?;
            }
        }
        if let Some((i, j)) = first_non_finite(&covariates) {
            return Err(PlnError::InvalidData(format!("covariate at ({i}, {j}) is not finite")));
        }
        if let Some((i, j)) = first_non_finite(&offsets) {
            return Err(PlnError::InvalidData(format!("offset at ({i}, {j}) is not finite")));
        }
        check_full_rank(&covariates)?;

        let row_log_factorials: Vec<f64> =
            (0..n).map(|i| (0..p).map(|j| log_factorial(counts[(i, j)])).sum()).collect();
        let log_factorial_constant = -row_log_factorials.iter().sum::<f64>();
        Ok(Self { counts, covariates, offsets, row_log_factorials, log_factorial_constant })
    }

    pub fn n(&self) -> usize {
        self.counts.nrows()
    }

    pub fn p(&self) -> usize {
        self.counts.ncols()
    }

    pub fn m(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn counts(&self) -> &DMatrix<f64> {
        &self.counts
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn offsets(&self) -> &DMatrix<f64> {
        &self.offsets
    }

    /// `K(Y) = -Σ_ij log(Y_ij!)`.
    pub fn log_factorial_constant(&self) -> f64 {
        self.log_factorial_constant
    }

    pub fn row_log_factorial(&self, i: usize) -> f64 {
        self.row_log_factorials[i]
    }

    pub fn observation(&self, i: usize) -> Observation {
        Observation {
            counts: self.counts.row(i).transpose(),
            covariates: self.covariates.row(i).transpose(),
            offsets: self.offsets.row(i).transpose(),
            log_factorial: self.row_log_factorials[i],
        }
    }

    /// Same covariates and offsets with different counts.
    pub fn with_counts(&self, counts: DMatrix<f64>) -> Result<Self> {
        Self::new(counts, self.covariates.clone(), Some(self.offsets.clone()))
    }

    /// The dataset stacked `copies` times, block-wise.
    pub fn repeated(&self, copies: usize) -> Result<Self> {
        let stack = |mat: &DMatrix<f64>| {
            let (n, c) = mat.shape();
            DMatrix::from_fn(n * copies, c, |i, j| mat[(i % n, j)])
        };
        Self::new(stack(&self.counts), stack(&self.covariates), Some(stack(&self.offsets)))
    }
}

fn first_non_finite(mat: &DMatrix<f64>) -> Option<(usize, usize)> {
    let (n, c) = mat.shape();
    (0..c).flat_map(|j| (0..n).map(move |i| (i, j))).find(|&(i, j)| !mat[(i, j)].is_finite())
}

fn check_full_rank(x: &DMatrix<f64>) -> Result<()> {
    if x.nrows() < x.ncols() {
        return Err(PlnError::RankDeficient { ratio: 0.0 });
    }
    // X = QR, and R (m×m) carries the singular values of X.
    let r = x.clone().qr().r();
    let sv = r.singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let ratio = if max > 0.0 { min / max } else { 0.0 };
    if ratio < RANK_TOLERANCE {
        return Err(PlnError::RankDeficient { ratio });
    }
    Ok(())
}
