//! Small dense linear-algebra helpers shared by the fitting and variance code.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{PlnError, Result};

/// Rows handled by one task in [`chunked_sum`]. Fixed so the reduction tree
/// does not depend on the number of worker threads.
pub(crate) const ROW_CHUNK: usize = 64;

/// Inverse of a matrix expected to be SPD. Falls back to LU when the
/// Cholesky factorization fails; a singular matrix is an error.
pub fn spd_inverse(mat: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    if let Some(chol) = mat.clone().cholesky() {
        return Ok(chol.inverse());
    }
    mat.clone()
        .lu()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| PlnError::LinearAlgebra(format!("{context}: matrix is singular")))
}

/// Solves `mat * x = rhs` for SPD `mat`, with LU fallback.
pub fn spd_solve(mat: &DMatrix<f64>, rhs: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    if let Some(chol) = mat.clone().cholesky() {
        return Ok(chol.solve(rhs));
    }
    mat.clone()
        .lu()
        .solve(rhs)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| PlnError::LinearAlgebra(format!("{context}: matrix is singular")))
}

/// `log|mat|` for SPD `mat`, `None` if the Cholesky factorization fails.
pub fn spd_log_det(mat: &DMatrix<f64>) -> Option<f64> {
    let chol = mat.clone().cholesky()?;
    let l = chol.l_dirty();
    Some(2.0 * (0..mat.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>())
}

/// Symmetrizes in place: `(A + Aᵀ)/2`.
pub fn symmetrize(mat: &mut DMatrix<f64>) {
    let n = mat.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (mat[(i, j)] + mat[(j, i)]);
            mat[(i, j)] = v;
            mat[(j, i)] = v;
        }
    }
}

/// Adds `outer ⊗ (x xᵀ)` scaled by `scale` into `acc`, with `outer` p×p and
/// `x` of length m. `acc` is indexed with the column-major vec convention of
/// an m×p matrix: entry (k, j) sits at `j*m + k`.
pub fn add_kron_outer(acc: &mut DMatrix<f64>, outer: &DMatrix<f64>, x: &[f64], scale: f64) {
    let m = x.len();
    let p = outer.nrows();
    debug_assert_eq!(acc.nrows(), m * p);
    for j2 in 0..p {
        for k2 in 0..m {
            let xk2 = x[k2];
            if xk2 == 0.0 {
                continue;
            }
            let col = j2 * m + k2;
            for j1 in 0..p {
                let o = scale * outer[(j1, j2)] * xk2;
                if o == 0.0 {
                    continue;
                }
                let base = j1 * m;
                for (k1, &xk1) in x.iter().enumerate() {
                    acc[(base + k1, col)] += o * xk1;
                }
            }
        }
    }
}

/// Dense Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    DMatrix::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

/// Largest absolute entry.
pub fn max_abs<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    values.into_iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Neumaier compensated summation.
#[derive(Debug, Default, Clone, Copy)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.carry += (self.sum - t) + value;
        } else {
            self.carry += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::default();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

/// Chunk totals held in memory at once by [`chunked_sum`].
const CHUNKS_PER_BATCH: usize = 8;

/// Sums per-row matrix contributions over `0..n` in parallel. Rows are
/// grouped into fixed-size chunks, each chunk is summed sequentially and the
/// chunk totals are added in chunk order, so the result is bitwise identical
/// for any thread count. Chunks run in batches, which caps the working set at
/// `CHUNKS_PER_BATCH + 1` accumulators whatever `n` is.
pub(crate) fn chunked_sum<F>(n: usize, rows: usize, cols: usize, f: F) -> Result<DMatrix<f64>>
where
    F: Fn(usize, &mut DMatrix<f64>) -> Result<()> + Sync,
{
    let n_chunks = n.div_ceil(ROW_CHUNK);
    let mut total = DMatrix::zeros(rows, cols);
    for batch in (0..n_chunks).step_by(CHUNKS_PER_BATCH) {
        let partials: Vec<DMatrix<f64>> = (batch..(batch + CHUNKS_PER_BATCH).min(n_chunks))
            .into_par_iter()
            .map(|c| {
                let mut acc = DMatrix::zeros(rows, cols);
                for i in (c * ROW_CHUNK)..((c + 1) * ROW_CHUNK).min(n) {
                    f(i, &mut acc)?;
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        for part in &partials {
            total += part;
        }
    }
    Ok(total)
}
