//! Repairing a matrix logarithm into a generator.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::EstimatorError;
use crate::markov::{generator_defects, GeneratorMatrix};
use crate::matfun::SquareMatrix;

/// How the row sums are restored after negative off-diagonals are zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegMode {
    /// Reset the diagonal to minus the off-diagonal row sum.
    Diagonal,
    /// Spread the row-sum excess over the row in proportion to `|b_ij|`.
    #[default]
    Weighted,
}

// Rows whose sum is within a few ulps of their absolute mass are already
// balanced and are left as they are, which makes both modes idempotent.
const BALANCED_ULPS: f64 = 64.0 * f64::EPSILON;

/// Zeroes negative off-diagonal entries, then balances each row according
/// to `mode`.
///
/// If the result still violates the generator conditions beyond `1e-12`
/// (possible only through rounding in weighted mode) the call returns
/// [`EstimatorError::NotGenerator`] and callers fall back to
/// [`RegMode::Diagonal`].
pub fn regularize_generator(b: &SquareMatrix, mode: RegMode) -> Result<GeneratorMatrix, EstimatorError> {
    let n = b.dim();
    let mut out: DMatrix<f64> = b.as_matrix().clone();
    for i in 0..n {
        for j in 0..n {
            if i != j && out[(i, j)] < 0.0 {
                out[(i, j)] = 0.0;
            }
        }
    }
    for i in 0..n {
        let sum: f64 = out.row(i).iter().sum();
        let mass: f64 = out.row(i).iter().map(|x| x.abs()).sum();
        if sum.abs() <= BALANCED_ULPS * mass {
            continue;
        }
        match mode {
            RegMode::Diagonal => {
                let off: f64 = (0..n).filter(|&j| j != i).map(|j| out[(i, j)]).sum();
                out[(i, i)] = -off;
            }
            RegMode::Weighted => {
                if mass == 0.0 {
                    continue;
                }
                let shrink = sum / mass;
                for j in 0..n {
                    let x = out[(i, j)];
                    out[(i, j)] = x - x.abs() * shrink;
                }
                // When most of the row cancels, the rounding left in the sum
                // is relative to the old row, not the new one. Moving it onto
                // the diagonal keeps a second pass from touching the row.
                let residual: f64 = out.row(i).iter().sum();
                out[(i, i)] -= residual;
            }
        }
    }
    if !generator_defects(&out, 1e-12, 1e-12).is_empty() {
        return Err(EstimatorError::NotGenerator);
    }
    Ok(GeneratorMatrix::from_matrix_unchecked(out))
}

/// Weighted regularization, falling back to the diagonal mode when it fails.
/// Returns the generator and the mode actually used.
pub(crate) fn regularize_with_fallback(
    b: &SquareMatrix,
    mode: RegMode,
) -> Result<(GeneratorMatrix, RegMode), EstimatorError> {
    match regularize_generator(b, mode) {
        Ok(g) => Ok((g, mode)),
        Err(EstimatorError::NotGenerator) if mode == RegMode::Weighted => {
            regularize_generator(b, RegMode::Diagonal).map(|g| (g, RegMode::Diagonal))
        }
        Err(e) => Err(e),
    }
}
