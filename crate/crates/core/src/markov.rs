//! Transition matrices, generators, covariates and the covariate link model.

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::matfun::{MatFunError, SquareMatrix};

/// Entries may dip below 0 or above 1 by at most this much.
pub const ENTRY_TOL: f64 = 1e-12;
/// Row sums of stochastic matrices and generators hold to this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowDefect {
    pub row: usize,
    /// Row sum minus its target (1 for stochastic, 0 for generators).
    pub sum_deviation: f64,
    /// Worst entry-level violation in the row, 0 if none.
    pub entry_violation: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error("not a stochastic matrix: {}", describe(.0))]
    NotStochastic(Vec<RowDefect>),
    #[error("not a generator matrix: {}", describe(.0))]
    NotGenerator(Vec<RowDefect>),
    #[error(transparent)]
    Matrix(#[from] MatFunError),
    #[error("covariate point has {got} continuous components, expected {expected}")]
    CovariateDim { expected: usize, got: usize },
}

fn describe(rows: &[RowDefect]) -> String {
    rows.iter()
        .map(|d| format!("row {} (sum off by {:.3e}, entry off by {:.3e})", d.row, d.sum_deviation, d.entry_violation))
        .collect::<Vec<_>>()
        .join("; ")
}

/// JSON shape of every matrix literal: `{"dim": S, "rows": [[...], ...]}`.
#[derive(Serialize, Deserialize)]
struct MatrixLiteral {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

fn literal_of(m: &DMatrix<f64>) -> MatrixLiteral {
    MatrixLiteral { dim: m.nrows(), rows: (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect() }
}

fn matrix_of<E: serde::de::Error>(lit: MatrixLiteral) -> Result<SquareMatrix, E> {
    if lit.rows.len() != lit.dim {
        return Err(E::custom(format!("dim is {} but {} rows given", lit.dim, lit.rows.len())));
    }
    SquareMatrix::from_rows(&lit.rows).map_err(E::custom)
}

/// Row-stochastic square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix(DMatrix<f64>);

impl StochasticMatrix {
    /// Validates at the type's own tolerances.
    pub fn new(m: SquareMatrix) -> Result<Self, MarkovError> {
        validate_stochastic(&m, ROW_SUM_TOL)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MarkovError> {
        Self::new(SquareMatrix::from_rows(rows)?)
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn to_square(&self) -> SquareMatrix {
        SquareMatrix::new(self.0.clone()).expect("stochastic matrices are valid square matrices")
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.0.row(i).iter().copied().collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim()).map(|i| self.row(i)).collect()
    }
}

impl std::ops::Index<(usize, usize)> for StochasticMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

impl Serialize for StochasticMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        literal_of(&self.0).serialize(s)
    }
}

impl<'de> Deserialize<'de> for StochasticMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let m = matrix_of(MatrixLiteral::deserialize(d)?)?;
        StochasticMatrix::new(m).map_err(serde::de::Error::custom)
    }
}

/// Accepts `m` as stochastic at tolerance `tol`.
///
/// Entries in `[−tol, 0)` are clamped to zero and rows whose sum is within
/// `tol` of one are rescaled to sum to one. Anything further off is
/// rejected with one [`RowDefect`] per offending row.
pub fn validate_stochastic(m: &SquareMatrix, tol: f64) -> Result<StochasticMatrix, MarkovError> {
    let n = m.dim();
    let mut out = m.as_matrix().clone();
    let mut defects = Vec::new();
    for i in 0..n {
        let mut entry_violation = 0.0_f64;
        for j in 0..n {
            let x = out[(i, j)];
            if x < 0.0 {
                if x < -tol {
                    entry_violation = entry_violation.max(-x);
                } else {
                    out[(i, j)] = 0.0;
                }
            } else if x > 1.0 + tol {
                entry_violation = entry_violation.max(x - 1.0);
            }
        }
        let sum: f64 = out.row(i).iter().sum();
        let deviation = sum - 1.0;
        if entry_violation > 0.0 || deviation.abs() > tol {
            defects.push(RowDefect { row: i, sum_deviation: deviation, entry_violation });
            continue;
        }
        if deviation != 0.0 {
            for j in 0..n {
                out[(i, j)] /= sum;
            }
        }
        for j in 0..n {
            out[(i, j)] = out[(i, j)].min(1.0);
        }
    }
    if defects.is_empty() {
        Ok(StochasticMatrix(out))
    } else {
        Err(MarkovError::NotStochastic(defects))
    }
}

/// `P^ℓ` by repeated multiplication.
pub fn matrix_power(p: &StochasticMatrix, ell: usize) -> StochasticMatrix {
    assert!(ell >= 1, "matrix_power needs ell >= 1");
    let mut acc = p.0.clone();
    for _ in 1..ell {
        acc = &acc * &p.0;
    }
    StochasticMatrix(acc)
}

/// Matrix with nonnegative off-diagonal entries and zero row sums.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix(DMatrix<f64>);

impl GeneratorMatrix {
    pub fn new(m: SquareMatrix) -> Result<Self, MarkovError> {
        Self::with_tolerance(m, ENTRY_TOL, ROW_SUM_TOL)
    }

    pub fn with_tolerance(m: SquareMatrix, entry_tol: f64, row_tol: f64) -> Result<Self, MarkovError> {
        let defects = generator_defects(m.as_matrix(), entry_tol, row_tol);
        if defects.is_empty() {
            Ok(Self(m.into_inner()))
        } else {
            Err(MarkovError::NotGenerator(defects))
        }
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn to_square(&self) -> SquareMatrix {
        SquareMatrix::new(self.0.clone()).expect("generators are valid square matrices")
    }

    /// `G / ℓ`, again a generator.
    pub fn divide(&self, ell: f64) -> GeneratorMatrix {
        assert!(ell > 0.0);
        GeneratorMatrix(&self.0 / ell)
    }

    pub(crate) fn from_matrix_unchecked(m: DMatrix<f64>) -> Self {
        Self(m)
    }
}

impl Serialize for GeneratorMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        literal_of(&self.0).serialize(s)
    }
}

impl<'de> Deserialize<'de> for GeneratorMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let m = matrix_of(MatrixLiteral::deserialize(d)?)?;
        GeneratorMatrix::new(m).map_err(serde::de::Error::custom)
    }
}

/// Rows of `m` violating the generator conditions at the given tolerances.
pub fn generator_defects(m: &DMatrix<f64>, entry_tol: f64, row_tol: f64) -> Vec<RowDefect> {
    let n = m.nrows();
    let mut defects = Vec::new();
    for i in 0..n {
        let mut violation = 0.0_f64;
        for j in 0..n {
            let x = m[(i, j)];
            if i == j {
                violation = violation.max(x - entry_tol);
            } else {
                violation = violation.max(-x - entry_tol);
            }
        }
        let sum: f64 = m.row(i).iter().sum();
        if violation > 0.0 || sum.abs() > row_tol {
            defects.push(RowDefect { row: i, sum_deviation: sum, entry_violation: violation.max(0.0) });
        }
    }
    defects
}

/// Covariate value `z = (z_c, z_d)`: continuous components and a discrete
/// value encoded as a tuple of small integers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CovariatePoint {
    #[serde(default)]
    pub continuous: Vec<f64>,
    #[serde(default)]
    pub discrete: Vec<u32>,
}

impl CovariatePoint {
    pub fn new(continuous: Vec<f64>, discrete: Vec<u32>) -> Self {
        Self { continuous, discrete }
    }

    /// The point carrying no covariates; smoothing against it is a no-op.
    pub fn unconditional() -> Self {
        Self::default()
    }

    pub fn is_unconditional(&self) -> bool {
        self.continuous.is_empty() && self.discrete.is_empty()
    }
}

/// Scalar index of the covariates fed to the link model.
pub trait CovariateIndex {
    fn eval(&self, z: &CovariatePoint) -> f64;
}

/// Declared scalar covariate index
/// `ψ(z) = c₀ + Σ a_k z_c,k + Σ g_d z_d,d + Σ_k Σ_d b_kd z_c,k z_d,d`.
///
/// Missing coefficients count as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Psi {
    Constant {
        value: f64,
    },
    Bilinear {
        #[serde(default)]
        intercept: f64,
        #[serde(default)]
        continuous: Vec<f64>,
        #[serde(default)]
        discrete: Vec<f64>,
        /// `interaction[k][d]` multiplies `z_c,k · z_d,d`.
        #[serde(default)]
        interaction: Vec<Vec<f64>>,
    },
}

impl Psi {
    /// `3 z_c (1.2 z_d + 0.8 (1 − z_d)) = 2.4 z_c + 1.2 z_c z_d`, the index
    /// used by the reference simulation design.
    pub fn reference() -> Self {
        Psi::Bilinear { intercept: 0.0, continuous: vec![2.4], discrete: vec![0.0], interaction: vec![vec![1.2]] }
    }
}

impl CovariateIndex for Psi {
    fn eval(&self, z: &CovariatePoint) -> f64 {
        match self {
            Psi::Constant { value } => *value,
            Psi::Bilinear { intercept, continuous, discrete, interaction } => {
                let zc = |k: usize| z.continuous.get(k).copied().unwrap_or(0.0);
                let zd = |d: usize| z.discrete.get(d).copied().unwrap_or(0) as f64;
                let mut acc = *intercept;
                acc += continuous.iter().enumerate().map(|(k, a)| a * zc(k)).sum::<f64>();
                acc += discrete.iter().enumerate().map(|(d, g)| g * zd(d)).sum::<f64>();
                for (k, row) in interaction.iter().enumerate() {
                    for (d, b) in row.iter().enumerate() {
                        acc += b * zc(k) * zd(d);
                    }
                }
                acc
            }
        }
    }
}

/// Softmax link `P(z)_ij ∝ exp(p_ij ψ(z))` over a base stochastic matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkModel<I = Psi> {
    pub base: StochasticMatrix,
    pub psi: I,
}

impl<I: CovariateIndex> LinkModel<I> {
    pub fn new(base: StochasticMatrix, psi: I) -> Self {
        Self { base, psi }
    }

    pub fn evaluate(&self, z: &CovariatePoint) -> StochasticMatrix {
        link_evaluate(&self.base, self.psi.eval(z))
    }
}

/// Row-wise softmax of `p_ij · psi`.
pub fn link_evaluate(base: &StochasticMatrix, psi: f64) -> StochasticMatrix {
    let n = base.dim();
    let mut out = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| base[(i, j)] * psi).collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|x| (x - top).exp()).collect();
        let total: f64 = weights.iter().sum();
        for j in 0..n {
            out[(i, j)] = weights[j] / total;
        }
    }
    StochasticMatrix(out)
}

/// Three-state ground-truth chain of the reference simulation design.
pub fn reference_chain_3() -> StochasticMatrix {
    let rows = [[94.0007, 3.4412, 2.5581], [3.8810, 92.5639, 3.5551], [0.3831, 2.5038, 97.1131]];
    percent_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
}

/// Five-state ground-truth chain of the reference simulation design.
pub fn reference_chain_5() -> StochasticMatrix {
    let rows = [
        [91.4828, 1.7832, 1.5797, 3.9951, 1.1592],
        [0.4332, 94.0624, 3.5217, 0.1473, 1.8354],
        [0.8712, 1.7389, 93.1986, 1.1289, 3.0624],
        [0.3389, 3.0794, 2.7967, 90.3348, 3.4502],
        [0.3325, 3.7597, 4.3798, 2.8478, 88.6802],
    ];
    percent_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
}

fn percent_rows(rows: &[Vec<f64>]) -> StochasticMatrix {
    let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x / 100.0).collect()).collect();
    let m = SquareMatrix::from_rows(&scaled).expect("constant matrix");
    validate_stochastic(&m, 1e-6).expect("printed rows sum to 100%")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matfun::max_norm;

    fn sq(rows: &[&[f64]]) -> SquareMatrix {
        SquareMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn validate_accepts_exact_matrix_unchanged() {
        let m = sq(&[&[0.5, 0.5], &[0.25, 0.75]]);
        let p = validate_stochastic(&m, 1e-10).unwrap();
        assert_eq!(p.as_matrix(), m.as_matrix());
    }

    #[test]
    fn validate_renormalizes_near_miss() {
        let m = sq(&[&[0.5 + 5e-11, 0.5], &[0.25, 0.75]]);
        let p = validate_stochastic(&m, 1e-10).unwrap();
        let s: f64 = p.row(0).iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn validate_clamps_tiny_negative() {
        let m = sq(&[&[-5e-11, 1.0], &[0.25, 0.75]]);
        let p = validate_stochastic(&m, 1e-10).unwrap();
        assert_eq!(p[(0, 0)], 0.0);
    }

    #[test]
    fn validate_rejects_with_row_diagnostics() {
        let m = sq(&[&[0.5, 0.5], &[-0.02, 1.02]]);
        match validate_stochastic(&m, 1e-10) {
            Err(MarkovError::NotStochastic(d)) => {
                assert_eq!(d.len(), 1);
                assert_eq!(d[0].row, 1);
                assert!((d[0].entry_violation - 0.02).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
        let m = sq(&[&[0.5, 0.6], &[0.5, 0.5]]);
        assert!(matches!(validate_stochastic(&m, 1e-10), Err(MarkovError::NotStochastic(_))));
    }

    #[test]
    fn power_examples() {
        let p = StochasticMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        assert_eq!(matrix_power(&p, 1), p);
        let p2 = matrix_power(&p, 2);
        let want = DMatrix::from_row_slice(2, 2, &[0.83, 0.17, 0.34, 0.66]);
        assert!(max_norm(&(p2.as_matrix() - want)) < 1e-15);
        let id = StochasticMatrix::identity(3);
        assert_eq!(matrix_power(&id, 7), id);
    }

    #[test]
    fn link_with_zero_index_is_uniform() {
        let p = link_evaluate(&reference_chain_3(), 0.0);
        for i in 0..3 {
            for j in 0..3 {
                assert!((p[(i, j)] - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn reference_psi_value() {
        let z = CovariatePoint::new(vec![1.5], vec![1]);
        assert!((Psi::reference().eval(&z) - 5.4).abs() < 1e-12);
        let z0 = CovariatePoint::new(vec![1.5], vec![0]);
        assert!((Psi::reference().eval(&z0) - 3.6).abs() < 1e-12);
    }

    #[test]
    fn reference_link_is_diagonally_dominant() {
        let model = LinkModel::new(reference_chain_3(), Psi::reference());
        let p = model.evaluate(&CovariatePoint::new(vec![1.5], vec![1]));
        for i in 0..3 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-15);
            assert!(p[(i, i)] > 0.5);
            for j in 0..3 {
                if j != i {
                    assert!(p[(i, i)] > p[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn reference_chains_are_stochastic() {
        for p in [reference_chain_3(), reference_chain_5()] {
            for r in p.rows() {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            }
        }
        assert!((reference_chain_3()[(0, 0)] - 0.940007).abs() < 1e-15);
    }

    #[test]
    fn generator_checks_and_division() {
        let g = GeneratorMatrix::new(sq(&[&[-0.3, 0.3], &[0.6, -0.6]])).unwrap();
        let h = g.divide(3.0);
        assert!(GeneratorMatrix::new(h.to_square()).is_ok());
        assert!(GeneratorMatrix::new(sq(&[&[-0.3, 0.3], &[-0.1, 0.1]])).is_err());
        assert!(GeneratorMatrix::new(sq(&[&[-0.3, 0.2], &[0.6, -0.6]])).is_err());
    }

    #[test]
    fn matrix_json_shape() {
        let p = StochasticMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"dim":2,"rows":[[0.9,0.1],[0.2,0.8]]}"#);
        let back: StochasticMatrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<StochasticMatrix>(r#"{"dim":2,"rows":[[0.9,0.2],[0.2,0.8]]}"#).is_err());
        assert!(serde_json::from_str::<StochasticMatrix>(r#"{"dim":3,"rows":[[0.9,0.1],[0.2,0.8]]}"#).is_err());
    }

    #[test]
    fn psi_json_round_trip() {
        let s = serde_json::to_string(&Psi::reference()).unwrap();
        assert!(s.contains("\"kind\":\"bilinear\""));
        let back: Psi = serde_json::from_str(&s).unwrap();
        assert_eq!(back, Psi::reference());
    }
}
