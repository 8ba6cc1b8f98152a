use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;

use super::accumulator::AccumulatorBank;
use super::regularize::{regularize_with_fallback, RegMode};
use super::{EstimatorError, LagRange};
use crate::markov::{generator_defects, validate_stochastic, GeneratorMatrix, StochasticMatrix};
use crate::matfun::{mat_exp, mat_log_principal, SquareMatrix};

/// A row is missing when its denominator falls below this fraction of `Ω_N`.
pub const MISSING_ROW_REL_TOL: f64 = 1e-12;
/// A logarithm within this distance of the generator conditions is used
/// without regularization.
pub const NEAR_GENERATOR_TOL: f64 = 1e-10;

/// Ratio estimate of the `ℓ`-step transition matrix at one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct AHat {
    /// `U_T / U_B`, with all-zero rows where the denominator vanished.
    pub raw: DMatrix<f64>,
    pub missing_rows: Vec<usize>,
}

impl AHat {
    pub fn all_missing(&self) -> bool {
        self.missing_rows.len() == self.raw.nrows()
    }

    /// Stochastic completion: missing rows become the matching identity row.
    pub fn completed(&self) -> Result<StochasticMatrix, EstimatorError> {
        let mut m = self.raw.clone();
        for &i in &self.missing_rows {
            m[(i, i)] = 1.0;
        }
        let sq = SquareMatrix::new(m).map_err(|e| EstimatorError::Numeric(e.to_string()))?;
        Ok(validate_stochastic(&sq, 1e-10)?)
    }
}

pub fn a_hat(bank: &AccumulatorBank, g: usize, ell: usize) -> AHat {
    let s = bank.states();
    let threshold = MISSING_ROW_REL_TOL * bank.omega_sum();
    let mut raw = DMatrix::<f64>::zeros(s, s);
    let mut missing_rows = Vec::new();
    for i in 0..s {
        let denom = bank.u_b(g, ell, i);
        if denom <= threshold || denom == 0.0 {
            missing_rows.push(i);
            continue;
        }
        for j in 0..s {
            raw[(i, j)] = bank.u_t(g, ell, i, j) / denom;
        }
    }
    AHat { raw, missing_rows }
}

/// Share of the accumulated transition mass at each gap of `lags`.
pub fn pi_hat_weights(bank: &AccumulatorBank, g: usize, lags: LagRange) -> Result<Vec<f64>, EstimatorError> {
    lags.check(bank.max_gap())?;
    let mass: Vec<f64> = lags.iter().map(|ell| (0..bank.states()).map(|i| bank.u_b(g, ell, i)).sum()).collect();
    let total: f64 = mass.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(EstimatorError::EmptyRange);
    }
    Ok(mass.into_iter().map(|m| m / total).collect())
}

/// Per-gap root `exp(log(A)/ℓ)` and the generator it came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LagFit {
    pub p_hat: StochasticMatrix,
    /// Generator of `A` (before division by `ℓ`).
    pub generator: GeneratorMatrix,
    pub regularized: bool,
    pub mode_used: Option<RegMode>,
}

/// True when `b` meets the generator conditions to within `tol`.
pub fn is_near_generator(b: &DMatrix<f64>, tol: f64) -> bool {
    generator_defects(b, tol, tol).is_empty()
}

pub fn p_hat_ell(a: &StochasticMatrix, ell: usize, mode: RegMode) -> Result<LagFit, EstimatorError> {
    assert!(ell >= 1, "gap must be at least 1");
    let log = mat_log_principal(&a.to_square()).map_err(EstimatorError::LogUnavailable)?;
    let (generator, regularized, mode_used) = if is_near_generator(log.as_matrix(), NEAR_GENERATOR_TOL) {
        (GeneratorMatrix::from_matrix_unchecked(log.into_inner()), false, None)
    } else {
        let (g, used) = regularize_with_fallback(&log, mode)?;
        (g, true, Some(used))
    };
    let root =
        mat_exp(&generator.divide(ell as f64).to_square()).map_err(|e| EstimatorError::Numeric(e.to_string()))?;
    let p_hat = validate_stochastic(&root, 1e-9)?;
    Ok(LagFit { p_hat, generator, regularized, mode_used })
}

/// Convex combination `Σ w_ℓ P̂_ℓ / Σ w_ℓ` over the usable lags.
pub fn aggregate(parts: &[(f64, &StochasticMatrix)]) -> Result<StochasticMatrix, EstimatorError> {
    let total: f64 = parts.iter().map(|(w, _)| *w).sum();
    if parts.is_empty() || total.is_nan() || total <= 0.0 {
        return Err(EstimatorError::NoUsableLag);
    }
    let n = parts[0].1.dim();
    let mut acc = DMatrix::<f64>::zeros(n, n);
    for (w, p) in parts {
        acc += (*w / total) * p.as_matrix();
    }
    let sq = SquareMatrix::new(acc).map_err(|e| EstimatorError::Numeric(e.to_string()))?;
    Ok(validate_stochastic(&sq, 1e-10)?)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LagDiagnostics {
    pub log_failed: bool,
    pub regularized: bool,
    pub rows_missing: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LagEstimate {
    /// Raw share of this gap among the lag range.
    pub pi_hat: f64,
    /// Completed `Â_ℓ`; absent when no transition with this gap was seen.
    pub a_hat: Option<StochasticMatrix>,
    pub generator: Option<GeneratorMatrix>,
    pub p_hat: Option<StochasticMatrix>,
    pub diagnostics: LagDiagnostics,
}

impl LagEstimate {
    pub fn usable(&self) -> bool {
        self.p_hat.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateBundle {
    pub per_lag: BTreeMap<usize, LagEstimate>,
    /// Weights actually used, renormalized over the usable lags.
    pub weights: BTreeMap<usize, f64>,
    pub aggregated: StochasticMatrix,
}

impl EstimateBundle {
    pub fn regularized_lags(&self) -> usize {
        self.per_lag.values().filter(|l| l.diagnostics.regularized).count()
    }
    pub fn log_failed_lags(&self) -> usize {
        self.per_lag.values().filter(|l| l.diagnostics.log_failed).count()
    }
}

/// Full pipeline at grid point `g`: per-gap ratio estimates, roots, and
/// their weighted aggregate. Gaps whose logarithm fails are dropped and the
/// remaining weights renormalized.
pub fn estimate(
    bank: &AccumulatorBank,
    g: usize,
    lags: LagRange,
    mode: RegMode,
) -> Result<EstimateBundle, EstimatorError> {
    let pis = match pi_hat_weights(bank, g, lags) {
        Ok(p) => p,
        Err(EstimatorError::EmptyRange) => return Err(EstimatorError::NoUsableLag),
        Err(e) => return Err(e),
    };
    let mut per_lag = BTreeMap::new();
    for (ell, &pi_hat) in lags.iter().zip(&pis) {
        let ah = a_hat(bank, g, ell);
        let mut diagnostics = LagDiagnostics { rows_missing: ah.missing_rows.clone(), ..Default::default() };
        if ah.all_missing() {
            per_lag.insert(ell, LagEstimate { pi_hat, a_hat: None, generator: None, p_hat: None, diagnostics });
            continue;
        }
        let completed = ah.completed()?;
        let (generator, p_hat) = match p_hat_ell(&completed, ell, mode) {
            Ok(fit) => {
                diagnostics.regularized = fit.regularized;
                (Some(fit.generator), Some(fit.p_hat))
            }
            Err(e) => {
                diagnostics.log_failed = true;
                diagnostics.error = Some(e.to_string());
                (None, None)
            }
        };
        per_lag.insert(ell, LagEstimate { pi_hat, a_hat: Some(completed), generator, p_hat, diagnostics });
    }
    let parts: Vec<(f64, &StochasticMatrix)> =
        per_lag.values().filter_map(|l| l.p_hat.as_ref().map(|p| (l.pi_hat, p))).collect();
    let aggregated = aggregate(&parts)?;
    let used: f64 = parts.iter().map(|(w, _)| w).sum();
    let weights = per_lag.iter().filter(|(_, l)| l.usable()).map(|(&ell, l)| (ell, l.pi_hat / used)).collect();
    Ok(EstimateBundle { per_lag, weights, aggregated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{BandwidthSchedule, KernelKind};
    use crate::markov::{matrix_power, reference_chain_3, CovariatePoint};
    use crate::matfun::{max_norm, spectral_norm};
    use crate::simulator::{Observation, SamplePath};

    fn unconditional_bank(states: usize, max_gap: usize) -> AccumulatorBank {
        AccumulatorBank::new(
            vec![CovariatePoint::unconditional()],
            states,
            max_gap,
            BandwidthSchedule::default(),
            KernelKind::Gaussian,
        )
        .unwrap()
    }

    fn path(y0: usize, events: &[(usize, usize)]) -> SamplePath {
        SamplePath {
            path_id: 0,
            covariates: CovariatePoint::unconditional(),
            initial_state: y0,
            events: events.iter().map(|&(gap, state)| Observation { gap, state }).collect(),
        }
    }

    #[test]
    fn single_transition_gives_unit_row() {
        let mut b = unconditional_bank(3, 5);
        b.absorb_path(&path(0, &[(3, 1)])).unwrap();
        let a = a_hat(&b, 0, 3);
        assert_eq!(a.raw.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0]);
        assert_eq!(a.missing_rows, vec![1, 2]);
    }

    #[test]
    fn empty_bank_is_all_missing() {
        let b = unconditional_bank(3, 5);
        let a = a_hat(&b, 0, 2);
        assert!(a.all_missing());
        assert_eq!(max_norm(&a.raw), 0.0);
        assert_eq!(a.completed().unwrap(), StochasticMatrix::identity(3));
    }

    #[test]
    fn ratio_arithmetic() {
        let mut b = unconditional_bank(3, 2);
        b.absorb_path(&path(0, &[(1, 0), (1, 0), (1, 1), (1, 2)])).unwrap();
        // transitions out of state 0 at gap 1: 0→0, 0→0, 0→1 ; then 1→2
        let a = a_hat(&b, 0, 1);
        assert!((a.raw[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((a.raw[(0, 1)] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.raw[(1, 2)], 1.0);

        let mut b = unconditional_bank(3, 2);
        b.absorb_path(&path(0, &[(1, 0), (1, 0), (1, 1)])).unwrap();
        b.absorb_path(&path(0, &[(1, 2)])).unwrap();
        let a = a_hat(&b, 0, 1);
        // U_T(0,·) = (2,1,1), U_B = 4
        assert_eq!(a.raw.row(0).iter().copied().collect::<Vec<_>>(), vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn weights_examples() {
        let mut b = unconditional_bank(2, 6);
        b.absorb_path(&path(0, &[(5, 1), (5, 0)])).unwrap();
        assert_eq!(pi_hat_weights(&b, 0, LagRange::new(1, 6)).unwrap(), vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        b.absorb_path(&path(1, &[(2, 1), (2, 0)])).unwrap();
        assert_eq!(pi_hat_weights(&b, 0, LagRange::new(2, 5)).unwrap(), vec![0.5, 0.0, 0.0, 0.5]);
        assert_eq!(pi_hat_weights(&b, 0, LagRange::new(3, 4)), Err(EstimatorError::EmptyRange));
        assert!(matches!(pi_hat_weights(&b, 0, LagRange::new(3, 9)), Err(EstimatorError::InvalidLagRange { .. })));
    }

    #[test]
    fn exact_powers_are_inverted() {
        let p = reference_chain_3();
        for ell in [1, 2, 5, 10] {
            let fit = p_hat_ell(&matrix_power(&p, ell), ell, RegMode::Weighted).unwrap();
            assert!(!fit.regularized);
            assert!(spectral_norm(&(fit.p_hat.as_matrix() - p.as_matrix())) < 1e-8);
        }
        let id = StochasticMatrix::identity(3);
        assert_eq!(p_hat_ell(&id, 4, RegMode::Weighted).unwrap().p_hat, id);
    }

    #[test]
    fn negative_eigenvalue_blocks_the_log() {
        // eigenvalues 1 and -0.1
        let a = StochasticMatrix::from_rows(&[vec![0.45, 0.55], vec![0.55, 0.45]]).unwrap();
        assert!(matches!(p_hat_ell(&a, 2, RegMode::Weighted), Err(EstimatorError::LogUnavailable(_))));
    }

    #[test]
    fn aggregate_examples() {
        let a = StochasticMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let b = StochasticMatrix::from_rows(&[vec![0.5, 0.5], vec![0.6, 0.4]]).unwrap();
        assert_eq!(aggregate(&[(0.3, &a)]).unwrap(), a);
        assert!(max_norm(&(aggregate(&[(0.1, &a), (0.7, &a)]).unwrap().as_matrix() - a.as_matrix())) < 1e-15);
        let mix = aggregate(&[(0.25, &a), (0.75, &b)]).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[0.6, 0.4, 0.5, 0.5]);
        assert!(max_norm(&(mix.as_matrix() - want)) < 1e-15);
        assert_eq!(aggregate(&[]), Err(EstimatorError::NoUsableLag));
        assert_eq!(aggregate(&[(0.0, &a)]), Err(EstimatorError::NoUsableLag));
    }

    #[test]
    fn pipeline_flags_and_empty_point() {
        let b = unconditional_bank(3, 20);
        assert_eq!(estimate(&b, 0, LagRange::default(), RegMode::Weighted), Err(EstimatorError::NoUsableLag));
    }
}
