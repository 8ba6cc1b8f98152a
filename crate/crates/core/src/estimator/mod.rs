//! Kernel estimation of conditional transition matrices from randomly
//! timed transitions.
//!
//! The pipeline at one evaluation point `z` is:
//!
//! 1. [`AccumulatorBank`] keeps kernel-weighted counts of `i → j` transitions
//!    observed after a gap of exactly `ℓ` time units.
//! 2. [`a_hat`] turns them into the `ℓ`-step matrix `Â_ℓ(z)`.
//! 3. [`p_hat_ell`] takes the principal logarithm, repairs it into a
//!    generator when needed ([`regularize_generator`]) and returns the
//!    one-step root `exp(log(Â_ℓ)/ℓ)`.
//! 4. [`aggregate`] averages the per-gap roots with weights [`pi_hat_weights`].
//!
//! [`estimate`] runs all four steps.

mod accumulator;
mod kernel;
mod regularize;
mod transition;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use accumulator::{kernel_weight, AccumulatorBank, CHECKPOINT_VERSION};
pub use kernel::{
    optimal_bandwidth_constant, optimal_exponent, recursive_shrink_factor, BandwidthPlugin, BandwidthSchedule,
    KernelKind,
};
pub use regularize::{regularize_generator, RegMode};
pub use transition::{
    a_hat, aggregate, estimate, is_near_generator, p_hat_ell, pi_hat_weights, AHat, EstimateBundle, LagDiagnostics,
    LagEstimate, LagFit,
};

use crate::markov::MarkovError;
use crate::matfun::MatFunError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("path {path_id}: state {state} outside the state space")]
    StateOutOfRange { path_id: u64, state: usize },
    #[error("covariates have dimensions {got:?}, grid expects {expected:?} (continuous, discrete)")]
    CovariateMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("accumulator banks differ in grid, states, gaps, kernel or schedule")]
    ShapeMismatch,
    #[error("bad accumulator shape: {0}")]
    Shape(String),
    #[error("invalid bandwidth schedule: {0}")]
    InvalidSchedule(String),
    #[error("Hessian trace is zero, no finite optimal bandwidth")]
    DegenerateHessian,
    #[error("lag range {lo}..={hi} is not inside 1..={max}")]
    InvalidLagRange { lo: usize, hi: usize, max: usize },
    #[error("no accumulated transitions in the lag range at this point")]
    EmptyRange,
    #[error("no principal logarithm: {0}")]
    LogUnavailable(MatFunError),
    #[error("regularized matrix is not a generator")]
    NotGenerator,
    #[error("no usable lag in the aggregation range")]
    NoUsableLag,
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("checkpoint schedule {checkpoint} differs from configured {config}")]
    ScheduleMismatch { checkpoint: String, config: String },
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl From<MarkovError> for EstimatorError {
    fn from(e: MarkovError) -> Self {
        EstimatorError::Numeric(e.to_string())
    }
}

/// Inclusive range of gaps `[lo, hi]` pooled by the aggregated estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagRange {
    pub lo: usize,
    pub hi: usize,
}

impl Default for LagRange {
    fn default() -> Self {
        Self { lo: 6, hi: 20 }
    }
}

impl LagRange {
    pub fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    pub fn check(&self, max_gap: usize) -> Result<(), EstimatorError> {
        if self.lo == 0 || self.lo > self.hi || self.hi > max_gap {
            return Err(EstimatorError::InvalidLagRange { lo: self.lo, hi: self.hi, max: max_gap });
        }
        Ok(())
    }

    pub fn iter(&self) -> std::ops::RangeInclusive<usize> {
        self.lo..=self.hi
    }
}

impl std::str::FromStr for LagRange {
    type Err = String;

    /// Parses `LO:HI`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected LO:HI, got `{s}`"))?;
        let lo = lo.trim().parse().map_err(|_| format!("bad lower lag `{lo}`"))?;
        let hi = hi.trim().parse().map_err(|_| format!("bad upper lag `{hi}`"))?;
        Ok(Self { lo, hi })
    }
}

fn default_max_gap() -> usize {
    20
}

/// Everything needed to go from paths to an aggregated estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    #[serde(default)]
    pub kernel: KernelKind,
    #[serde(default)]
    pub schedule: BandwidthSchedule,
    #[serde(default)]
    pub lags: LagRange,
    /// Largest gap accumulated; longer gaps are skipped.
    #[serde(default = "default_max_gap")]
    pub max_gap: usize,
    #[serde(default)]
    pub reg_mode: RegMode,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            kernel: KernelKind::Gaussian,
            schedule: BandwidthSchedule::default(),
            lags: LagRange::default(),
            max_gap: default_max_gap(),
            reg_mode: RegMode::Weighted,
        }
    }
}
