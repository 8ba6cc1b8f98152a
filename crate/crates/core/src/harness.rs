//! Replicated simulation experiments and their error summaries.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{estimate, AccumulatorBank, EstimatorConfig, EstimatorError, LagRange, RegMode};
use crate::markov::{CovariatePoint, StochasticMatrix};
use crate::matfun::spectral_norm;
use crate::simulator::{PathSimulator, SamplePath, SimConfig, SimError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub sim: SimConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    /// Evaluation points; a single unconditional point for chains without
    /// covariates.
    pub eval_grid: Vec<CovariatePoint>,
    pub n_values: Vec<usize>,
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.eval_grid.is_empty() {
            return Err(HarnessError::InvalidSpec("eval_grid is empty".into()));
        }
        if self.replications == 0 {
            return Err(HarnessError::InvalidSpec("replications must be at least 1".into()));
        }
        if self.n_values.is_empty() || self.n_values.contains(&0) {
            return Err(HarnessError::InvalidSpec("n_values must be nonempty and positive".into()));
        }
        self.estimator.lags.check(self.estimator.max_gap)?;
        let mut sim = self.sim.clone();
        sim.n_paths = 1;
        sim.validate()?;
        Ok(())
    }
}

/// Outcome at one (replication, N, grid point) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub replication: usize,
    pub n: usize,
    pub grid_index: usize,
    pub point: CovariatePoint,
    /// `‖P̂(z) − P(z)‖₂`, absent when no estimate was produced.
    pub error_spec: Option<f64>,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub regularized_lags: usize,
    pub log_failed_lags: usize,
    pub wall_ms: f64,
}

/// What an estimator sees for one cell.
pub struct CellInput<'a> {
    pub bank: &'a AccumulatorBank,
    pub grid_index: usize,
    pub point: &'a CovariatePoint,
    pub truth: &'a StochasticMatrix,
    pub lags: LagRange,
    pub reg_mode: RegMode,
}

pub struct CellEstimate {
    pub matrix: StochasticMatrix,
    pub regularized_lags: usize,
    pub log_failed_lags: usize,
}

/// The aggregated kernel estimator.
pub fn kernel_cell_estimate(input: &CellInput<'_>) -> Result<CellEstimate, EstimatorError> {
    let bundle = estimate(input.bank, input.grid_index, input.lags, input.reg_mode)?;
    Ok(CellEstimate {
        regularized_lags: bundle.regularized_lags(),
        log_failed_lags: bundle.log_failed_lags(),
        matrix: bundle.aggregated,
    })
}

/// Sample standard deviation of the first continuous covariate, if any
/// path carries one and there are at least two paths.
pub fn covariate_sd(paths: &[SamplePath]) -> Option<f64> {
    let xs: Vec<f64> = paths.iter().filter_map(|p| p.covariates.continuous.first().copied()).collect();
    if xs.len() < 2 {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (var > 0.0).then(|| var.sqrt())
}

/// Builds a bank over `grid` from `paths`. When the schedule has no
/// `sigma_scale` and the grid smooths over continuous covariates, the
/// sample standard deviation of the data is used.
pub fn build_bank(
    cfg: &EstimatorConfig,
    grid: &[CovariatePoint],
    states: usize,
    paths: &[SamplePath],
) -> Result<AccumulatorBank, EstimatorError> {
    let mut schedule = cfg.schedule;
    let smooths = grid.first().is_some_and(|z| !z.continuous.is_empty());
    if schedule.sigma_scale.is_none() && smooths {
        schedule.sigma_scale = covariate_sd(paths);
    }
    let mut bank = AccumulatorBank::new(grid.to_vec(), states, cfg.max_gap, schedule, cfg.kernel)?;
    bank.absorb_all(paths)?;
    Ok(bank)
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ErrorRecord>, HarnessError> {
    run_experiment_with(spec, kernel_cell_estimate)
}

/// Runs every replication (in parallel when enabled) with a custom cell
/// estimator. Records come back ordered by replication, then the order of
/// `n_values`, then grid index.
pub fn run_experiment_with<F>(spec: &ExperimentSpec, estimator: F) -> Result<Vec<ErrorRecord>, HarnessError>
where
    F: Fn(&CellInput<'_>) -> Result<CellEstimate, EstimatorError> + Sync,
{
    spec.validate()?;
    let mut sim_cfg = spec.sim.clone();
    sim_cfg.seed = spec.seed;
    sim_cfg.n_paths = *spec.n_values.iter().max().expect("validated nonempty");
    let sim = PathSimulator::new(sim_cfg)?;
    let truths: Vec<StochasticMatrix> = spec.eval_grid.iter().map(|z| sim.config().truth_at(z)).collect();

    let one = |rep: usize| -> Result<Vec<ErrorRecord>, HarnessError> {
        let all = sim.paths(rep as u64, sim.config().n_paths);
        let mut out = Vec::with_capacity(spec.n_values.len() * spec.eval_grid.len());
        for &n in &spec.n_values {
            let started = Instant::now();
            let bank = build_bank(&spec.estimator, &spec.eval_grid, truths[0].dim(), &all[..n])?;
            let ingest_ms = started.elapsed().as_secs_f64() * 1e3;
            for (g, point) in spec.eval_grid.iter().enumerate() {
                let t0 = Instant::now();
                let input = CellInput {
                    bank: &bank,
                    grid_index: g,
                    point,
                    truth: &truths[g],
                    lags: spec.estimator.lags,
                    reg_mode: spec.estimator.reg_mode,
                };
                let result = estimator(&input);
                let wall_ms = ingest_ms + t0.elapsed().as_secs_f64() * 1e3;
                let record = match result {
                    Ok(est) => ErrorRecord {
                        replication: rep,
                        n,
                        grid_index: g,
                        point: point.clone(),
                        error_spec: Some(spectral_norm(&(est.matrix.as_matrix() - truths[g].as_matrix()))),
                        failed: false,
                        failure: None,
                        regularized_lags: est.regularized_lags,
                        log_failed_lags: est.log_failed_lags,
                        wall_ms,
                    },
                    Err(e) => ErrorRecord {
                        replication: rep,
                        n,
                        grid_index: g,
                        point: point.clone(),
                        error_spec: None,
                        failed: true,
                        failure: Some(e.to_string()),
                        regularized_lags: 0,
                        log_failed_lags: 0,
                        wall_ms,
                    },
                };
                out.push(record);
            }
        }
        Ok(out)
    };

    #[cfg(feature = "parallel")]
    let per_rep: Vec<Result<Vec<ErrorRecord>, HarnessError>> = {
        use rayon::prelude::*;
        (0..spec.replications).into_par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_rep: Vec<Result<Vec<ErrorRecord>, HarnessError>> = (0..spec.replications).map(one).collect();

    let mut records = Vec::new();
    for r in per_rep {
        records.extend(r?);
    }
    Ok(records)
}

/// Summary statistics of the spectral error in one (N, grid point) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: usize,
    pub grid_index: usize,
    pub point: CovariatePoint,
    pub count: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub log_median: Option<f64>,
}

/// Quantile with linear interpolation between order statistics
/// (position `q · (n − 1)`). `sorted` must be ascending and nonempty.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(quantile(&v, 0.5))
}

/// One row per distinct (N, grid index), in order of first appearance.
pub fn summarize(records: &[ErrorRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(usize, usize)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.n, r.grid_index)) {
            keys.push((r.n, r.grid_index));
        }
    }
    keys.into_iter()
        .map(|(n, g)| {
            let cell: Vec<&ErrorRecord> = records.iter().filter(|r| r.n == n && r.grid_index == g).collect();
            let mut errs: Vec<f64> = cell.iter().filter_map(|r| r.error_spec).collect();
            errs.sort_by(f64::total_cmp);
            let failures = cell.iter().filter(|r| r.failed).count();
            let (median, q1, q3) = if errs.is_empty() {
                (None, None, None)
            } else {
                (Some(quantile(&errs, 0.5)), Some(quantile(&errs, 0.25)), Some(quantile(&errs, 0.75)))
            };
            SummaryRow {
                n,
                grid_index: g,
                point: cell[0].point.clone(),
                count: cell.len(),
                failures,
                failure_rate: failures as f64 / cell.len() as f64,
                median,
                q1,
                q3,
                log_median: median.map(f64::ln),
            }
        })
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub const CSV_HEADER: &str = "replication,N,z_c,z_d,error_spec,failed,regularized_lags,wall_ms";

/// Per-cell CSV. Multi-dimensional covariates are `;`-separated and an
/// unconditional point leaves both covariate columns empty.
pub fn records_to_csv(records: &[ErrorRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let err = r.error_spec.map(|e| e.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.3}",
            r.replication,
            r.n,
            join(&r.point.continuous),
            join(&r.point.discrete),
            err,
            r.failed,
            r.regularized_lags,
            r.wall_ms
        );
    }
    out
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into())
}

/// Fixed-width text table of a summary.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:>8} {:>12} {:>6} {:>9} {:>9} {:>9} {:>10} {:>8}\n",
        "N", "point", "reps", "q1", "median", "q3", "log-med", "fail%"
    );
    for r in rows {
        let point = if r.point.is_unconditional() {
            "-".to_string()
        } else {
            format!("{}|{}", join(&r.point.continuous), join(&r.point.discrete))
        };
        let _ = writeln!(
            out,
            "{:>8} {:>12} {:>6} {:>9} {:>9} {:>9} {:>10} {:>7.1}%",
            r.n,
            point,
            r.count,
            fmt_opt(r.q1),
            fmt_opt(r.median),
            fmt_opt(r.q3),
            fmt_opt(r.log_median),
            100.0 * r.failure_rate
        );
    }
    out
}
