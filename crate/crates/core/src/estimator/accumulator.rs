//! Streaming kernel-weighted transition counts over an evaluation grid.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::kernel::{BandwidthSchedule, KernelKind};
use super::EstimatorError;
use crate::markov::CovariatePoint;
use crate::simulator::SamplePath;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Running sums `U_T(z, ℓ, i, j)` and `U_B(z, ℓ, i)` for every grid point
/// `z` and gap `ℓ ∈ 1..=max_gap`.
///
/// Sums are kept unnormalized: each path `m` contributes
/// `w_m · K_{h_m}(Z_m − z)` per matching transition, and `omega_sum`
/// tracks `Σ w_m`. Dividing both by `omega_sum` gives the normalized
/// estimators; ratios are unaffected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccumulatorBank {
    kernel: KernelKind,
    schedule: BandwidthSchedule,
    grid: Vec<CovariatePoint>,
    states: usize,
    max_gap: usize,
    /// Paths absorbed here carry indices `index_offset + 1, index_offset + 2, …`.
    index_offset: u64,
    n_paths: u64,
    omega_sum: f64,
    skipped_transitions: u64,
    u_t: Vec<f64>,
    u_b: Vec<f64>,
}

impl AccumulatorBank {
    pub fn new(
        grid: Vec<CovariatePoint>,
        states: usize,
        max_gap: usize,
        schedule: BandwidthSchedule,
        kernel: KernelKind,
    ) -> Result<Self, EstimatorError> {
        Self::with_offset(grid, states, max_gap, schedule, kernel, 0)
    }

    /// Bank for a shard whose first path has global index `offset + 1`.
    pub fn with_offset(
        grid: Vec<CovariatePoint>,
        states: usize,
        max_gap: usize,
        schedule: BandwidthSchedule,
        kernel: KernelKind,
        offset: u64,
    ) -> Result<Self, EstimatorError> {
        if grid.is_empty() {
            return Err(EstimatorError::Shape("evaluation grid is empty".into()));
        }
        if states < 2 || max_gap == 0 {
            return Err(EstimatorError::Shape(format!(
                "need states >= 2 and max_gap >= 1, got {states} and {max_gap}"
            )));
        }
        let p = grid[0].continuous.len();
        let d = grid[0].discrete.len();
        if grid.iter().any(|z| z.continuous.len() != p || z.discrete.len() != d) {
            return Err(EstimatorError::Shape("grid points differ in covariate dimensions".into()));
        }
        schedule.validate(p)?;
        let cells = grid.len() * max_gap * states;
        Ok(Self {
            kernel,
            schedule,
            grid,
            states,
            max_gap,
            index_offset: offset,
            n_paths: 0,
            omega_sum: 0.0,
            skipped_transitions: 0,
            u_t: vec![0.0; cells * states],
            u_b: vec![0.0; cells],
        })
    }

    /// Empty bank with the same shape, kernel and schedule.
    pub fn empty_like(&self, offset: u64) -> Self {
        Self {
            index_offset: offset,
            n_paths: 0,
            omega_sum: 0.0,
            skipped_transitions: 0,
            u_t: vec![0.0; self.u_t.len()],
            u_b: vec![0.0; self.u_b.len()],
            ..self.clone()
        }
    }

    pub fn grid(&self) -> &[CovariatePoint] {
        &self.grid
    }
    pub fn states(&self) -> usize {
        self.states
    }
    pub fn max_gap(&self) -> usize {
        self.max_gap
    }
    pub fn schedule(&self) -> &BandwidthSchedule {
        &self.schedule
    }
    pub fn kernel(&self) -> KernelKind {
        self.kernel
    }
    pub fn n_paths(&self) -> u64 {
        self.n_paths
    }
    pub fn omega_sum(&self) -> f64 {
        self.omega_sum
    }
    pub fn skipped_transitions(&self) -> u64 {
        self.skipped_transitions
    }
    pub fn index_offset(&self) -> u64 {
        self.index_offset
    }
    /// Global index the next absorbed path will receive.
    pub fn next_index(&self) -> u64 {
        self.index_offset + self.n_paths + 1
    }

    fn cell(&self, g: usize, ell: usize, i: usize) -> usize {
        (g * self.max_gap + (ell - 1)) * self.states + i
    }

    pub fn u_t(&self, g: usize, ell: usize, i: usize, j: usize) -> f64 {
        self.u_t[self.cell(g, ell, i) * self.states + j]
    }

    pub fn u_b(&self, g: usize, ell: usize, i: usize) -> f64 {
        self.u_b[self.cell(g, ell, i)]
    }

    pub fn raw_u_t(&self) -> &[f64] {
        &self.u_t
    }
    pub fn raw_u_b(&self) -> &[f64] {
        &self.u_b
    }

    /// `K_h(Z − z)` including the discrete indicator; `1` at an
    /// unconditional grid point.
    pub fn kernel_weight(&self, g: usize, z: &CovariatePoint, h: f64) -> Result<f64, EstimatorError> {
        kernel_weight(self.kernel, &self.grid[g], z, h)
    }

    /// Adds one path with global index [`next_index`](Self::next_index).
    ///
    /// Every transition uses the same bandwidth `h_m`. Transitions with a
    /// gap beyond `max_gap` are counted in `skipped_transitions` and
    /// otherwise ignored. The bank is left untouched on error.
    pub fn absorb_path(&mut self, path: &SamplePath) -> Result<(), EstimatorError> {
        if path.initial_state >= self.states {
            return Err(EstimatorError::StateOutOfRange { path_id: path.path_id, state: path.initial_state + 1 });
        }
        if let Some(e) = path.events.iter().find(|e| e.state >= self.states) {
            return Err(EstimatorError::StateOutOfRange { path_id: path.path_id, state: e.state + 1 });
        }
        let m = self.next_index();
        let h = self.schedule.bandwidth(m);
        let w = self.schedule.weight(m);
        let weights = (0..self.grid.len())
            .map(|g| self.kernel_weight(g, &path.covariates, h).map(|k| w * k))
            .collect::<Result<Vec<_>, _>>()?;

        for t in path.transitions() {
            if t.gap > self.max_gap {
                self.skipped_transitions += 1;
                continue;
            }
            for (g, &wk) in weights.iter().enumerate() {
                if wk == 0.0 {
                    continue;
                }
                let c = self.cell(g, t.gap, t.from);
                self.u_t[c * self.states + t.to] += wk;
                self.u_b[c] += wk;
            }
        }
        self.n_paths += 1;
        self.omega_sum += w;
        Ok(())
    }

    pub fn absorb_all<'a, I>(&mut self, paths: I) -> Result<(), EstimatorError>
    where
        I: IntoIterator<Item = &'a SamplePath>,
    {
        for p in paths {
            self.absorb_path(p)?;
        }
        Ok(())
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.kernel == other.kernel
            && self.schedule == other.schedule
            && self.grid == other.grid
            && self.states == other.states
            && self.max_gap == other.max_gap
    }

    /// Entrywise sum of two banks built from disjoint path-index ranges.
    pub fn merge(&self, other: &Self) -> Result<Self, EstimatorError> {
        if !self.same_shape(other) {
            return Err(EstimatorError::ShapeMismatch);
        }
        let offset = match (self.n_paths, other.n_paths) {
            (0, 0) => self.index_offset.min(other.index_offset),
            (0, _) => other.index_offset,
            (_, 0) => self.index_offset,
            _ => self.index_offset.min(other.index_offset),
        };
        Ok(Self {
            index_offset: offset,
            n_paths: self.n_paths + other.n_paths,
            omega_sum: self.omega_sum + other.omega_sum,
            skipped_transitions: self.skipped_transitions + other.skipped_transitions,
            u_t: self.u_t.iter().zip(&other.u_t).map(|(a, b)| a + b).collect(),
            u_b: self.u_b.iter().zip(&other.u_b).map(|(a, b)| a + b).collect(),
            ..self.clone()
        })
    }

    /// Absorbs `paths` in `shards` contiguous chunks, each in its own bank,
    /// and merges them in chunk order. Path indices continue from this bank.
    pub fn absorb_sharded(&self, paths: &[SamplePath], shards: usize) -> Result<Self, EstimatorError> {
        let shards = shards.max(1);
        let chunk = paths.len().div_ceil(shards).max(1);
        let base = self.index_offset + self.n_paths;
        let build = |(k, part): (usize, &[SamplePath])| -> Result<Self, EstimatorError> {
            let mut bank = self.empty_like(base + (k * chunk) as u64);
            bank.absorb_all(part)?;
            Ok(bank)
        };
        let parts: Vec<(usize, &[SamplePath])> = paths.chunks(chunk).enumerate().collect();
        #[cfg(feature = "parallel")]
        let built: Vec<Result<Self, EstimatorError>> = {
            use rayon::prelude::*;
            parts.into_par_iter().map(build).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let built: Vec<Result<Self, EstimatorError>> = parts.into_iter().map(build).collect();

        let mut acc = self.clone();
        for bank in built {
            acc = acc.merge(&bank?)?;
        }
        Ok(acc)
    }

    /// Largest `|U_B − Σ_j U_T|` over all cells.
    pub fn row_sum_defect(&self) -> f64 {
        self.u_b
            .iter()
            .enumerate()
            .map(|(c, &b)| {
                let s: f64 = self.u_t[c * self.states..(c + 1) * self.states].iter().sum();
                (b - s).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn save_checkpoint<W: Write>(&self, out: W) -> Result<(), EstimatorError> {
        let snap = CheckpointRef { version: CHECKPOINT_VERSION, bank: self };
        serde_json::to_writer(out, &snap).map_err(|e| EstimatorError::Checkpoint(e.to_string()))
    }

    pub fn load_checkpoint<R: Read>(input: R) -> Result<Self, EstimatorError> {
        let snap: Checkpoint = serde_json::from_reader(input).map_err(|e| EstimatorError::Checkpoint(e.to_string()))?;
        if snap.version != CHECKPOINT_VERSION {
            return Err(EstimatorError::VersionMismatch { found: snap.version, expected: CHECKPOINT_VERSION });
        }
        let bank = snap.bank;
        let cells = bank.grid.len() * bank.max_gap * bank.states;
        if bank.u_b.len() != cells || bank.u_t.len() != cells * bank.states {
            return Err(EstimatorError::Checkpoint("accumulator arrays do not match declared shape".into()));
        }
        Ok(bank)
    }

    /// Fails with `ScheduleMismatch` unless `schedule` and `kernel` agree
    /// with the ones this bank was built with.
    pub fn check_schedule(&self, schedule: &BandwidthSchedule, kernel: KernelKind) -> Result<(), EstimatorError> {
        if kernel != self.kernel || !self.schedule.compatible_with(schedule) {
            return Err(EstimatorError::ScheduleMismatch {
                checkpoint: format!("{:?} {:?}", self.kernel, self.schedule),
                config: format!("{kernel:?} {schedule:?}"),
            });
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    version: u32,
    bank: &'a AccumulatorBank,
}

#[derive(Deserialize)]
struct Checkpoint {
    version: u32,
    bank: AccumulatorBank,
}

/// Product kernel `h^{−p} Π K((Z_k − z_k)/h) · 1{Z_d = z_d}`.
pub fn kernel_weight(
    kernel: KernelKind,
    at: &CovariatePoint,
    z: &CovariatePoint,
    h: f64,
) -> Result<f64, EstimatorError> {
    if at.is_unconditional() {
        return Ok(1.0);
    }
    if z.continuous.len() != at.continuous.len() || z.discrete.len() != at.discrete.len() {
        return Err(EstimatorError::CovariateMismatch {
            expected: (at.continuous.len(), at.discrete.len()),
            got: (z.continuous.len(), z.discrete.len()),
        });
    }
    if z.discrete != at.discrete {
        return Ok(0.0);
    }
    Ok(z.continuous.iter().zip(&at.continuous).map(|(zk, ak)| kernel.density((zk - ak) / h) / h).product())
}
