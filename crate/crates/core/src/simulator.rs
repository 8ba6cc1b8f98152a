//! Synthetic sample paths observed at random times.
//!
//! Each path draws its covariates once, starts from a uniform state at time
//! zero, then repeatedly waits `1 + Poisson(λ(current state))` time units and
//! jumps according to the matching power of the (conditional) transition
//! matrix, until the elapsed time reaches the observation window.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::distributions::{Bernoulli, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::markov::{reference_chain_3, reference_chain_5, CovariatePoint, LinkModel, Psi, StochasticMatrix};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: `{field}` {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("dataset line {line}: {reason}")]
    Dataset { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One observation after a gap: the chain is in `state` after `gap` units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub gap: usize,
    pub state: usize,
}

/// A single statistical unit. States are 0-based in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub path_id: u64,
    pub covariates: CovariatePoint,
    pub initial_state: usize,
    pub events: Vec<Observation>,
}

/// One observed transition `from → to` after `gap` time units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub from: usize,
    pub to: usize,
    pub gap: usize,
}

impl SamplePath {
    pub fn transitions(&self) -> impl Iterator<Item = Transition> + '_ {
        let mut prev = self.initial_state;
        self.events.iter().map(move |ev| {
            let t = Transition { from: prev, to: ev.state, gap: ev.gap };
            prev = ev.state;
            t
        })
    }

    pub fn total_time(&self) -> usize {
        self.events.iter().map(|e| e.gap).sum()
    }
}

/// Wire form of a path, one JSON object per line. States are 1-based.
#[derive(Debug, Serialize, Deserialize)]
struct PathRecord {
    path_id: u64,
    #[serde(default)]
    z_c: Vec<f64>,
    #[serde(default)]
    z_d: Vec<u32>,
    y0: usize,
    events: Vec<(usize, usize)>,
}

impl From<&SamplePath> for PathRecord {
    fn from(p: &SamplePath) -> Self {
        PathRecord {
            path_id: p.path_id,
            z_c: p.covariates.continuous.clone(),
            z_d: p.covariates.discrete.clone(),
            y0: p.initial_state + 1,
            events: p.events.iter().map(|e| (e.gap, e.state + 1)).collect(),
        }
    }
}

impl TryFrom<PathRecord> for SamplePath {
    type Error = String;

    fn try_from(r: PathRecord) -> Result<Self, String> {
        if r.y0 == 0 {
            return Err("states are numbered from 1; got y0 = 0".into());
        }
        let mut events = Vec::with_capacity(r.events.len());
        for (k, (gap, state)) in r.events.into_iter().enumerate() {
            if gap == 0 {
                return Err(format!("event {k}: gap must be >= 1"));
            }
            if state == 0 {
                return Err(format!("event {k}: states are numbered from 1"));
            }
            events.push(Observation { gap, state: state - 1 });
        }
        Ok(SamplePath {
            path_id: r.path_id,
            covariates: CovariatePoint::new(r.z_c, r.z_d),
            initial_state: r.y0 - 1,
            events,
        })
    }
}

pub fn write_jsonl<W: Write>(paths: &[SamplePath], mut out: W) -> std::io::Result<()> {
    for p in paths {
        serde_json::to_writer(&mut out, &PathRecord::from(p))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Reads a JSONL dataset; blank lines are skipped.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<SamplePath>, SimError> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PathRecord =
            serde_json::from_str(&line).map_err(|e| SimError::Dataset { line: idx + 1, reason: e.to_string() })?;
        out.push(SamplePath::try_from(record).map_err(|reason| SimError::Dataset { line: idx + 1, reason })?);
    }
    Ok(out)
}

/// Ground-truth chain of a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthSpec {
    Three,
    Five,
    Custom(StochasticMatrix),
}

impl TruthSpec {
    pub fn matrix(&self) -> StochasticMatrix {
        match self {
            TruthSpec::Three => reference_chain_3(),
            TruthSpec::Five => reference_chain_5(),
            TruthSpec::Custom(m) => m.clone(),
        }
    }
}

/// `Z_c = shift + Beta(a, b)`, `Z_d ~ Bernoulli(q)`, drawn independently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateLaw {
    pub beta_a: f64,
    pub beta_b: f64,
    pub shift: f64,
    pub bernoulli_q: f64,
}

impl Default for CovariateLaw {
    fn default() -> Self {
        Self { beta_a: 2.0, beta_b: 2.0, shift: 1.0, bernoulli_q: 0.7 }
    }
}

fn default_truth() -> TruthSpec {
    TruthSpec::Three
}

fn default_n_paths() -> usize {
    1000
}

fn default_window() -> usize {
    20
}
fn default_replications() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default = "default_truth")]
    pub truth: TruthSpec,
    #[serde(default)]
    pub with_covariates: bool,
    #[serde(default)]
    pub covariate_law: CovariateLaw,
    #[serde(default = "Psi::reference")]
    pub psi: Psi,
    #[serde(alias = "N", default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Poisson mean of the gap, per current state. Defaults to 10 for the
    /// first two states and 15 for the rest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_means: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replications")]
    pub replications: usize,
}

impl SimConfig {
    pub fn new(truth: TruthSpec, n_paths: usize, seed: u64) -> Self {
        Self {
            truth,
            with_covariates: false,
            covariate_law: CovariateLaw::default(),
            psi: Psi::reference(),
            n_paths,
            window: 20,
            gap_means: None,
            seed,
            replications: 1,
        }
    }

    pub fn states(&self) -> usize {
        self.truth.matrix().dim()
    }

    pub fn gap_means(&self) -> Vec<f64> {
        match &self.gap_means {
            Some(v) => v.clone(),
            None => (0..self.states()).map(|i| if i < 2 { 10.0 } else { 15.0 }).collect(),
        }
    }

    pub fn link(&self) -> Option<LinkModel> {
        self.with_covariates.then(|| LinkModel::new(self.truth.matrix(), self.psi.clone()))
    }

    /// Transition matrix governing paths with covariates `z`.
    pub fn truth_at(&self, z: &CovariatePoint) -> StochasticMatrix {
        match self.link() {
            Some(link) if !z.is_unconditional() => link.evaluate(z),
            _ => self.truth.matrix(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |field, reason: &str| Err(SimError::InvalidConfig { field, reason: reason.to_string() });
        let s = self.states();
        if self.n_paths == 0 {
            return invalid("n_paths", "must be at least 1");
        }
        if self.window < 2 {
            return invalid("window", "must be at least 2");
        }
        if self.replications == 0 {
            return invalid("replications", "must be at least 1");
        }
        let means = self.gap_means();
        if means.len() != s {
            return invalid("gap_means", &format!("needs one entry per state ({s}), got {}", means.len()));
        }
        if let Some(bad) = means.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
            return invalid("gap_means", &format!("entries must be positive, got {bad}"));
        }
        if self.with_covariates {
            let law = &self.covariate_law;
            if !(law.beta_a > 0.0 && law.beta_b > 0.0) {
                return invalid("covariate_law", "beta parameters must be positive");
            }
            if !(0.0..=1.0).contains(&law.bernoulli_q) {
                return invalid("covariate_law", "bernoulli_q must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to key independent per-path streams.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn path_rng(seed: u64, replication: u64, path_id: u64) -> ChaCha8Rng {
    let key = mix(mix(mix(seed) ^ replication) ^ path_id);
    ChaCha8Rng::seed_from_u64(key)
}

/// Lazily extended table of `P, P², P³, …`.
struct PowerTable {
    base: DMatrix<f64>,
    powers: Vec<DMatrix<f64>>,
}

impl PowerTable {
    fn new(p: &StochasticMatrix) -> Self {
        Self { base: p.as_matrix().clone(), powers: vec![p.as_matrix().clone()] }
    }

    fn get(&mut self, ell: usize) -> &DMatrix<f64> {
        while self.powers.len() < ell {
            let next = self.powers.last().unwrap() * &self.base;
            self.powers.push(next);
        }
        &self.powers[ell - 1]
    }
}

fn draw_row<R: Rng>(rng: &mut R, m: &DMatrix<f64>, row: usize) -> usize {
    let u: f64 = rng.gen();
    let n = m.ncols();
    let mut acc = 0.0;
    for j in 0..n {
        acc += m[(row, j)];
        if u < acc {
            return j;
        }
    }
    // Rounding left the cumulative sum just below 1; take the last state
    // with positive mass.
    (0..n).rev().find(|&j| m[(row, j)] > 0.0).unwrap_or(n - 1)
}

/// Deterministic path generator for one validated configuration.
pub struct PathSimulator {
    cfg: SimConfig,
    truth: StochasticMatrix,
    link: Option<LinkModel>,
    gap_laws: Vec<Poisson<f64>>,
}

impl PathSimulator {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let gap_laws = cfg.gap_means().iter().map(|&m| Poisson::new(m).expect("validated mean")).collect();
        Ok(Self { truth: cfg.truth.matrix(), link: cfg.link(), gap_laws, cfg })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Path `path_id` of replication `replication`; depends on nothing else.
    pub fn path(&self, replication: u64, path_id: u64) -> SamplePath {
        let mut rng = path_rng(self.cfg.seed, replication, path_id);
        let s = self.truth.dim();
        let (covariates, chain) = match &self.link {
            Some(link) => {
                let law = &self.cfg.covariate_law;
                let beta = Beta::new(law.beta_a, law.beta_b).expect("validated beta law");
                let bern = Bernoulli::new(law.bernoulli_q).expect("validated probability");
                let zc = law.shift + beta.sample(&mut rng);
                let zd = u32::from(bern.sample(&mut rng));
                let z = CovariatePoint::new(vec![zc], vec![zd]);
                let p = link.evaluate(&z);
                (z, p)
            }
            None => (CovariatePoint::unconditional(), self.truth.clone()),
        };
        let mut table = PowerTable::new(&chain);
        let initial_state = rng.gen_range(0..s);
        let mut state = initial_state;
        let mut elapsed = 0;
        let mut events = Vec::new();
        while elapsed < self.cfg.window {
            let gap = 1 + self.gap_laws[state].sample(&mut rng) as usize;
            let next = draw_row(&mut rng, table.get(gap), state);
            events.push(Observation { gap, state: next });
            elapsed += gap;
            state = next;
        }
        SamplePath { path_id, covariates, initial_state, events }
    }

    /// Paths `0..n_paths` of one replication, generated lazily in order.
    pub fn stream(&self, replication: u64) -> impl Iterator<Item = SamplePath> + '_ {
        (0..self.cfg.n_paths as u64).map(move |id| self.path(replication, id))
    }

    /// First `n` paths of one replication, in path-id order.
    pub fn paths(&self, replication: u64, n: usize) -> Vec<SamplePath> {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            (0..n as u64).into_par_iter().map(|id| self.path(replication, id)).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..n as u64).map(|id| self.path(replication, id)).collect()
        }
    }
}

/// All `n_paths` paths of replication `replication`.
pub fn simulate_paths(cfg: &SimConfig, replication: u64) -> Result<Vec<SamplePath>, SimError> {
    let sim = PathSimulator::new(cfg.clone())?;
    Ok(sim.paths(replication, cfg.n_paths))
}

/// Number of observed transitions per gap length.
pub fn gap_histogram<'a, I>(paths: I) -> BTreeMap<usize, usize>
where
    I: IntoIterator<Item = &'a SamplePath>,
{
    let mut hist = BTreeMap::new();
    for p in paths {
        for e in &p.events {
            *hist.entry(e.gap).or_insert(0) += 1;
        }
    }
    hist
}
