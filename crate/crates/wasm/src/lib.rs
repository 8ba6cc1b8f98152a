//! Browser bindings. Each export has a plain Rust twin returning a
//! serializable struct, which is what the native tests exercise.

use kmarkov::estimator::p_hat_ell;
use kmarkov::estimator::{estimate, EstimatorConfig, LagRange, RegMode};
use kmarkov::harness::build_bank;
use kmarkov::markov::{matrix_power, CovariateIndex, CovariatePoint, Psi, StochasticMatrix};
use kmarkov::matfun::{generator_uniqueness_check, spectral_norm, spectrum, GeneratorUniqueness};
use kmarkov::simulator::{simulate_paths, SimConfig, TruthSpec};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[wasm_bindgen(start)]
pub fn start() {
    console_error_panic_hook::set_once();
}

#[derive(Debug, Serialize)]
pub struct LinkView {
    pub psi: f64,
    pub matrix: Vec<Vec<f64>>,
    pub eigenvalues: Vec<(f64, f64)>,
    pub min_diagonal: f64,
    pub unique_generator: bool,
}

fn truth(name: &str) -> Result<TruthSpec, String> {
    match name {
        "three" | "3" => Ok(TruthSpec::Three),
        "five" | "5" => Ok(TruthSpec::Five),
        other => Err(format!("unknown chain `{other}`, expected three or five")),
    }
}

/// Transition matrix of the reference link model at `(z_c, z_d)`.
pub fn link_view(chain: &str, z_c: f64, z_d: u32) -> Result<LinkView, String> {
    let mut cfg = SimConfig::new(truth(chain)?, 1, 0);
    cfg.with_covariates = true;
    let z = CovariatePoint::new(vec![z_c], vec![z_d]);
    let p = cfg.truth_at(&z);
    let spec = spectrum(&p.to_square());
    Ok(LinkView {
        psi: Psi::reference().eval(&z),
        matrix: p.rows(),
        eigenvalues: spec.eigenvalues.iter().map(|c| (c.re, c.im)).collect(),
        min_diagonal: (0..p.dim()).map(|i| p[(i, i)]).fold(f64::INFINITY, f64::min),
        unique_generator: generator_uniqueness_check(&p.to_square()) == GeneratorUniqueness::Unique,
    })
}

#[derive(Debug, Serialize)]
pub struct DemoEstimate {
    pub n_paths: usize,
    pub truth: Vec<Vec<f64>>,
    pub estimate: Option<Vec<Vec<f64>>>,
    pub spectral_error: Option<f64>,
    pub weights: Vec<(usize, f64)>,
    pub regularized_lags: usize,
    pub warning: Option<String>,
}

/// Simulates `n` paths and estimates the transition matrix at `(z_c, z_d)`,
/// or unconditionally when `covariates` is false.
pub fn demo_estimate(
    chain: &str,
    n: usize,
    seed: u64,
    covariates: bool,
    z_c: f64,
    z_d: u32,
    c: f64,
) -> Result<DemoEstimate, String> {
    if n == 0 || n > 200_000 {
        return Err("number of paths must be between 1 and 200000".into());
    }
    let mut cfg = SimConfig::new(truth(chain)?, n, seed);
    cfg.with_covariates = covariates;
    let point = if covariates { CovariatePoint::new(vec![z_c], vec![z_d]) } else { CovariatePoint::unconditional() };
    let paths = simulate_paths(&cfg, 0).map_err(|e| e.to_string())?;
    let mut est = EstimatorConfig::default();
    est.schedule.c = c;
    let bank = build_bank(&est, std::slice::from_ref(&point), cfg.states(), &paths).map_err(|e| e.to_string())?;
    let p = cfg.truth_at(&point);
    let out = match estimate(&bank, 0, LagRange::default(), RegMode::Weighted) {
        Ok(b) => DemoEstimate {
            n_paths: n,
            truth: p.rows(),
            spectral_error: Some(spectral_norm(&(b.aggregated.as_matrix() - p.as_matrix()))),
            estimate: Some(b.aggregated.rows()),
            weights: b.weights.iter().map(|(&l, &w)| (l, w)).collect(),
            regularized_lags: b.regularized_lags(),
            warning: None,
        },
        Err(e) => DemoEstimate {
            n_paths: n,
            truth: p.rows(),
            estimate: None,
            spectral_error: None,
            weights: Vec::new(),
            regularized_lags: 0,
            warning: Some(e.to_string()),
        },
    };
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct RootView {
    pub ell: usize,
    pub power: Vec<Vec<f64>>,
    pub root: Vec<Vec<f64>>,
    pub generator: Vec<Vec<f64>>,
    pub spectral_error: f64,
    pub regularized: bool,
}

/// Forms `P^ℓ` for a reference chain and takes its `ℓ`-th root back.
pub fn lag_root(chain: &str, ell: usize) -> Result<RootView, String> {
    if !(1..=50).contains(&ell) {
        return Err("ℓ must be between 1 and 50".into());
    }
    let p: StochasticMatrix = truth(chain)?.matrix();
    let a = matrix_power(&p, ell);
    let fit = p_hat_ell(&a, ell, RegMode::Weighted).map_err(|e| e.to_string())?;
    let g = fit.generator.as_matrix();
    Ok(RootView {
        ell,
        power: a.rows(),
        root: fit.p_hat.rows(),
        generator: g.row_iter().map(|r| r.iter().copied().collect()).collect(),
        spectral_error: spectral_norm(&(fit.p_hat.as_matrix() - p.as_matrix())),
        regularized: fit.regularized,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<JsValue, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_wasm_bindgen::to_value(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = linkMatrix)]
pub fn link_matrix_js(chain: &str, z_c: f64, z_d: u32) -> Result<JsValue, JsError> {
    to_js(link_view(chain, z_c, z_d))
}

#[wasm_bindgen(js_name = simulateAndEstimate)]
pub fn simulate_and_estimate_js(
    chain: &str,
    n: usize,
    seed: u32,
    covariates: bool,
    z_c: f64,
    z_d: u32,
    c: f64,
) -> Result<JsValue, JsError> {
    to_js(demo_estimate(chain, n, seed as u64, covariates, z_c, z_d, c))
}

#[wasm_bindgen(js_name = lagRoot)]
pub fn lag_root_js(chain: &str, ell: usize) -> Result<JsValue, JsError> {
    to_js(lag_root(chain, ell))
}
