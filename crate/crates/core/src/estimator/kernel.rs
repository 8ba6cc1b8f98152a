//! Smoothing kernels, the per-path bandwidth schedule and the closed-form
//! bandwidth constants.

use serde::{Deserialize, Serialize};

use super::EstimatorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    #[default]
    Gaussian,
    Epanechnikov,
    Triangular,
}

impl KernelKind {
    /// Univariate density `K(u)`.
    pub fn density(self, u: f64) -> f64 {
        match self {
            KernelKind::Gaussian => (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            KernelKind::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
            KernelKind::Triangular => (1.0 - u.abs()).max(0.0),
        }
    }

    /// `c_K = ∫ K²`.
    pub fn roughness(self) -> f64 {
        match self {
            KernelKind::Gaussian => 1.0 / (2.0 * std::f64::consts::PI.sqrt()),
            KernelKind::Epanechnikov => 0.6,
            KernelKind::Triangular => 2.0 / 3.0,
        }
    }

    /// `μ₂ = ∫ u² K(u) du`.
    pub fn second_moment(self) -> f64 {
        match self {
            KernelKind::Gaussian => 1.0,
            KernelKind::Epanechnikov => 0.2,
            KernelKind::Triangular => 1.0 / 6.0,
        }
    }
}

/// Bandwidth `h_m = c · σ · m^(−α)` and weight `w_m = m^β` for the `m`-th
/// path absorbed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSchedule {
    pub c: f64,
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_scale: Option<f64>,
}

impl Default for BandwidthSchedule {
    fn default() -> Self {
        Self { c: 1.0, alpha: 0.2, beta: 0.0, sigma_scale: None }
    }
}

impl BandwidthSchedule {
    pub fn bandwidth(&self, m: u64) -> f64 {
        self.c * self.sigma_scale.unwrap_or(1.0) * (m as f64).powf(-self.alpha)
    }

    pub fn weight(&self, m: u64) -> f64 {
        if self.beta == 0.0 {
            1.0
        } else {
            (m as f64).powf(self.beta)
        }
    }

    /// Checks `c, σ > 0`, `0 < α < 1/p` and `0 ≤ β ≤ αp`. With no continuous
    /// covariates (`p = 0`) only the sign constraints apply.
    pub fn validate(&self, p: usize) -> Result<(), EstimatorError> {
        let bad = |what: &str| Err(EstimatorError::InvalidSchedule(what.to_string()));
        if !(self.c > 0.0 && self.c.is_finite()) {
            return bad("c must be positive");
        }
        if let Some(s) = self.sigma_scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad("sigma_scale must be positive");
            }
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return bad("alpha must be positive");
        }
        if self.beta.is_nan() || self.beta < 0.0 {
            return bad("beta must be nonnegative");
        }
        if p > 0 {
            let pf = p as f64;
            if self.alpha * pf >= 1.0 {
                return bad("alpha must be below 1/p");
            }
            if self.beta > self.alpha * pf + 1e-15 {
                return bad("beta must not exceed alpha * p");
            }
        }
        Ok(())
    }

    /// Same schedule, comparing `sigma_scale` only when both sides set it.
    pub fn compatible_with(&self, other: &BandwidthSchedule) -> bool {
        let sigma_ok = match (self.sigma_scale, other.sigma_scale) {
            (Some(a), Some(b)) => a == b,
            _ => true,
        };
        self.c == other.c && self.alpha == other.alpha && self.beta == other.beta && sigma_ok
    }
}

/// Rate-optimal bandwidth exponent `1/(p+4)`.
pub fn optimal_exponent(p: usize) -> f64 {
    1.0 / (p as f64 + 4.0)
}

/// Factor `c_r(β) = [(βp + p + 2) / (2(p + 4))]^{1/(p+4)}` relating the
/// optimal recursive bandwidth to the non-recursive one. Always below 1 on
/// the admissible range `0 ≤ β ≤ p/(p+4)`.
pub fn recursive_shrink_factor(beta: f64, p: usize) -> Result<f64, EstimatorError> {
    if p == 0 {
        return Err(EstimatorError::InvalidSchedule("shrink factor needs p >= 1".into()));
    }
    let pf = p as f64;
    let beta_max = pf * optimal_exponent(p);
    if !(0.0..=beta_max + 1e-15).contains(&beta) {
        return Err(EstimatorError::InvalidSchedule(format!("beta {beta} outside [0, {beta_max}]")));
    }
    let c = ((beta * pf + pf + 2.0) / (2.0 * (pf + 4.0))).powf(1.0 / (pf + 4.0));
    debug_assert!(c < 1.0);
    Ok(c)
}

/// Plug-in quantities for the optimal bandwidth constant at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthPlugin {
    /// `G(z)`, the smoothed joint density being estimated.
    pub g_value: f64,
    /// Trace of the Hessian of `G` in the continuous covariates.
    pub trace_hessian: f64,
    pub c_k: f64,
    pub mu2: f64,
    /// Observation window length `L`.
    pub window: f64,
}

/// Optimal constant `c` of `h_m = c m^{−α}`:
/// `[p(1+β−2α)² L c_K^p G / ((1+αp+2β){μ₂ tr H_G}²)]^α`.
pub fn optimal_bandwidth_constant(
    beta: f64,
    alpha: f64,
    p: usize,
    plugin: &BandwidthPlugin,
) -> Result<f64, EstimatorError> {
    if p == 0 || (alpha - optimal_exponent(p)).abs() > 1e-12 {
        return Err(EstimatorError::InvalidSchedule(format!("alpha must equal 1/(p+4) for p = {p}")));
    }
    if plugin.trace_hessian == 0.0 {
        return Err(EstimatorError::DegenerateHessian);
    }
    let positive = [plugin.g_value, plugin.c_k, plugin.mu2, plugin.window];
    if positive.iter().any(|x| !(*x > 0.0 && x.is_finite())) || !plugin.trace_hessian.is_finite() {
        return Err(EstimatorError::InvalidSchedule("plug-in quantities must be positive and finite".into()));
    }
    let pf = p as f64;
    let numer = pf * (1.0 + beta - 2.0 * alpha).powi(2) * plugin.window * plugin.c_k.powi(p as i32) * plugin.g_value;
    let denom = (1.0 + alpha * pf + 2.0 * beta) * (plugin.mu2 * plugin.trace_hessian).powi(2);
    Ok((numer / denom).powf(alpha))
}
