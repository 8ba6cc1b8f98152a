//! Dense matrix functions for small transition matrices: exponential,
//! principal real logarithm, eigenvalue diagnostics and embeddability checks.
//!
//! Everything here is written for matrices of dimension up to about 20 and
//! works on `nalgebra::DMatrix<f64>` storage.

use nalgebra::{Complex, DMatrix, DVector, Schur};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Imaginary-part tolerance for "eigenvalue lies on the branch cut".
pub const BRANCH_CUT_IMAG_TOL: f64 = 1e-10;
/// Real-part tolerance for "eigenvalue lies on the branch cut".
pub const BRANCH_CUT_REAL_TOL: f64 = 1e-12;
/// Eigenvalues with modulus below this are treated as zero.
pub const SINGULAR_TOL: f64 = 1e-12;

const SQRT_TOL: f64 = 1e-14;
const SQRT_MAX_ITER: usize = 100;
const MAX_SQUARE_ROOTS: usize = 64;
/// Square roots are taken until `‖A^(1/2^k) − I‖₁` drops below this.
const LOG_SERIES_RADIUS: f64 = 0.25;
const LOG_QUADRATURE_NODES: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatFunError {
    #[error("matrix must be square with dimension >= 2, got {rows}x{cols}")]
    Shape { rows: usize, cols: usize },
    #[error("matrix has a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix entries too large: exponential overflows")]
    Overflow,
    #[error("eigenvalue {re:+.3e}{im:+.3e}i lies on the closed negative real axis")]
    NegativeEigenvalue { re: f64, im: f64 },
    #[error("matrix is singular (eigenvalue modulus {modulus:.3e})")]
    Singular { modulus: f64 },
    #[error("spectral radius of A - I is {radius:.4}, series diverges")]
    DivergenceRisk { radius: f64 },
    #[error("square-root iteration did not converge")]
    NotConverged,
}

/// A real square matrix with finite entries and dimension at least 2.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix(DMatrix<f64>);

impl SquareMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self, MatFunError> {
        if m.nrows() != m.ncols() || m.nrows() < 2 {
            return Err(MatFunError::Shape { rows: m.nrows(), cols: m.ncols() });
        }
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                if !m[(i, j)].is_finite() {
                    return Err(MatFunError::NonFinite { row: i, col: j });
                }
            }
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatFunError> {
        let n = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(MatFunError::Shape { rows: n, cols: bad.len() });
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
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

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim()).map(|i| self.0.row(i).iter().copied().collect()).collect()
    }
}

impl std::ops::Index<(usize, usize)> for SquareMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// Eigenvalues of a real matrix with the two distances used to decide
/// whether a principal logarithm exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub eigenvalues: Vec<Complex<f64>>,
    pub min_modulus: f64,
    pub dist_to_neg_axis: f64,
}

impl Spectrum {
    pub fn spectral_radius(&self) -> f64 {
        self.eigenvalues.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// Distance from `z` to the half-line `(−∞, 0]`.
pub fn dist_to_neg_axis(z: Complex<f64>) -> f64 {
    if z.re <= 0.0 {
        z.im.abs()
    } else {
        z.norm()
    }
}

pub fn spectrum(a: &SquareMatrix) -> Spectrum {
    let eigenvalues = eigenvalues(a.as_matrix());
    let min_modulus = eigenvalues.iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min);
    let dist = eigenvalues.iter().map(|&z| dist_to_neg_axis(z)).fold(f64::INFINITY, f64::min);
    Spectrum { eigenvalues, min_modulus, dist_to_neg_axis: dist }
}

fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    let n = m.nrows();
    let scale = max_norm(m);
    // nalgebra's Schur never converges on the zero matrix.
    if scale == 0.0 {
        return vec![Complex::new(0.0, 0.0); n];
    }
    if let Some(schur) = Schur::try_new(m.clone(), f64::EPSILON, 10_000) {
        return schur.complex_eigenvalues().iter().copied().collect();
    }
    let schur =
        Schur::try_new(m / scale, 4.0 * f64::EPSILON, 100_000).expect("real Schur iteration failed to converge");
    schur.complex_eigenvalues().iter().map(|z| z * scale).collect()
}

pub fn max_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

pub fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Largest singular value, by power iteration on `UᵀU`.
///
/// Iterates until the Rayleigh quotient changes by less than `1e-10`
/// relative to its value.
pub fn spectral_norm(u: &DMatrix<f64>) -> f64 {
    let gram = u.transpose() * u;
    let n = gram.ncols();
    if n == 0 || max_norm(&gram) == 0.0 {
        return 0.0;
    }
    // Fixed, irregular start vector: deterministic and not aligned with any
    // coordinate or with the all-ones direction.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.37 * ((i as f64 + 1.0) * 1.618_033_988_7).fract());
    v /= v.norm();
    let mut lambda = 0.0_f64;
    for _ in 0..100_000 {
        let w = &gram * &v;
        let next = v.dot(&w);
        let wn = w.norm();
        if wn == 0.0 {
            return 0.0;
        }
        v = w / wn;
        if (next - lambda).abs() <= 1e-10 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max(0.0).sqrt()
}

// Padé coefficients for the degree-13 approximant, with the theta thresholds
// below which lower degrees already reach double precision.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA3: f64 = 1.495585217958292e-2;
const THETA5: f64 = 2.53939833006323e-1;
const THETA7: f64 = 9.504178996162932e-1;
const THETA9: f64 = 2.097847961257068;
const THETA13: f64 = 5.371920351148152;

fn pade_coeffs(m: usize) -> &'static [f64] {
    const P3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
    const P5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
    const P7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
    const P9: [f64; 10] =
        [17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0, 2162160.0, 110880.0, 3960.0, 90.0, 1.0];
    match m {
        3 => &P3,
        5 => &P5,
        7 => &P7,
        9 => &P9,
        _ => &PADE13,
    }
}

/// Matrix exponential by scaling and squaring with a diagonal Padé
/// approximant (degrees 3 to 13, chosen from the 1-norm).
pub fn mat_exp(q: &SquareMatrix) -> Result<SquareMatrix, MatFunError> {
    let a = q.as_matrix();
    let n = a.nrows();
    if a.iter().all(|&x| x == 0.0) {
        return Ok(SquareMatrix::identity(n));
    }
    let norm = one_norm(a);
    if !norm.is_finite() {
        return Err(MatFunError::Overflow);
    }
    let id = DMatrix::<f64>::identity(n, n);

    let (degree, squarings) = if norm <= THETA3 {
        (3, 0)
    } else if norm <= THETA5 {
        (5, 0)
    } else if norm <= THETA7 {
        (7, 0)
    } else if norm <= THETA9 {
        (9, 0)
    } else {
        let s = (norm / THETA13).log2().ceil().max(0.0) as i32;
        (13, s)
    };
    if squarings > 1000 {
        return Err(MatFunError::Overflow);
    }
    let scaled = a * 2f64.powi(-squarings);
    let c = pade_coeffs(degree);
    let a2 = &scaled * &scaled;

    let (u, v) = if degree == 13 {
        let a4 = &a2 * &a2;
        let a6 = &a4 * &a2;
        let inner_u = &a6 * (c[13] * &a6 + c[11] * &a4 + c[9] * &a2);
        let u = &scaled * (inner_u + c[7] * &a6 + c[5] * &a4 + c[3] * &a2 + c[1] * &id);
        let inner_v = &a6 * (c[12] * &a6 + c[10] * &a4 + c[8] * &a2);
        let v = inner_v + c[6] * &a6 + c[4] * &a4 + c[2] * &a2 + c[0] * &id;
        (u, v)
    } else {
        // Even powers of the scaled matrix, A^0, A^2, A^4, ...
        let mut powers = vec![id.clone(), a2.clone()];
        while powers.len() * 2 <= degree {
            let next = powers.last().unwrap() * &a2;
            powers.push(next);
        }
        let mut u_sum = DMatrix::<f64>::zeros(n, n);
        let mut v_sum = DMatrix::<f64>::zeros(n, n);
        for k in 0..=degree / 2 {
            u_sum += c[2 * k + 1] * &powers[k];
            v_sum += c[2 * k] * &powers[k];
        }
        (&scaled * u_sum, v_sum)
    };

    let denom = &v - &u;
    let numer = &v + &u;
    let mut r = denom.lu().solve(&numer).ok_or(MatFunError::Overflow)?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    if r.iter().any(|x| !x.is_finite()) {
        return Err(MatFunError::Overflow);
    }
    Ok(SquareMatrix(r))
}

/// Checks the principal-log preconditions against a computed spectrum.
pub fn check_log_domain(spec: &Spectrum) -> Result<(), MatFunError> {
    for z in &spec.eigenvalues {
        if z.norm() < SINGULAR_TOL {
            return Err(MatFunError::Singular { modulus: z.norm() });
        }
    }
    for z in &spec.eigenvalues {
        if z.im.abs() < BRANCH_CUT_IMAG_TOL && z.re <= BRANCH_CUT_REAL_TOL {
            return Err(MatFunError::NegativeEigenvalue { re: z.re, im: z.im });
        }
    }
    Ok(())
}

/// Principal square root by the Denman–Beavers coupled iteration.
fn sqrt_denman_beavers(a: &DMatrix<f64>) -> Result<DMatrix<f64>, MatFunError> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::<f64>::identity(n, n);
    for _ in 0..SQRT_MAX_ITER {
        let y_inv = y.clone().try_inverse().ok_or(MatFunError::Singular { modulus: 0.0 })?;
        let z_inv = z.clone().try_inverse().ok_or(MatFunError::Singular { modulus: 0.0 })?;
        let y_next = 0.5 * (&y + z_inv);
        let z_next = 0.5 * (&z + y_inv);
        let change = one_norm(&(&y_next - &y));
        let scale = one_norm(&y_next);
        y = y_next;
        z = z_next;
        if change <= SQRT_TOL * scale {
            return Ok(y);
        }
    }
    Err(MatFunError::NotConverged)
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
fn gauss_legendre_unit(m: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(m);
    for k in 0..m {
        // Chebyshev-like initial guess, then Newton on P_m.
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut deriv = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=m {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            deriv = m as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / deriv;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * deriv * deriv);
        out.push(((x + 1.0) / 2.0, w / 2.0));
    }
    out
}

/// `log(I + X)` for small `‖X‖` by Gauss–Legendre quadrature of
/// `X ∫₀¹ (I + tX)⁻¹ dt`, which is the diagonal Padé approximant.
fn log1p_quadrature(x: &DMatrix<f64>) -> Result<DMatrix<f64>, MatFunError> {
    let n = x.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let mut acc = DMatrix::<f64>::zeros(n, n);
    for (t, w) in gauss_legendre_unit(LOG_QUADRATURE_NODES) {
        let shifted = &id + t * x;
        let solved = shifted.lu().solve(x).ok_or(MatFunError::Singular { modulus: 0.0 })?;
        acc += w * solved;
    }
    Ok(acc)
}

/// Principal real logarithm by inverse scaling and squaring.
pub fn mat_log_principal(a: &SquareMatrix) -> Result<SquareMatrix, MatFunError> {
    check_log_domain(&spectrum(a))?;
    let n = a.dim();
    let id = DMatrix::<f64>::identity(n, n);
    let mut root = a.as_matrix().clone();
    let mut k = 0;
    while one_norm(&(&root - &id)) >= LOG_SERIES_RADIUS {
        if k == MAX_SQUARE_ROOTS {
            return Err(MatFunError::NotConverged);
        }
        root = sqrt_denman_beavers(&root)?;
        k += 1;
    }
    let log_root = log1p_quadrature(&(root - &id))?;
    Ok(SquareMatrix(log_root * 2f64.powi(k as i32)))
}

/// Partial sum of `B − B²/2 + B³/3 − …` with `B = A − I`.
pub fn mercator_log(a: &SquareMatrix, terms: usize) -> Result<SquareMatrix, MatFunError> {
    let n = a.dim();
    let b = a.as_matrix() - DMatrix::<f64>::identity(n, n);
    let radius = spectrum(&SquareMatrix(b.clone())).spectral_radius();
    if radius >= 1.0 {
        return Err(MatFunError::DivergenceRisk { radius });
    }
    let mut acc = DMatrix::<f64>::zeros(n, n);
    let mut power = b.clone();
    for k in 1..=terms {
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        acc += (sign / k as f64) * &power;
        power = &power * &b;
    }
    Ok(SquareMatrix(acc))
}

/// Whether `P⁻¹` is a nonsingular M-matrix, i.e. `P⁻¹ = sI − B` with
/// `B ≥ 0` and `s > ρ(B)`. Singular input yields `false`.
pub fn is_m_matrix_inverse(p: &SquareMatrix) -> bool {
    let n = p.dim();
    let inv = match p.as_matrix().clone().try_inverse() {
        Some(inv) if inv.iter().all(|x| x.is_finite()) => inv,
        _ => return false,
    };
    let tol = 1e-12 * max_norm(&inv).max(1.0);
    for i in 0..n {
        for j in 0..n {
            if i != j && inv[(i, j)] > tol {
                return false;
            }
        }
    }
    let s = (0..n).map(|i| inv[(i, i)]).fold(f64::NEG_INFINITY, f64::max);
    if s <= 0.0 {
        return false;
    }
    let b = DMatrix::from_fn(n, n, |i, j| {
        let v = if i == j { s - inv[(i, j)] } else { -inv[(i, j)] };
        v.max(0.0)
    });
    let rho = if max_norm(&b) == 0.0 { 0.0 } else { eigenvalues(&b).iter().map(|z| z.norm()).fold(0.0, f64::max) };
    s > rho
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorUniqueness {
    Unique,
    Inconclusive,
}

/// Sufficient conditions for the generator of an embeddable matrix to be
/// unique: `min P_ii > 1/2`, or `min P_ii · det P > e^{−π} ∏ P_ii`.
pub fn generator_uniqueness_check(p: &SquareMatrix) -> GeneratorUniqueness {
    let diag: Vec<f64> = (0..p.dim()).map(|i| p[(i, i)]).collect();
    let min_diag = diag.iter().copied().fold(f64::INFINITY, f64::min);
    if min_diag > 0.5 {
        return GeneratorUniqueness::Unique;
    }
    let det = p.as_matrix().determinant();
    let prod: f64 = diag.iter().product();
    if min_diag * det > (-std::f64::consts::PI).exp() * prod {
        GeneratorUniqueness::Unique
    } else {
        GeneratorUniqueness::Inconclusive
    }
}
