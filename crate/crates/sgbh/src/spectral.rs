//! Dirichlet sine eigenbasis of `A = -d^2/dx^2` on (0,1): transforms between
//! grid and mode space, semigroup and fractional-power actions, and the
//! discrete norms and quadrature everything else is built on.
//!
//! Conventions. The eigenpairs are `lambda_k = (k pi)^2` with orthonormal
//! eigenfunctions `e_k(x) = sqrt(2) sin(k pi x)` on (0,1). A field is stored
//! either as `n` mode coefficients against `e_k` or as samples on the uniform
//! interior grid `x_j = j/(m+1)`, `j = 1..m`; the Dirichlet endpoint values
//! are identically zero and never stored. Quadrature is the composite
//! trapezoid rule with the implicit zero endpoints, which is exactly the
//! discrete orthogonality relation of the sine basis: a grid-to-mode
//! transform followed by mode-to-grid is the identity (to roundoff) whenever
//! `m >= n`.
//!
//! Transforms run through a cached FFT plan of length `2(m+1)` (odd/even
//! extension); `reference` holds the direct `O(nm)` summations the fast path
//! is tested against.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// `lambda_k = (k pi)^2`, `k >= 1`.
pub fn eigenvalue(k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::ParameterDomain(format!(
            "eigenvalue index must be >= 1, got {k}"
        )));
    }
    Ok(lambda(k))
}

/// Unchecked eigenvalue for hot loops; `k` is 1-based.
#[inline]
pub(crate) fn lambda(k: usize) -> f64 {
    let kpi = k as f64 * PI;
    kpi * kpi
}

/// A state as `n` coefficients against the orthonormal sine basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    coeffs: Vec<f64>,
}

impl SpectralField {
    pub fn zeros(n_modes: usize) -> Self {
        SpectralField { coeffs: vec![0.0; n_modes] }
    }

    /// Unit coefficient on mode `k` (1-based), zero elsewhere.
    pub fn basis(k: usize, n_modes: usize) -> Self {
        let mut f = Self::zeros(n_modes);
        f.coeffs[k - 1] = 1.0;
        f
    }

    /// Checked constructor: every entry must be finite.
    pub fn from_coeffs(coeffs: Vec<f64>) -> Result<Self> {
        if let Some(i) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(Error::ParameterDomain(format!(
                "mode coefficient {i} is not finite"
            )));
        }
        Ok(SpectralField { coeffs })
    }

    pub(crate) fn from_coeffs_unchecked(coeffs: Vec<f64>) -> Self {
        debug_assert!(coeffs.iter().all(|c| c.is_finite()));
        SpectralField { coeffs }
    }

    pub fn n_modes(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    /// Coefficient of mode `k` (1-based); zero beyond the stored band.
    pub fn coeff(&self, k: usize) -> f64 {
        self.coeffs.get(k - 1).copied().unwrap_or(0.0)
    }

    /// Copy truncated or zero-padded to `n` modes.
    pub fn resized(&self, n: usize) -> Self {
        let mut c = self.coeffs.clone();
        c.resize(n, 0.0);
        SpectralField { coeffs: c }
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    pub fn scale(&self, s: f64) -> Self {
        SpectralField { coeffs: self.coeffs.iter().map(|c| c * s).collect() }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.n_modes(), other.n_modes(), "mode-count mismatch");
        SpectralField {
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.n_modes(), other.n_modes(), "mode-count mismatch");
        SpectralField {
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// `L^2` inner product via Parseval.
    pub fn dot(&self, other: &Self) -> f64 {
        self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a * b).sum()
    }
}

/// Samples of a Dirichlet field on the uniform interior grid `x_j = j/(m+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    values: Vec<f64>,
}

impl GridField {
    pub fn new(values: Vec<f64>) -> Self {
        GridField { values }
    }

    /// Sample a function at the interior grid points of an `m`-point grid.
    pub fn sample(m_points: usize, f: impl Fn(f64) -> f64) -> Self {
        let h = 1.0 / (m_points as f64 + 1.0);
        GridField { values: (1..=m_points).map(|j| f(j as f64 * h)).collect() }
    }

    pub fn m_points(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Trapezoid quadrature of the sampled values over (0,1); the boundary
    /// terms vanish under the Dirichlet condition.
    pub fn quadrature(&self) -> f64 {
        self.values.iter().sum::<f64>() / (self.values.len() as f64 + 1.0)
    }

    /// Quadrature of `|u|^p`.
    pub fn quadrature_abs_pow(&self, p: f64) -> f64 {
        let s: f64 = self.values.iter().map(|v| v.abs().powf(p)).sum();
        s / (self.values.len() as f64 + 1.0)
    }
}

// ---------------------------------------------------------------------------
// FFT-backed sine/cosine transforms with a process-wide plan cache.
// ---------------------------------------------------------------------------

struct SinePlan {
    m: usize,
    fft: Arc<dyn Fft<f64>>,
}

thread_local! {
    // Reused FFT workspace; transforms are hot inside the time stepper.
    static SCRATCH: std::cell::RefCell<Vec<Complex<f64>>> = const { std::cell::RefCell::new(Vec::new()) };
}

fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [Complex<f64>]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut buf = cell.borrow_mut();
        buf.clear();
        buf.resize(len, Complex::new(0.0, 0.0));
        f(&mut buf)
    })
}

fn plan(m: usize) -> Arc<SinePlan> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<SinePlan>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry(m)
        .or_insert_with(|| {
            let fft = FftPlanner::new().plan_fft_forward(2 * (m + 1));
            Arc::new(SinePlan { m, fft })
        })
        .clone()
}

impl SinePlan {
    /// `out[k-1] = sum_{j=1..m} input[j-1] sin(pi j k / (m+1))`, `k = 1..n_out`,
    /// via an odd extension to length `2(m+1)`.
    fn dst(&self, input: &[f64], n_out: usize) -> Vec<f64> {
        let len = 2 * (self.m + 1);
        with_scratch(len, |buf| {
            for (j, &v) in input.iter().enumerate() {
                buf[j + 1].re = v;
                buf[len - 1 - j].re = -v;
            }
            self.fft.process(buf);
            (1..=n_out).map(|k| -0.5 * buf[k].im).collect()
        })
    }

    /// `out[j-1] = sum_{k=1..K} coeff[k-1] cos(pi j k / (m+1))`, `j = 1..m`,
    /// via an even extension.
    fn cosine_synthesis(&self, coeff: &[f64]) -> Vec<f64> {
        let len = 2 * (self.m + 1);
        with_scratch(len, |buf| {
            for (k, &v) in coeff.iter().enumerate() {
                buf[k + 1].re += v;
                buf[len - 1 - k].re += v;
            }
            self.fft.process(buf);
            (1..=self.m).map(|j| 0.5 * buf[j].re).collect()
        })
    }

    /// Cosine moments `out[a] = sum_{j=1..m} input[j-1] cos(pi j a / (m+1))`
    /// for `a = 0..=m+1` (the implicit endpoint samples are zero).
    fn dct(&self, input: &[f64]) -> Vec<f64> {
        let len = 2 * (self.m + 1);
        with_scratch(len, |buf| {
            for (j, &v) in input.iter().enumerate() {
                buf[j + 1].re = v;
                buf[len - 1 - j].re = v;
            }
            self.fft.process(buf);
            (0..=self.m + 1).map(|a| 0.5 * buf[a].re).collect()
        })
    }
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

const MAX_GRID: usize = 1 << 22;

fn check_grid(m: usize) -> Result<()> {
    if m == 0 || m > MAX_GRID {
        return Err(Error::ParameterDomain(format!(
            "grid size {m} outside the supported range [1, {MAX_GRID}]"
        )));
    }
    Ok(())
}

/// Project grid samples onto the first `n` sine modes (quadrature analysis).
pub fn to_modes(g: &GridField, n: usize) -> Result<SpectralField> {
    if n == 0 {
        return Err(Error::ParameterDomain("n_modes must be >= 1".into()));
    }
    check_grid(g.m_points())?;
    let m = g.m_points();
    let s = plan(m).dst(g.values(), n.min(m));
    let scale = SQRT2 / (m as f64 + 1.0);
    let mut coeffs: Vec<f64> = s.into_iter().map(|v| v * scale).collect();
    coeffs.resize(n, 0.0);
    Ok(SpectralField { coeffs })
}

/// Evaluate the sine series on an `m`-point interior grid.
pub fn to_grid(f: &SpectralField, m: usize) -> Result<GridField> {
    check_grid(m)?;
    let n = f.n_modes().min(m);
    let vals = plan(m).dst(&f.coeffs()[..n], m);
    Ok(GridField { values: vals.into_iter().map(|v| v * SQRT2).collect() })
}

/// Values of the spatial derivative `u_x` on the `m`-point grid (cosine
/// synthesis of `k pi c_k`).
pub fn derivative_grid(f: &SpectralField, m: usize) -> Result<GridField> {
    check_grid(m)?;
    let n = f.n_modes().min(m);
    let scaled: Vec<f64> = f.coeffs()[..n]
        .iter()
        .enumerate()
        .map(|(i, c)| c * (i as f64 + 1.0) * PI)
        .collect();
    let vals = plan(m).cosine_synthesis(&scaled);
    Ok(GridField { values: vals.into_iter().map(|v| v * SQRT2).collect() })
}

/// Exact sine-space Galerkin projection of a *cosine-type* trigonometric
/// polynomial sampled on the grid (degree at most `m + 1`, endpoint values
/// zero). Products of an even number of Dirichlet factors — `u^delta u_x`
/// with even `delta` — are of this type, and the plain quadrature projection
/// picks up O(h^2) half-period errors there; this route instead recovers the
/// exact cosine coefficients (the trapezoid rule *is* exact on cosine pairs)
/// and converts them with the analytic integrals
/// `int_0^1 cos(a pi x) sin(k pi x) dx = [1 - (-1)^{a+k}] k / (pi (k^2 - a^2))`.
pub fn project_cosine_type(g: &GridField, n: usize) -> Result<SpectralField> {
    cosine_series_to_sine_modes(&cosine_coefficients_full(g), n)
}

/// Exact plain cosine coefficients `b_a` of a cosine-type trigonometric
/// polynomial `sum_{a=0..m+1} b_a cos(a pi x)` with zero endpoint values,
/// recovered from its interior samples.
pub fn cosine_coefficients_full(g: &GridField) -> Vec<f64> {
    let m = g.m_points();
    let moments = plan(m).dct(g.values());
    // Interior modes carry weight 2/(m+1), the ends (a = 0, m+1) weight 1/(m+1).
    let w = 1.0 / (m as f64 + 1.0);
    moments
        .iter()
        .enumerate()
        .map(|(a, v)| if a == 0 || a == m + 1 { v * w } else { v * 2.0 * w })
        .collect()
}

/// Exact plain sine coefficients `s_q` of a sine-type polynomial
/// `sum_{q=1..m} s_q sin(q pi x)` from its interior samples.
pub fn sine_coefficients_full(g: &GridField) -> Vec<f64> {
    let m = g.m_points();
    let s = plan(m).dst(g.values(), m);
    let w = 2.0 / (m as f64 + 1.0);
    s.into_iter().map(|v| v * w).collect()
}

/// Galerkin projection of the cosine series `sum_a b[a] cos(a pi x)` onto the
/// orthonormal sine modes, via the analytic integrals.
pub fn cosine_series_to_sine_modes(b: &[f64], n: usize) -> Result<SpectralField> {
    if n == 0 {
        return Err(Error::ParameterDomain("n_modes must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(n);
    for k in 1..=n {
        let mut s = 0.0;
        let mut a = if k % 2 == 0 { 1 } else { 0 };
        while a < b.len() {
            if a != k {
                s += b[a] / ((k * k) as f64 - (a * a) as f64);
            }
            a += 2;
        }
        out.push(SQRT2 * 2.0 * k as f64 / PI * s);
    }
    SpectralField::from_coeffs(out)
}

/// Exact integral over (0,1) of a *sine-type* trigonometric polynomial
/// sampled on the grid (degree at most `m`):
/// `int_0^1 sin(q pi x) dx = (1 - (-1)^q)/(q pi)`, applied to the exact
/// discrete sine coefficients.
pub fn integrate_sine_type(g: &GridField) -> f64 {
    let m = g.m_points();
    let s = plan(m).dst(g.values(), m);
    let w = 2.0 / (m as f64 + 1.0);
    let mut total = 0.0;
    let mut q = 1;
    while q <= m {
        total += s[q - 1] * w * 2.0 / (q as f64 * PI);
        q += 2;
    }
    total
}

/// Heat semigroup with a uniform shift: mode `k` is scaled by
/// `exp(-(nu lambda_k + kappa) t)`. A contraction for every `t >= 0`.
pub fn apply_semigroup(f: &SpectralField, t: f64, nu: f64, kappa: f64) -> Result<SpectralField> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::ParameterDomain(format!(
            "semigroup time must be >= 0, got {t}"
        )));
    }
    let coeffs = f
        .coeffs()
        .iter()
        .enumerate()
        .map(|(i, c)| c * (-(nu * lambda(i + 1) + kappa) * t).exp())
        .collect();
    Ok(SpectralField { coeffs })
}

/// Fractional power of `A`: mode `k` scaled by `lambda_k^sigma`. `sigma = 0`
/// is the identity; `sigma` and `-sigma` compose to the identity.
pub fn fractional_power(f: &SpectralField, sigma: f64) -> SpectralField {
    if sigma == 0.0 {
        return f.clone();
    }
    SpectralField {
        coeffs: f
            .coeffs()
            .iter()
            .enumerate()
            .map(|(i, c)| c * lambda(i + 1).powf(sigma))
            .collect(),
    }
}

/// `L^2` norm via Parseval.
pub fn l2_norm(f: &SpectralField) -> f64 {
    f.coeffs().iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// `H^1_0` seminorm `(sum lambda_k c_k^2)^{1/2}`; never below `pi * l2`.
pub fn h1_seminorm(f: &SpectralField) -> f64 {
    f.coeffs()
        .iter()
        .enumerate()
        .map(|(i, c)| lambda(i + 1) * c * c)
        .sum::<f64>()
        .sqrt()
}

/// Smallest dealiased grid for evaluating `u^delta u_x` pseudo-spectrally on
/// `n` modes: products populate frequencies up to `(delta+1) n`, so
/// `m >= ceil((delta + 2)/2 * n)` keeps the retained band alias-free. The
/// result is rounded up so that `m + 1` is 5-smooth, keeping the FFT lengths
/// cheap.
pub fn dealias_points(n_modes: usize, delta: f64) -> usize {
    let needed = ((delta + 2.0) / 2.0 * n_modes as f64).ceil() as usize;
    smooth_grid_size(needed.max(n_modes))
}

/// Smallest `m >= min_m` such that `m + 1` has no prime factor above 5.
pub fn smooth_grid_size(min_m: usize) -> usize {
    let mut m = min_m.max(1);
    loop {
        let mut v = m + 1;
        for p in [2usize, 3, 5] {
            while v % p == 0 {
                v /= p;
            }
        }
        if v == 1 {
            return m;
        }
        m += 1;
    }
}

/// The norm bundle used throughout the audits. `lp` is computed by grid
/// quadrature on a grid fine enough for the requested exponent
/// (`m >= (p + 2) n / 4`, the generalized dealiasing rule with
/// `p = 2(delta+1)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldNorms {
    pub l2: f64,
    pub h1_semi: f64,
    pub lp: f64,
}

pub fn norms(f: &SpectralField, p: f64) -> Result<FieldNorms> {
    if !(p.is_finite() && p >= 1.0) {
        return Err(Error::ParameterDomain(format!(
            "Lp exponent must be >= 1, got {p}"
        )));
    }
    let m = smooth_grid_size(((p + 2.0) / 4.0 * f.n_modes() as f64).ceil() as usize);
    let grid = to_grid(f, m)?;
    Ok(FieldNorms {
        l2: l2_norm(f),
        h1_semi: h1_seminorm(f),
        lp: grid.quadrature_abs_pow(p).powf(1.0 / p),
    })
}

/// Direct `O(nm)` transforms; the FFT path must agree with these to 1e-10.
pub mod reference {
    use super::*;

    pub fn to_modes(g: &GridField, n: usize) -> SpectralField {
        let m = g.m_points();
        let h = 1.0 / (m as f64 + 1.0);
        let coeffs = (1..=n)
            .map(|k| {
                let s: f64 = g
                    .values()
                    .iter()
                    .enumerate()
                    .map(|(jm1, &v)| v * SQRT2 * (k as f64 * PI * (jm1 as f64 + 1.0) * h).sin())
                    .sum();
                s * h
            })
            .collect();
        SpectralField::from_coeffs_unchecked(coeffs)
    }

    pub fn to_grid(f: &SpectralField, m: usize) -> GridField {
        let h = 1.0 / (m as f64 + 1.0);
        let values = (1..=m)
            .map(|j| {
                f.coeffs()
                    .iter()
                    .enumerate()
                    .map(|(km1, &c)| c * SQRT2 * ((km1 as f64 + 1.0) * PI * j as f64 * h).sin())
                    .sum()
            })
            .collect();
        GridField::new(values)
    }

    pub fn derivative_grid(f: &SpectralField, m: usize) -> GridField {
        let h = 1.0 / (m as f64 + 1.0);
        let values = (1..=m)
            .map(|j| {
                f.coeffs()
                    .iter()
                    .enumerate()
                    .map(|(km1, &c)| {
                        let kpi = (km1 as f64 + 1.0) * PI;
                        c * SQRT2 * kpi * (kpi * j as f64 * h).cos()
                    })
                    .sum()
            })
            .collect();
        GridField::new(values)
    }
}
