//! The convective operator `B(u) = u^delta u_x`, the reaction operator
//! `c(u) = u (1 - u^delta)(u^delta - gamma)`, the trilinear form `b`, the
//! cut-off mollifier `M_R`, and empirical audits of the local Lipschitz
//! bounds.
//!
//! Powers of the state: for integer `delta` the ordinary power is used; for
//! non-integer `delta` the base power is extended oddly,
//! `u^delta := sign(u) |u|^delta`, and every composite (`u^{delta+1}`,
//! `u^{2delta+1}`) is built from the factored forms above. This keeps the
//! skew identity `(B(u), u) = 0` and the sign structure of the reaction term
//! valid for every real `delta >= 1` while coinciding with ordinary powers
//! on integers.
//!
//! Evaluation is pseudo-spectral: synthesize on a dealiased grid, operate
//! pointwise, project back to the resolved band.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng;
use crate::spectral::{
    dealias_points, derivative_grid, h1_seminorm, integrate_sine_type, l2_norm,
    project_cosine_type, to_grid, to_modes, GridField, SpectralField,
};

/// Odd-extension power: ordinary `x^delta` for integer `delta`, otherwise
/// `sign(x) |x|^delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerConvention {
    pub delta: f64,
    integer: bool,
}

impl PowerConvention {
    pub fn new(delta: f64) -> Self {
        let rounded = delta.round();
        let integer = (delta - rounded).abs() < 1e-12;
        PowerConvention { delta: if integer { rounded } else { delta }, integer }
    }

    /// Even integer powers make `u^delta u_x` cosine-type (an even number of
    /// Dirichlet sine factors), which changes how its Galerkin projection is
    /// computed; everything else extends oddly.
    pub fn is_even_integer(&self) -> bool {
        self.integer && (self.delta as i64) % 2 == 0
    }

    /// `x^delta` under the convention.
    #[inline]
    pub fn pow(&self, x: f64) -> f64 {
        if self.integer {
            x.powi(self.delta as i32)
        } else if x >= 0.0 {
            x.powf(self.delta)
        } else {
            -(-x).powf(self.delta)
        }
    }

    /// `|x|^{2(delta+1)}` (the absorption-term density), sharing the integer
    /// fast path.
    #[inline]
    pub fn abs_pow_absorb(&self, x: f64) -> f64 {
        if self.integer {
            (x * x).powi(self.delta as i32 + 1)
        } else {
            (x * x).powf(self.delta + 1.0)
        }
    }
}

/// Pointwise reaction `c(u) = u (1 - u^delta)(u^delta - gamma)` in factored
/// form; its roots are 0, `gamma^{1/delta}` and 1.
#[inline]
pub fn reaction_pointwise(x: f64, conv: &PowerConvention, gamma: f64) -> f64 {
    let p = conv.pow(x);
    x * (1.0 - p) * (p - gamma)
}

/// Trilinear form `b(u, v, w) = int u^delta v_x w dx` on a common grid,
/// with `v_x` computed spectrally from the full band of `v`. For even
/// integer `delta` the integrand is sine-type and its integral is taken
/// through the exact discrete sine coefficients; otherwise it is
/// cosine-type (or non-polynomial) and the trapezoid sum is already exact
/// (respectively the natural quadrature).
pub fn trilinear_b(u: &GridField, v: &GridField, w: &GridField, delta: f64) -> Result<f64> {
    let m = u.m_points();
    if v.m_points() != m || w.m_points() != m {
        return Err(Error::Mismatch(format!(
            "trilinear form needs one common grid, got {m}/{}/{}",
            v.m_points(),
            w.m_points()
        )));
    }
    let conv = PowerConvention::new(delta);
    let v_modes = to_modes(v, m)?;
    let v_x = derivative_grid(&v_modes, m)?;
    let integrand: Vec<f64> = u
        .values()
        .iter()
        .zip(v_x.values())
        .zip(w.values())
        .map(|((&uu, &dv), &ww)| conv.pow(uu) * dv * ww)
        .collect();
    if conv.is_even_integer() {
        Ok(integrate_sine_type(&GridField::new(integrand)))
    } else {
        Ok(integrand.iter().sum::<f64>() / (m as f64 + 1.0))
    }
}

/// Galerkin projection of `B(u) = u^delta u_x`, evaluated on a dealiased
/// grid and projected back to the band of `u`. Satisfies `(B(u), u) = 0`:
/// exactly (to roundoff) for integer `delta`, to quadrature tolerance for
/// the odd-extended non-integer powers.
pub fn convective_b(u: &SpectralField, delta: f64) -> Result<SpectralField> {
    let conv = PowerConvention::new(delta);
    let n = u.n_modes();
    // Even integer powers need the product fully resolved (degree
    // (delta+1) n <= m+1) for the exact cosine-type projection; otherwise
    // the generalized 3/2-rule grid suffices.
    let m = if conv.is_even_integer() {
        dealias_points(n, 2.0 * delta)
    } else {
        dealias_points(n, delta)
    };
    let g = to_grid(u, m)?;
    let du = derivative_grid(u, m)?;
    let vals: Vec<f64> = g
        .values()
        .iter()
        .zip(du.values())
        .map(|(&x, &dx)| conv.pow(x) * dx)
        .collect();
    let grid = GridField::new(vals);
    if conv.is_even_integer() {
        project_cosine_type(&grid, n)
    } else {
        to_modes(&grid, n)
    }
}

/// Galerkin projection of the reaction term `c(u)`.
pub fn reaction_c(u: &SpectralField, p: &ModelParams) -> Result<SpectralField> {
    let n = u.n_modes();
    // The reaction contains powers up to 2 delta + 1; resolve them fully.
    let m = dealias_points(n, 2.0 * p.delta);
    let conv = PowerConvention::new(p.delta);
    let g = to_grid(u, m)?;
    let vals: Vec<f64> = g
        .values()
        .iter()
        .map(|&x| reaction_pointwise(x, &conv, p.gamma))
        .collect();
    to_modes(&GridField::new(vals), n)
}

/// Cut-off profile: 1 on `[0, R]`, 0 on `[R+1, oo)`, bridged by the cubic
/// smoothstep `1 - (3 s^2 - 2 s^3)`, `s = r - R`, the lowest-degree
/// polynomial giving a C^1 profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub radius: f64,
}

impl CutoffSpec {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::ParameterDomain(format!(
                "cut-off radius must be > 0, got {radius}"
            )));
        }
        Ok(CutoffSpec { radius })
    }

    /// `Phi(r)`, monotone non-increasing, C^1.
    pub fn phi(&self, r: f64) -> f64 {
        let s = r - self.radius;
        if s <= 0.0 {
            1.0
        } else if s >= 1.0 {
            0.0
        } else {
            1.0 - (3.0 * s * s - 2.0 * s * s * s)
        }
    }

    /// `Phi'(r)`.
    pub fn phi_prime(&self, r: f64) -> f64 {
        let s = r - self.radius;
        if s <= 0.0 || s >= 1.0 {
            0.0
        } else {
            -6.0 * s * (1.0 - s)
        }
    }
}

/// `M_R(u) = u Phi(||u||_{L^2})`: the identity inside the ball of radius R,
/// zero beyond R + 1.
pub fn mollify(u: &SpectralField, spec: &CutoffSpec) -> SpectralField {
    u.scale(spec.phi(l2_norm(u)))
}

/// One radius rung of the local-Lipschitz audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadiusStats {
    pub radius: f64,
    pub max_b_ratio: f64,
    pub max_c_ratio: f64,
    pub pairs_used: usize,
    pub pairs_skipped: usize,
}

/// Empirical audit of the local Lipschitz bounds: sampled difference
/// quotients of `B` and `c` inside balls of growing radius, with power-law
/// fits of the growth exponents (expected at most `delta` for `B` and
/// `2 delta` for `c`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LipschitzAudit {
    pub per_radius: Vec<RadiusStats>,
    pub b_exponent: f64,
    pub c_exponent: f64,
    pub b_within_slack: bool,
    pub c_within_slack: bool,
}

/// Samples `trials` pairs `(u, v)` with `H^1` seminorm at most `r` at each
/// rung of a geometric radius grid `r/8, r/4, r/2, r`, and reports the
/// largest observed ratios `||B(u)-B(v)|| / ||u-v||_{H^1}` and
/// `||c(u)-c(v)|| / ||u-v||_{H^1}` with their growth exponents across rungs.
/// The same unit-ball directions are reused at every rung so the exponent
/// fit cannot be polluted by sampling jitter. Coincident pairs are skipped.
pub fn lipschitz_audit(
    r: f64,
    trials: usize,
    p: &ModelParams,
    rng_seed: u64,
) -> Result<LipschitzAudit> {
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::ParameterDomain(format!("radius must be > 0, got {r}")));
    }
    if trials < 1 {
        return Err(Error::ParameterDomain("need at least one trial".into()));
    }
    let n_modes = 12;
    let mut stream = rng::stream(rng_seed, &[rng::tag::SAMPLER, 0]);
    use rand::Rng;

    fn draw(stream: &mut impl Rng, n_modes: usize) -> SpectralField {
        let coeffs: Vec<f64> = (0..n_modes).map(|_| stream.random_range(-1.0..1.0)).collect();
        let f = SpectralField::from_coeffs_unchecked(coeffs);
        let h1 = h1_seminorm(&f);
        if h1 > 0.0 {
            let target = stream.random_range(0.2..1.0);
            f.scale(target / h1)
        } else {
            f
        }
    }

    // Unit-scale sample pairs, reused across radii.
    let mut base_pairs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let u = draw(&mut stream, n_modes);
        // Mix far pairs with nearby perturbations.
        let v = if stream.random_bool(0.5) {
            draw(&mut stream, n_modes)
        } else {
            let bump = draw(&mut stream, n_modes);
            u.add(&bump.scale(0.05))
        };
        base_pairs.push((u, v));
    }

    let radii: Vec<f64> = (0..4).map(|i| r / 8.0 * (2.0f64).powi(i + 1)).collect();
    let mut per_radius = Vec::new();
    for &radius in &radii {
        let mut max_b: f64 = 0.0;
        let mut max_c: f64 = 0.0;
        let mut used = 0;
        let mut skipped = 0;
        for (u0, v0) in &base_pairs {
            let u = u0.scale(radius);
            let v = v0.scale(radius);
            let diff_h1 = h1_seminorm(&u.sub(&v));
            if diff_h1 == 0.0 {
                skipped += 1;
                continue;
            }
            used += 1;
            let db = l2_norm(&convective_b(&u, p.delta)?.sub(&convective_b(&v, p.delta)?));
            let dc = l2_norm(&reaction_c(&u, p)?.sub(&reaction_c(&v, p)?));
            max_b = max_b.max(db / diff_h1);
            max_c = max_c.max(dc / diff_h1);
        }
        per_radius.push(RadiusStats {
            radius,
            max_b_ratio: max_b,
            max_c_ratio: max_c,
            pairs_used: used,
            pairs_skipped: skipped,
        });
    }

    let fit = |pick: &dyn Fn(&RadiusStats) -> f64| -> f64 {
        let pts: Vec<(f64, f64)> = per_radius
            .iter()
            .filter(|s| pick(s) > 0.0)
            .map(|s| (s.radius.ln(), pick(s).ln()))
            .collect();
        crate::noise::least_squares_slope(&pts)
    };
    let b_exponent = fit(&|s| s.max_b_ratio);
    let c_exponent = fit(&|s| s.max_c_ratio);
    Ok(LipschitzAudit {
        per_radius,
        b_exponent,
        c_exponent,
        b_within_slack: b_exponent <= p.delta + 0.2,
        c_within_slack: c_exponent <= 2.0 * p.delta + 0.2,
    })
}

/// Convenience: `(B(u), u)` in one call, used by the skew-identity checks.
pub fn convective_skew_pairing(u: &SpectralField, delta: f64) -> Result<f64> {
    Ok(convective_b(u, delta)?.dot(u))
}
