//! Model parameters, parameter-regime validation and the closed-form
//! constants used by the bound audits downstream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients of the generalized Burgers-Huxley drift
/// `nu u_xx - alpha u^delta u_x + beta u (1 - u^delta)(u^delta - gamma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Viscosity, strictly positive.
    pub nu: f64,
    /// Advection coefficient, strictly positive.
    pub alpha: f64,
    /// Reaction strength, strictly positive.
    pub beta: f64,
    /// Reaction root in (0, 1).
    pub gamma: f64,
    /// Nonlinearity power, any real >= 1.
    pub delta: f64,
}

impl ModelParams {
    pub fn new(nu: f64, alpha: f64, beta: f64, gamma: f64, delta: f64) -> Result<Self> {
        let p = ModelParams { nu, alpha, beta, gamma, delta };
        p.check_domain()?;
        Ok(p)
    }

    pub fn check_domain(&self) -> Result<()> {
        let bad = |what: &str, v: f64| -> Error {
            Error::ParameterDomain(format!("{what} = {v} is outside its domain"))
        };
        if !(self.nu.is_finite() && self.nu > 0.0) {
            return Err(bad("nu (must be > 0)", self.nu));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(bad("alpha (must be > 0)", self.alpha));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(bad("beta (must be > 0)", self.beta));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(bad("gamma (must be in (0,1))", self.gamma));
        }
        if !(self.delta.is_finite() && self.delta >= 1.0) {
            return Err(bad("delta (must be >= 1)", self.delta));
        }
        // Pseudo-spectral grids grow like (delta + 1) n; keep them sane.
        if self.delta > 64.0 {
            return Err(bad("delta (implementation resolves delta <= 64)", self.delta));
        }
        Ok(())
    }

    /// `L^p` exponent of the absorption term, `p = 2(delta + 1)`.
    pub fn absorb_exponent(&self) -> f64 {
        2.0 * (self.delta + 1.0)
    }
}

/// Which well-posedness and ergodicity statements the parameter point
/// supports. Flags are recomputed from the fields on every call; nothing is
/// cached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeReport {
    /// Uniqueness holds with no further condition (`delta <= 2`).
    pub uniqueness_unconditional: bool,
    /// For `delta > 2`: `beta nu > 2^{2(delta-1)} alpha^2`. Vacuously true
    /// when `delta <= 2`.
    pub uniqueness_condition_met: bool,
    /// The occupation-measure LDP is claimed only for `delta` in [1, 2]
    /// under finite-trace noise.
    pub ldp_supported: bool,
    /// An invariant measure exists; for `delta > 2` this needs the same
    /// product condition as uniqueness.
    pub invariant_measure_supported: bool,
}

/// Threshold of the large-`delta` uniqueness condition,
/// `2^{2(delta-1)} alpha^2`.
pub fn uniqueness_threshold(alpha: f64, delta: f64) -> f64 {
    (2.0f64).powf(2.0 * (delta - 1.0)) * alpha * alpha
}

/// Validates the parameter point and reports which regimes of the
/// well-posedness table it sits in. Pure: same input, same report.
pub fn validate_params(p: &ModelParams) -> Result<RegimeReport> {
    p.check_domain()?;
    let unconditional = p.delta <= 2.0;
    let condition_met = unconditional || p.beta * p.nu > uniqueness_threshold(p.alpha, p.delta);
    Ok(RegimeReport {
        uniqueness_unconditional: unconditional,
        uniqueness_condition_met: condition_met,
        ldp_supported: unconditional,
        invariant_measure_supported: condition_met,
    })
}

/// The constant `C(beta, delta) = (2 / (beta (delta+1)))^{1/delta} * delta / (delta+1)`
/// absorbed into the drift-vs-noise energy bookkeeping; it appears on the
/// right side of every exponential-moment and recurrence bound.
pub fn cramer_constant(p: &ModelParams) -> Result<f64> {
    p.check_domain()?;
    let d = p.delta;
    Ok((2.0 / (p.beta * (d + 1.0))).powf(1.0 / d) * d / (d + 1.0))
}

/// Upper edge of the admissible exponential-tilt window,
/// `pi^2 nu / (2 ||Q||)`. Audits must use `lambda0` strictly below this.
pub fn lambda0_max(p: &ModelParams, q_norm: f64) -> Result<f64> {
    p.check_domain()?;
    if !(q_norm.is_finite() && q_norm > 0.0) {
        return Err(Error::ParameterDomain(format!(
            "operator norm of Q must be > 0, got {q_norm}"
        )));
    }
    Ok(std::f64::consts::PI.powi(2) * p.nu / (2.0 * q_norm))
}
