//! The explicit exact-controllability construction and the first-variation
//! (linearized sensitivity) solver for the cut-off dynamics.
//!
//! Controllability: given `a` and a target `b`, the linear heat flow is left
//! to smooth on `[0, t0]` and then pulled along the affine segment
//! `z(t) = ((t-t0)/(T-t0)) b + ((T-t)/(T-t0)) z(t0)`, which hits `b` at `T`
//! exactly. The linear control is derived from the closed-form path so the
//! equation `z' = -nu A z + v` holds identically for every viscosity; the
//! nonlinear control adds back the discrete convection and reaction terms,
//! `u = v + alpha B(z) - beta c(z)`, which makes `x = z` an exact solution
//! of the controlled equation by construction.
//!
//! First variation: along a frozen trajectory `u(t)` of the cut-off system
//! (drift evaluated at `M_R(u) = u Phi(||u||)`), the derivative of the flow
//! map in its initial condition solves a linear nonautonomous equation whose
//! coefficients carry `M_R` and its derivative
//! `DM_R(u) h = Phi h + (Phi'/||u||)(u, h) u`. It is stepped with the same
//! exponential-Euler scheme and the same parity-exact projections as the
//! nonlinear flow, so finite differences of the nonlinear map converge to it
//! at first order in the offset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{run_trajectory_opts, RunOptions, Scheme, SolverConfig, Trajectory};
use crate::model::ModelParams;
use crate::noise::NoiseSpec;
use crate::nonlinear::{convective_b, reaction_c, CutoffSpec, PowerConvention};
use crate::spectral::{
    apply_semigroup, cosine_coefficients_full, cosine_series_to_sine_modes, dealias_points,
    l2_norm, lambda, sine_coefficients_full, to_grid, to_modes, GridField, SpectralField,
};

/// The linear steering plan: start, target, horizon and the switch time.
#[derive(Debug, Clone)]
pub struct ControlPlan {
    pub a: SpectralField,
    pub b: SpectralField,
    pub t_end: f64,
    pub t0: f64,
    pub nu: f64,
    z_t0: SpectralField,
}

impl ControlPlan {
    pub fn n_modes(&self) -> usize {
        self.a.n_modes()
    }

    /// Closed-form controlled path: free heat flow until `t0`, affine
    /// interpolation to the target afterwards. `linear_path(T) = b` exactly.
    pub fn linear_path(&self, t: f64) -> SpectralField {
        if t <= self.t0 {
            apply_semigroup(&self.a, t, self.nu, 0.0).expect("t >= 0")
        } else {
            let span = self.t_end - self.t0;
            let wb = (t - self.t0) / span;
            self.b.scale(wb).add(&self.z_t0.scale(1.0 - wb))
        }
    }

    /// The linear control `v = z' + nu A z`, zero before the switch time;
    /// derived from the closed-form path so the ODE holds for every `nu`.
    pub fn linear_control(&self, t: f64) -> SpectralField {
        let n = self.n_modes();
        if t <= self.t0 {
            return SpectralField::zeros(n);
        }
        let span = self.t_end - self.t0;
        let z = self.linear_path(t);
        let coeffs = (0..n)
            .map(|i| {
                let z_dot = (self.b.coeff(i + 1) - self.z_t0.coeff(i + 1)) / span;
                z_dot + self.nu * lambda(i + 1) * z.coeff(i + 1)
            })
            .collect();
        SpectralField::from_coeffs_unchecked(coeffs)
    }
}

/// Builds the linear plan. `a` and `b` are brought to a common band.
pub fn linear_control(
    a: &SpectralField,
    b: &SpectralField,
    t_end: f64,
    t0: f64,
    nu: f64,
) -> Result<ControlPlan> {
    if !(t_end.is_finite() && t_end > 0.0 && t0 > 0.0 && t0 < t_end) {
        return Err(Error::ParameterDomain(format!(
            "switch time must satisfy 0 < t0 < T, got t0 = {t0}, T = {t_end}"
        )));
    }
    if !(nu.is_finite() && nu > 0.0) {
        return Err(Error::ParameterDomain(format!("nu must be > 0, got {nu}")));
    }
    let n = a.n_modes().max(b.n_modes());
    let a = a.resized(n);
    let b = b.resized(n);
    let z_t0 = apply_semigroup(&a, t0, nu, 0.0)?;
    Ok(ControlPlan { a, b, t_end, t0, nu, z_t0 })
}

/// The lifted (nonlinear) plan: the control that makes the linear path an
/// exact solution of the full equation, plus its reported `L^2(0,T; L^2)`
/// energy.
#[derive(Debug, Clone)]
pub struct LiftedControl {
    pub plan: ControlPlan,
    pub params: ModelParams,
    /// `int_0^T ||u(t)||^2 dt` by composite quadrature.
    pub control_energy: f64,
}

impl LiftedControl {
    /// `u(t) = v(t) + alpha B(z(t)) - beta c(z(t))`, evaluated with the same
    /// discrete operators the integrator uses.
    pub fn control(&self, t: f64) -> SpectralField {
        let z = self.plan.linear_path(t);
        let v = self.plan.linear_control(t);
        let b = convective_b(&z, self.params.delta).expect("band-limited path");
        let c = reaction_c(&z, &self.params).expect("band-limited path");
        v.add(&b.scale(self.params.alpha)).add(&c.scale(-self.params.beta))
    }
}

/// Lifts a linear plan to the nonlinear equation.
pub fn lift_control(plan: ControlPlan, p: &ModelParams) -> Result<LiftedControl> {
    p.check_domain()?;
    let mut lifted = LiftedControl { plan, params: *p, control_energy: 0.0 };
    // Trapezoid in time over a fixed sample grid; reported, not load-bearing.
    let samples = 512;
    let dt = lifted.plan.t_end / samples as f64;
    let mut energy = 0.0;
    for i in 0..=samples {
        let t = i as f64 * dt;
        let w = if i == 0 || i == samples { 0.5 } else { 1.0 };
        let u = lifted.control(t);
        energy += w * u.dot(&u) * dt;
    }
    lifted.control_energy = energy;
    Ok(lifted)
}

/// Residual of substituting the linear path into the controlled nonlinear
/// equation at time `t`: `||z' + nu A z + alpha B(z) - beta c(z) - u(t)||`.
pub fn substitution_residual(lift: &LiftedControl, t: f64) -> f64 {
    let plan = &lift.plan;
    let n = plan.n_modes();
    let z = plan.linear_path(t);
    // z' from the closed form.
    let z_dot: Vec<f64> = if t <= plan.t0 {
        (0..n)
            .map(|i| -plan.nu * lambda(i + 1) * z.coeff(i + 1))
            .collect()
    } else {
        let span = plan.t_end - plan.t0;
        (0..n)
            .map(|i| (plan.b.coeff(i + 1) - plan.z_t0.coeff(i + 1)) / span)
            .collect()
    };
    let b = convective_b(&z, lift.params.delta).expect("band-limited path");
    let c = reaction_c(&z, &lift.params).expect("band-limited path");
    let ctrl = lift.control(t);
    let residual: Vec<f64> = (0..n)
        .map(|i| {
            z_dot[i] + plan.nu * lambda(i + 1) * z.coeff(i + 1) + lift.params.alpha * b.coeff(i + 1)
                - lift.params.beta * c.coeff(i + 1)
                - ctrl.coeff(i + 1)
        })
        .collect();
    l2_norm(&SpectralField::from_coeffs_unchecked(residual))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteeringReport {
    pub terminal_error: f64,
    pub threshold: f64,
    pub dt: f64,
    pub n_modes: usize,
    pub control_energy: f64,
    pub pass: bool,
}

/// Integrates the deterministic controlled equation (noise off, forcing
/// `= u(t)`) and reports the terminal miss distance `||x(T) - b||`.
pub fn verify_steering(lift: &LiftedControl, dt: f64) -> Result<SteeringReport> {
    let n = lift.plan.n_modes();
    let cfg = SolverConfig {
        n_modes: n,
        dt,
        t_end: lift.plan.t_end,
        scheme: Scheme::MildExponential,
        record_stride: usize::MAX / 2,
    };
    let silent = NoiseSpec::from_sigmas(vec![0.0; n], 0.75, 0.0)?;
    let forcing = |t: f64| lift.control(t);
    let opts = RunOptions {
        forcing: Some(&forcing),
        record_states: false,
        ..Default::default()
    };
    let traj = run_trajectory_opts(&lift.plan.a, &lift.params, &silent, &cfg, 0, &opts)?;
    let err = l2_norm(&traj.final_state.sub(&lift.plan.b));
    let threshold = 1e-4 * l2_norm(&lift.plan.b).max(1.0);
    Ok(SteeringReport {
        terminal_error: err,
        threshold,
        dt,
        n_modes: n,
        control_energy: lift.control_energy,
        pass: err <= threshold,
    })
}

// ---------------------------------------------------------------------------
// First variation along a frozen cut-off trajectory.
// ---------------------------------------------------------------------------

/// `DM_R(u) h = Phi(||u||) h + (Phi'(||u||)/||u||) (u, h) u`, in mode space.
fn mollifier_derivative(
    u: &SpectralField,
    h: &SpectralField,
    cutoff: &CutoffSpec,
) -> SpectralField {
    let r = l2_norm(u);
    let phi = cutoff.phi(r);
    let mut w = h.scale(phi);
    if r > 0.0 {
        let dphi = cutoff.phi_prime(r);
        if dphi != 0.0 {
            w = w.add(&u.scale(dphi / r * u.dot(h)));
        }
    }
    w
}

/// Sine-space projection of `d/dx q` for a grid function `q` vanishing at
/// the boundary, matching the parity route the drift projection uses: for
/// even integer `delta` the convective product is sine-type (its derivative
/// a cosine series, projected densely); otherwise cosine-type (derivative
/// diagonal in the sine basis).
fn derivative_projection(q: &GridField, n: usize, even_delta: bool) -> Result<SpectralField> {
    use std::f64::consts::PI;
    if even_delta {
        let s = sine_coefficients_full(q);
        let mut cos_series = vec![0.0; s.len() + 1];
        for (qi, sv) in s.iter().enumerate() {
            let freq = (qi + 1) as f64;
            cos_series[qi + 1] = sv * freq * PI;
        }
        cosine_series_to_sine_modes(&cos_series, n)
    } else {
        let b = cosine_coefficients_full(q);
        let coeffs = (1..=n)
            .map(|k| -b.get(k).copied().unwrap_or(0.0) * k as f64 * PI / std::f64::consts::SQRT_2)
            .collect();
        SpectralField::from_coeffs(coeffs)
    }
}

/// The first-variation path `U(t)` with `U(0) = h`, along the recorded
/// states of a cut-off trajectory (which must be recorded at every step).
pub fn first_variation(
    path: &Trajectory,
    h: &SpectralField,
    p: &ModelParams,
    cutoff: &CutoffSpec,
    dt: f64,
) -> Result<Vec<SpectralField>> {
    if path.states.len() != path.records.len() || path.records.len() < 2 {
        return Err(Error::Mismatch(
            "first variation needs states recorded at every step (record_stride = 1)".into(),
        ));
    }
    for w in path.records.windows(2) {
        if ((w[1].t - w[0].t) - dt).abs() > 1e-9 * dt.max(1.0) {
            return Err(Error::Mismatch(
                "first variation needs a uniformly dense path matching dt".into(),
            ));
        }
    }
    let n = path.states[0].n_modes();
    let conv = PowerConvention::new(p.delta);
    let even = conv.is_even_integer();
    let m = dealias_points(n, 2.0 * p.delta);
    let decay: Vec<f64> = (1..=n).map(|k| (-p.nu * lambda(k) * dt).exp()).collect();
    let phi1_dt: Vec<f64> = (1..=n)
        .map(|k| {
            let a = -p.nu * lambda(k) * dt;
            if a == 0.0 {
                dt
            } else {
                dt * a.exp_m1() / a
            }
        })
        .collect();

    let mut u_var = h.resized(n);
    let mut out = Vec::with_capacity(path.states.len());
    out.push(u_var.clone());
    for u in &path.states[..path.states.len() - 1] {
        let w = mollifier_derivative(u, &u_var, cutoff);
        // Grid data of the frozen state and the direction.
        let r = l2_norm(u);
        let phi = cutoff.phi(r);
        let g_u = to_grid(u, m)?;
        let g_w = to_grid(&w, m)?;
        // Convective linearization: -alpha d/dx (M^delta w).
        let q: Vec<f64> = g_u
            .values()
            .iter()
            .zip(g_w.values())
            .map(|(&x, &wv)| conv.pow(phi * x) * wv)
            .collect();
        let conv_term = derivative_projection(&GridField::new(q), n, even)?;
        // Reaction linearization terms sharing the grid data.
        let react: Vec<f64> = g_u
            .values()
            .iter()
            .zip(g_w.values())
            .map(|(&x, &wv)| {
                let mpow = conv.pow(phi * x);
                let m2pow = mpow * mpow; // |M|^{2 delta} for both branches
                p.beta
                    * ((1.0 + p.gamma) * (1.0 + p.delta) * mpow - (2.0 * p.delta + 1.0) * m2pow)
                    * wv
            })
            .collect();
        let react_term = to_modes(&GridField::new(react), n)?;
        let drift = react_term
            .add(&conv_term.scale(-p.alpha))
            .add(&w.scale(-p.beta * p.gamma));
        let coeffs = (0..n)
            .map(|k| decay[k] * u_var.coeff(k + 1) + phi1_dt[k] * drift.coeff(k + 1))
            .collect();
        u_var = SpectralField::from_coeffs(coeffs)?;
        out.push(u_var.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariationBoundReport {
    pub pairs: usize,
    /// `max over pairs of sup_t ||U(t)|| / ||h||`.
    pub max_gain: f64,
    /// Largest relative change of the gain under rescaling `h -> c h`.
    pub rescaling_defect: f64,
    pub pass: bool,
}

/// Audits `sup_t ||U(t)|| <= C_T ||h||`: the gain must be finite and exactly
/// invariant under rescaling of `h` (the equation is linear in `h`).
pub fn variation_bound_audit(
    p: &ModelParams,
    spec: &NoiseSpec,
    cutoff: &CutoffSpec,
    cfg: &SolverConfig,
    pairs: usize,
    seed: u64,
) -> Result<VariationBoundReport> {
    if pairs < 10 {
        return Err(Error::ParameterDomain(
            "variation bound audit needs at least 10 (x, h) pairs".into(),
        ));
    }
    use rand::Rng;
    let mut rng = crate::rng::stream(seed, &[crate::rng::tag::SAMPLER, 7]);
    let n = cfg.n_modes;
    let mut max_gain: f64 = 0.0;
    let mut worst_defect: f64 = 0.0;
    for pair in 0..pairs {
        let x = SpectralField::from_coeffs(
            (0..n).map(|_| rng.random_range(-0.4..0.4)).collect(),
        )?;
        let h = SpectralField::from_coeffs(
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let opts = RunOptions { cutoff: Some(*cutoff), trajectory: pair as u64, ..Default::default() };
        let path = run_trajectory_opts(&x, p, spec, cfg, seed, &opts)?;
        let gain_of = |hh: &SpectralField| -> Result<f64> {
            let us = first_variation(&path, hh, p, cutoff, cfg.dt)?;
            let sup = us.iter().map(l2_norm).fold(0.0f64, f64::max);
            Ok(sup / l2_norm(hh))
        };
        let g1 = gain_of(&h)?;
        let g2 = gain_of(&h.scale(2.0))?;
        if !g1.is_finite() {
            return Err(Error::AuditRefused(format!(
                "variation gain diverged on pair {pair}"
            )));
        }
        max_gain = max_gain.max(g1);
        worst_defect = worst_defect.max((g1 - g2).abs() / g1.max(1e-300));
    }
    Ok(VariationBoundReport {
        pairs,
        max_gain,
        rescaling_defect: worst_defect,
        pass: max_gain.is_finite() && worst_defect <= 1e-8,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;

    fn params() -> ModelParams {
        ModelParams::new(1.0, 1.0, 1.0, 0.5, 1.0).unwrap()
    }

    fn random_field(n: usize, seed: u64, scale: f64) -> SpectralField {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        SpectralField::from_coeffs((0..n).map(|_| rng.random_range(-scale..scale)).collect())
            .unwrap()
    }

    #[test]
    fn linear_path_hits_target_exactly() {
        let a = random_field(8, 1, 0.5);
        let b = random_field(8, 2, 0.5);
        let plan = linear_control(&a, &b, 1.0, 0.5, 1.3).unwrap();
        let z_t = plan.linear_path(1.0);
        for k in 1..=8 {
            assert_eq!(z_t.coeff(k), plan.b.coeff(k));
        }
        assert!(linear_control(&a, &b, 1.0, 0.0, 1.0).is_err());
        assert!(linear_control(&a, &b, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn constant_segment_control_is_nu_a_z() {
        // b = e^{-nu A t0} a makes the affine segment constant, so the
        // control reduces to nu A z there.
        let a = random_field(6, 3, 0.5);
        let nu = 0.7;
        let t0 = 0.4;
        let b = apply_semigroup(&a, t0, nu, 0.0).unwrap();
        let plan = linear_control(&a, &b, 1.0, t0, nu).unwrap();
        let t = 0.8;
        let v = plan.linear_control(t);
        let z = plan.linear_path(t);
        for k in 1..=6 {
            assert_relative_eq!(
                v.coeff(k),
                nu * lambda(k) * z.coeff(k),
                epsilon = 1e-12,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn linear_ode_residual_is_quadrature_level() {
        // || z' + nu A z - v || along the path, via central differences on
        // the closed form away from the switch point.
        let a = random_field(8, 4, 0.5);
        let b = random_field(8, 5, 0.5);
        let nu = 1.1;
        let plan = linear_control(&a, &b, 1.0, 0.5, nu).unwrap();
        let eps = 1e-6;
        for &t in &[0.1, 0.3, 0.6, 0.8, 0.95] {
            let zp = plan.linear_path(t + eps);
            let zm = plan.linear_path(t - eps);
            let z = plan.linear_path(t);
            let v = plan.linear_control(t);
            for k in 1..=8 {
                let z_dot = (zp.coeff(k) - zm.coeff(k)) / (2.0 * eps);
                let resid = z_dot + nu * lambda(k) * z.coeff(k) - v.coeff(k);
                assert!(resid.abs() < 1e-6, "t={t}, k={k}: {resid}");
            }
        }
    }

    #[test]
    fn lifted_control_reduces_to_linear_when_path_vanishes() {
        // a = b = 0: z = 0 along the whole path, so all power terms vanish.
        let zero = SpectralField::zeros(6);
        let plan = linear_control(&zero, &zero, 1.0, 0.5, 1.0).unwrap();
        let lift = lift_control(plan, &params()).unwrap();
        for &t in &[0.2, 0.7] {
            let u = lift.control(t);
            let v = lift.plan.linear_control(t);
            for k in 1..=6 {
                assert_eq!(u.coeff(k), v.coeff(k));
            }
        }
        assert_eq!(lift.control_energy, 0.0);
    }

    #[test]
    fn substitution_residual_is_machine_level() {
        for delta in [1.0, 2.0] {
            let p = ModelParams::new(1.0, 1.0, 1.0, 0.5, delta).unwrap();
            let a = random_field(8, 6, 0.4);
            let b = random_field(8, 7, 0.4);
            let plan = linear_control(&a, &b, 1.0, 0.5, p.nu).unwrap();
            let lift = lift_control(plan, &p).unwrap();
            for &t in &[0.1, 0.4, 0.6, 0.9, 1.0] {
                let r = substitution_residual(&lift, t);
                assert!(r <= 1e-9, "delta={delta}, t={t}: residual {r}");
            }
            assert!(lift.control_energy.is_finite() && lift.control_energy > 0.0);
        }
    }

    #[test]
    fn steering_zero_to_zero_is_exact() {
        let zero = SpectralField::zeros(6);
        let plan = linear_control(&zero, &zero, 0.5, 0.25, 1.0).unwrap();
        let lift = lift_control(plan, &params()).unwrap();
        let report = verify_steering(&lift, 1e-3).unwrap();
        assert_eq!(report.terminal_error, 0.0);
        assert!(report.pass);
    }

    #[test]
    fn steering_error_is_small_and_halves_with_dt() {
        let p = params();
        let a = SpectralField::from_coeffs(vec![0.4, -0.2, 0.1, 0.05]).unwrap();
        let b = SpectralField::from_coeffs(vec![-0.3, 0.25, -0.05, 0.1]).unwrap();
        let plan = linear_control(&a.resized(16), &b.resized(16), 1.0, 0.5, p.nu).unwrap();
        let lift = lift_control(plan, &p).unwrap();
        let r1 = verify_steering(&lift, 2e-4).unwrap();
        let r2 = verify_steering(&lift, 1e-4).unwrap();
        assert!(r2.pass, "terminal error {} vs {}", r2.terminal_error, r2.threshold);
        let ratio = r1.terminal_error / r2.terminal_error;
        assert!(
            (1.5..3.0).contains(&ratio),
            "halving dt changed the error by {ratio} ({} -> {})",
            r1.terminal_error,
            r2.terminal_error
        );
    }

    #[test]
    fn first_variation_zero_direction_stays_zero() {
        let p = params();
        let spec = NoiseSpec::from_sigmas(vec![0.2; 6], 0.75, 0.0).unwrap();
        let cfg = SolverConfig {
            n_modes: 6,
            dt: 1e-2,
            t_end: 0.3,
            scheme: Scheme::MildExponential,
            record_stride: 1,
        };
        let cutoff = CutoffSpec::new(5.0).unwrap();
        let opts = RunOptions { cutoff: Some(cutoff), ..Default::default() };
        let path = run_trajectory_opts(&random_field(6, 8, 0.3), &p, &spec, &cfg, 3, &opts).unwrap();
        let us = first_variation(&path, &SpectralField::zeros(6), &p, &cutoff, cfg.dt).unwrap();
        assert!(us.iter().all(|u| u.coeffs().iter().all(|c| *c == 0.0)));
    }

    #[test]
    fn first_variation_is_linear_in_h() {
        let p = ModelParams::new(1.0, 1.0, 1.0, 0.5, 2.0).unwrap();
        let spec = NoiseSpec::from_sigmas(vec![0.2; 6], 0.75, 0.0).unwrap();
        let cfg = SolverConfig {
            n_modes: 6,
            dt: 1e-2,
            t_end: 0.3,
            scheme: Scheme::MildExponential,
            record_stride: 1,
        };
        let cutoff = CutoffSpec::new(5.0).unwrap();
        let opts = RunOptions { cutoff: Some(cutoff), ..Default::default() };
        let path = run_trajectory_opts(&random_field(6, 9, 0.3), &p, &spec, &cfg, 4, &opts).unwrap();
        let h1 = random_field(6, 10, 1.0);
        let h2 = random_field(6, 11, 1.0);
        let sum = h1.add(&h2);
        let u1 = first_variation(&path, &h1, &p, &cutoff, cfg.dt).unwrap();
        let u2 = first_variation(&path, &h2, &p, &cutoff, cfg.dt).unwrap();
        let us = first_variation(&path, &sum, &p, &cutoff, cfg.dt).unwrap();
        for ((a, b), s) in u1.iter().zip(&u2).zip(&us) {
            let lhs = a.add(b);
            for k in 1..=6 {
                assert_relative_eq!(lhs.coeff(k), s.coeff(k), epsilon = 1e-10, max_relative = 1e-10);
            }
        }

        // Doubling h exactly doubles U (same path).
        let u_2h = first_variation(&path, &h1.scale(2.0), &p, &cutoff, cfg.dt).unwrap();
        for (a, d) in u1.iter().zip(&u_2h) {
            for k in 1..=6 {
                assert_relative_eq!(2.0 * a.coeff(k), d.coeff(k), epsilon = 1e-12, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn finite_difference_gap_shrinks_linearly() {
        // [u(t, x + eps h) - u(t, x)]/eps vs U(t) on a shared noise path:
        // quartering eps cuts the gap by about 4.
        let p = params();
        let spec = NoiseSpec::from_sigmas(
            (1..=8).map(|k| 0.3 / k as f64).collect(),
            0.75,
            0.0,
        )
        .unwrap();
        let cfg = SolverConfig {
            n_modes: 8,
            dt: 5e-3,
            t_end: 0.5,
            scheme: Scheme::MildExponential,
            record_stride: 1,
        };
        let cutoff = CutoffSpec::new(8.0).unwrap();
        let x = random_field(8, 12, 0.3);
        let h = random_field(8, 13, 1.0);
        let opts = RunOptions { cutoff: Some(cutoff), ..Default::default() };
        let base = run_trajectory_opts(&x, &p, &spec, &cfg, 21, &opts).unwrap();
        let us = first_variation(&base, &h, &p, &cutoff, cfg.dt).unwrap();
        let gap = |eps: f64| -> f64 {
            let shifted = x.add(&h.scale(eps));
            let bumped = run_trajectory_opts(&shifted, &p, &spec, &cfg, 21, &opts).unwrap();
            bumped
                .states
                .iter()
                .zip(&base.states)
                .zip(&us)
                .map(|((ub, u0), uv)| {
                    let fd = ub.sub(u0).scale(1.0 / eps);
                    l2_norm(&fd.sub(uv))
                })
                .fold(0.0f64, f64::max)
        };
        let g1 = gap(4e-3);
        let g2 = gap(1e-3);
        let ratio = g1 / g2;
        assert!(
            (2.8..5.7).contains(&ratio),
            "FD gap ratio {ratio} ({g1} -> {g2})"
        );
    }

    #[test]
    fn variation_matches_plain_linearization_inside_huge_ball() {
        // With R enormous the mollifier is the identity along the whole
        // path, so U solves the unmollified linearization; check against a
        // finite difference of the plain (uncut) flow.
        let p = params();
        let spec = NoiseSpec::from_sigmas(vec![0.15; 6], 0.75, 0.0).unwrap();
        let cfg = SolverConfig {
            n_modes: 6,
            dt: 5e-3,
            t_end: 0.3,
            scheme: Scheme::MildExponential,
            record_stride: 1,
        };
        let huge = CutoffSpec::new(1e6).unwrap();
        let x = random_field(6, 14, 0.3);
        let h = random_field(6, 15, 1.0);
        let opts_cut = RunOptions { cutoff: Some(huge), ..Default::default() };
        let path = run_trajectory_opts(&x, &p, &spec, &cfg, 31, &opts_cut).unwrap();
        let us = first_variation(&path, &h, &p, &huge, cfg.dt).unwrap();

        let opts_plain = RunOptions::default();
        let eps = 1e-5;
        let plain = run_trajectory_opts(&x, &p, &spec, &cfg, 31, &opts_plain).unwrap();
        let bumped =
            run_trajectory_opts(&x.add(&h.scale(eps)), &p, &spec, &cfg, 31, &opts_plain).unwrap();
        let last_fd = bumped
            .final_state
            .sub(&plain.final_state)
            .scale(1.0 / eps);
        let last_u = us.last().unwrap();
        let diff = l2_norm(&last_fd.sub(last_u)) / l2_norm(last_u).max(1e-12);
        assert!(diff < 1e-3, "relative disagreement {diff}");
    }

    #[test]
    fn variation_decays_like_heat_outside_the_support() {
        // A path with ||u|| >= R + 1 throughout kills every M_R term, so U
        // obeys the pure heat decay.
        let p = params();
        let cutoff = CutoffSpec::new(0.05).unwrap();
        let spec = NoiseSpec::from_sigmas(vec![0.0; 4], 0.75, 0.0).unwrap();
        let cfg = SolverConfig {
            n_modes: 4,
            dt: 1e-3,
            t_end: 0.08,
            scheme: Scheme::MildExponential,
            record_stride: 1,
        };
        // Large initial state: the cut-off drift is zero, so the path is the
        // pure heat flow and stays above R + 1 over this short horizon.
        let x = SpectralField::basis(1, 4).scale(3.0);
        let opts = RunOptions { cutoff: Some(cutoff), ..Default::default() };
        let path = run_trajectory_opts(&x, &p, &spec, &cfg, 1, &opts).unwrap();
        assert!(path.records.iter().all(|r| r.l2 >= 1.05));
        let h = random_field(4, 16, 1.0);
        let us = first_variation(&path, &h, &p, &cutoff, cfg.dt).unwrap();
        let last = us.last().unwrap();
        for k in 1..=4 {
            let expect = h.coeff(k) * (-p.nu * lambda(k) * 0.08).exp();
            assert_relative_eq!(last.coeff(k), expect, epsilon = 1e-12, max_relative = 1e-10);
        }
    }

    #[test]
    fn mollified_flow_agrees_with_plain_until_exit_time() {
        // Shared noise: u and u^R coincide (bitwise here) for all recorded
        // times up to the first exceedance of R.
        let p = params();
        let spec = NoiseSpec::from_sigmas(
            (1..=8).map(|k| 0.8 / k as f64).collect(),
            0.75,
            0.0,
        )
        .unwrap();
        let cfg = SolverConfig {
            n_modes: 8,
            dt: 2e-3,
            t_end: 2.0,
            scheme: Scheme::MildExponential,
            record_stride: 1,
        };
        let x = SpectralField::basis(1, 8).scale(0.3);
        let mut exits = 0;
        for seed in 0..10 {
            let plain = run_trajectory_opts(&x, &p, &spec, &cfg, seed, &RunOptions::default())
                .unwrap();
            let r = 0.45;
            let cutoff = CutoffSpec::new(r).unwrap();
            let opts = RunOptions { cutoff: Some(cutoff), ..Default::default() };
            let cut = run_trajectory_opts(&x, &p, &spec, &cfg, seed, &opts).unwrap();
            // tau^R = first recorded time with ||u^R|| > R.
            let tau_idx = cut.records.iter().position(|rec| rec.l2 > r);
            let end = tau_idx.unwrap_or(cut.records.len() - 1);
            if tau_idx.is_some() {
                exits += 1;
            }
            for i in 0..=end {
                let d = l2_norm(&cut.states[i].sub(&plain.states[i]));
                assert!(d <= 1e-9, "seed {seed}, record {i}: divergence {d}");
            }
        }
        assert!(exits >= 3, "want several paths exiting the ball, got {exits}");
    }

    #[test]
    fn variation_bound_audit_gain_is_scale_invariant() {
        let p = params();
        let spec = NoiseSpec::from_sigmas(vec![0.2; 6], 0.75, 0.0).unwrap();
        let cfg = SolverConfig {
            n_modes: 6,
            dt: 5e-3,
            t_end: 0.4,
            scheme: Scheme::MildExponential,
            record_stride: 1,
        };
        let cutoff = CutoffSpec::new(1.0).unwrap();
        let report = variation_bound_audit(&p, &spec, &cutoff, &cfg, 10, 99).unwrap();
        assert!(report.pass, "defect {}", report.rescaling_defect);
        assert!(report.max_gain.is_finite() && report.max_gain > 0.0);
        assert!(variation_bound_audit(&p, &spec, &cutoff, &cfg, 5, 99).is_err());
    }
}
