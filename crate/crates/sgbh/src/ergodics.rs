//! Occupation measures and the long-time statistical audits: time-averaged
//! (Krylov-Bogoliubov) histograms, invariant-measure coupling diagnostics,
//! exponential-moment bounds, time-fraction (tightness) tables and
//! hyper-exponential recurrence tails.
//!
//! The occupation measure of a trajectory lives on state space; it is
//! represented here through scalar observables (the `L^2` and `H^1` energies,
//! single mode coefficients, the `L^{2(delta+1)}` norm), each accumulated as
//! a time-weighted histogram. Weights always conserve elapsed time: samples
//! outside the binned range land in explicit underflow/overflow cells and
//! are never dropped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{Record, Trajectory};
use crate::model::{cramer_constant, lambda0_max, ModelParams};
use crate::noise::{least_squares_slope, NoiseSpec};

/// Scalar projections of the state used to represent the occupation measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservableId {
    /// `||u||^2`
    L2Sq,
    /// `||u_x||^2`
    H1SemiSq,
    /// `||u||_{L^{2(delta+1)}}`
    L2p,
    /// Coefficient of mode `k` (1-based); needs recorded states.
    Mode(u32),
}

impl std::fmt::Display for ObservableId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ObservableId::L2Sq => write!(f, "l2_sq"),
            ObservableId::H1SemiSq => write!(f, "h1_semi_sq"),
            ObservableId::L2p => write!(f, "l2p"),
            ObservableId::Mode(k) => write!(f, "mode_{k}"),
        }
    }
}

impl std::str::FromStr for ObservableId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2_sq" => Ok(ObservableId::L2Sq),
            "h1_semi_sq" => Ok(ObservableId::H1SemiSq),
            "l2p" => Ok(ObservableId::L2p),
            other => {
                if let Some(k) = other.strip_prefix("mode_") {
                    let k: u32 = k
                        .parse()
                        .map_err(|_| Error::Config(format!("bad mode observable '{other}'")))?;
                    if k == 0 {
                        return Err(Error::Config("mode observables are 1-based".into()));
                    }
                    Ok(ObservableId::Mode(k))
                } else {
                    Err(Error::Config(format!(
                        "unknown observable '{other}' (expected l2_sq, h1_semi_sq, l2p or mode_K)"
                    )))
                }
            }
        }
    }
}

impl Serialize for ObservableId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ObservableId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl ObservableId {
    /// Extract the observable from a recorded sample (and the matching state
    /// when mode coefficients are tracked).
    pub fn value(&self, record: &Record, state: Option<&crate::spectral::SpectralField>) -> f64 {
        match self {
            ObservableId::L2Sq => record.l2 * record.l2,
            ObservableId::H1SemiSq => record.h1_semi * record.h1_semi,
            ObservableId::L2p => record.l2p,
            ObservableId::Mode(k) => state.map_or(f64::NAN, |s| s.coeff(*k as usize)),
        }
    }
}

/// Time-weighted histogram of one observable: the scalar shadow of the
/// occupation measure `L_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupationHistogram {
    pub observable: ObservableId,
    /// Strictly increasing bin edges, `len = bins + 1`.
    pub edges: Vec<f64>,
    pub weights: Vec<f64>,
    pub underflow: f64,
    pub overflow: f64,
    pub total_time: f64,
}

impl OccupationHistogram {
    pub fn uniform(observable: ObservableId, lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(lo < hi) || bins == 0 {
            return Err(Error::ParameterDomain(format!(
                "histogram needs lo < hi and bins >= 1, got [{lo}, {hi}) x {bins}"
            )));
        }
        let edges = (0..=bins)
            .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
            .collect();
        Ok(OccupationHistogram {
            observable,
            edges,
            weights: vec![0.0; bins],
            underflow: 0.0,
            overflow: 0.0,
            total_time: 0.0,
        })
    }

    /// Adds weight `dt` to the cell containing `value`; out-of-range weight
    /// goes to the underflow/overflow cells, never dropped.
    pub fn update(&mut self, value: f64, dt: f64) {
        debug_assert!(dt >= 0.0);
        self.total_time += dt;
        let lo = self.edges[0];
        let hi = *self.edges.last().unwrap();
        if !(value >= lo) {
            self.underflow += dt;
        } else if value >= hi {
            self.overflow += dt;
        } else {
            let bins = self.weights.len();
            let idx = (((value - lo) / (hi - lo)) * bins as f64) as usize;
            self.weights[idx.min(bins - 1)] += dt;
        }
    }

    /// Sum of all cells including the out-of-range ones; equals the elapsed
    /// time by conservation.
    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum::<f64>() + self.underflow + self.overflow
    }

    /// Normalized cell masses `[underflow, bins..., overflow]`, summing to 1.
    pub fn normalized(&self) -> Vec<f64> {
        let total = self.total_weight();
        let scale = if total > 0.0 { 1.0 / total } else { 0.0 };
        let mut out = Vec::with_capacity(self.weights.len() + 2);
        out.push(self.underflow * scale);
        out.extend(self.weights.iter().map(|w| w * scale));
        out.push(self.overflow * scale);
        out
    }

    pub fn same_binning(&self, other: &Self) -> bool {
        self.observable == other.observable && self.edges == other.edges
    }

    /// Accumulate another histogram with identical binning.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if !self.same_binning(other) {
            return Err(Error::Mismatch("histogram binning differs".into()));
        }
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            *w += o;
        }
        self.underflow += other.underflow;
        self.overflow += other.overflow;
        self.total_time += other.total_time;
        Ok(())
    }
}

/// `L^1` distance between the normalized histograms (twice the total
/// variation of the binned laws). Zero iff identical, at most 2.
pub fn coupling_distance(a: &OccupationHistogram, b: &OccupationHistogram) -> Result<f64> {
    if !a.same_binning(b) {
        return Err(Error::Mismatch(
            "coupling distance needs identical observables and bin edges".into(),
        ));
    }
    Ok(a.normalized()
        .iter()
        .zip(b.normalized())
        .map(|(x, y)| (x - y).abs())
        .sum())
}

/// Time-averaged occupation histogram of one observable over
/// `[burn_in, t_end]`, pooled across the given trajectories in order
/// (the empirical Krylov-Bogoliubov average).
pub fn krylov_bogoliubov(
    trajs: &[Trajectory],
    burn_in: f64,
    observable: ObservableId,
    lo: f64,
    hi: f64,
    bins: usize,
) -> Result<OccupationHistogram> {
    let mut hist = OccupationHistogram::uniform(observable, lo, hi, bins)?;
    for traj in trajs {
        let t_end = traj.records.last().map_or(0.0, |r| r.t);
        if burn_in >= t_end && traj.records.len() > 1 {
            return Err(Error::ParameterDomain(format!(
                "burn_in {burn_in} must be below the horizon {t_end}"
            )));
        }
        accumulate(&mut hist, traj, burn_in);
    }
    Ok(hist)
}

fn accumulate(hist: &mut OccupationHistogram, traj: &Trajectory, burn_in: f64) {
    if traj.records.len() == 1 {
        // Degenerate single-sample trajectory.
        let r = &traj.records[0];
        let state = traj.states.first();
        hist.update(hist.observable.value(r, state), 1.0);
        return;
    }
    for i in 0..traj.records.len() - 1 {
        let r = &traj.records[i];
        if r.t < burn_in {
            continue;
        }
        let dt = traj.records[i + 1].t - r.t;
        let state = traj.states.get(i);
        hist.update(hist.observable.value(r, state), dt);
    }
    // Close with the final sample carrying a single record spacing, so a
    // burn_in at t_end - dt degenerates to exactly one sample.
    let last = traj.records.last().unwrap();
    if last.t >= burn_in {
        let dt = last.t - traj.records[traj.records.len() - 2].t;
        hist.update(hist.observable.value(last, traj.states.last()), dt);
    }
}

// ---------------------------------------------------------------------------
// Exponential-moment audits.
// ---------------------------------------------------------------------------

/// The tilted energy functional
/// `Z(t) = ||u(t)||^2 + nu int ||u_x||^2 + (beta/2) int ||u||_{2(d+1)}^{2(d+1)}`
/// reconstructed from a ledger snapshot.
pub fn z_functional(ledger: &crate::integrator::EnergyLedger) -> f64 {
    ledger.l2_sq + ledger.diss / 2.0 + ledger.absorb / 4.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentAuditRow {
    pub t: f64,
    /// Right side shared by all four estimates:
    /// `exp(lambda0 ||x||^2 + lambda0 t (Tr Q + C))`.
    pub bound: f64,
    /// `E exp(lambda0 Z(t))`.
    pub full: MomentEstimate,
    /// `E exp(lambda0 ||u(t)||^2)`.
    pub terminal: MomentEstimate,
    /// `E exp(lambda0 nu int ||u_x||^2)`.
    pub dissipation: MomentEstimate,
    /// `E exp(lambda0 beta int ||u||_{2(d+1)}^{2(d+1)})`.
    pub absorption: MomentEstimate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentAudit {
    pub lambda0: f64,
    pub lambda0_max: f64,
    pub trace: f64,
    pub cramer: f64,
    pub initial_l2_sq: f64,
    pub ensemble: usize,
    pub rows: Vec<MomentAuditRow>,
    pub pass: bool,
}

fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One-sided bound check with a 3 SE statistical allowance.
fn bounded(mean: f64, se: f64, bound: f64) -> MomentEstimate {
    MomentEstimate {
        mean,
        std_error: se,
        pass: mean <= bound * (1.0 + 3.0 * se / mean.max(1e-300)),
    }
}

/// Compares the empirical exponential moments of the ensemble against the
/// closed-form right side `exp(lambda0 ||x||^2 + lambda0 t (Tr Q + C))` at
/// the requested times. Refuses tilts at or above the admissible window and
/// ensembles too small for an honest standard error.
pub fn exp_moment_audit(
    trajs: &[Trajectory],
    lambda0: f64,
    p: &ModelParams,
    spec: &NoiseSpec,
    times: &[f64],
) -> Result<MomentAudit> {
    let l0_max = lambda0_max(p, spec.q_norm())?;
    if !(lambda0 > 0.0 && lambda0 < l0_max) {
        return Err(Error::AuditRefused(format!(
            "lambda0 = {lambda0} is outside the admissible window (0, {l0_max}); \
             the exponential bound is not claimed there"
        )));
    }
    if trajs.len() < 1000 {
        return Err(Error::AuditRefused(format!(
            "exponential-moment audit needs an ensemble of at least 1000 paths, got {}",
            trajs.len()
        )));
    }
    let x_sq = trajs[0].records[0].ledger.initial_l2_sq;
    if trajs
        .iter()
        .any(|t| (t.records[0].ledger.initial_l2_sq - x_sq).abs() > 1e-12 * x_sq.max(1.0))
    {
        return Err(Error::AuditRefused(
            "exponential-moment audit expects a common initial point".into(),
        ));
    }
    let trace = spec.trace();
    let cramer = cramer_constant(p)?;
    let n = trajs.len();
    let mut rows = Vec::with_capacity(times.len());
    for &t in times {
        let ledgers: Vec<_> = trajs.iter().map(|tr| tr.record_at(t).ledger).collect();
        let bound = (lambda0 * x_sq + lambda0 * t * (trace + cramer)).exp();
        let stat = |f: &dyn Fn(&crate::integrator::EnergyLedger) -> f64| {
            let vals: Vec<f64> = ledgers.iter().map(|l| (lambda0 * f(l)).exp()).collect();
            let (m, se) = mean_and_se(&vals);
            bounded(m, se, bound)
        };
        rows.push(MomentAuditRow {
            t,
            bound,
            full: stat(&z_functional),
            terminal: stat(&|l| l.l2_sq),
            dissipation: stat(&|l| l.diss / 2.0),
            absorption: stat(&|l| l.absorb / 2.0),
        });
    }
    let pass = rows
        .iter()
        .all(|r| r.full.pass && r.terminal.pass && r.dissipation.pass && r.absorption.pass);
    Ok(MomentAudit {
        lambda0,
        lambda0_max: l0_max,
        trace,
        cramer,
        initial_l2_sq: x_sq,
        ensemble: n,
        rows,
        pass,
    })
}

/// First-moment audit: ensemble mean of
/// `||u(t)||^2 + 2 nu int ||u_x||^2 + (beta/2) int ||u||^{2(d+1)}` against
/// `||x||^2 + (Tr Q + C) t`, one-sided with a 3 SE allowance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanEnergyAudit {
    pub trace: f64,
    pub cramer: f64,
    pub initial_l2_sq: f64,
    pub ensemble: usize,
    pub rows: Vec<MeanEnergyRow>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanEnergyRow {
    pub t: f64,
    pub mean: f64,
    pub std_error: f64,
    pub bound: f64,
    pub pass: bool,
}

pub fn mean_energy_audit(
    trajs: &[Trajectory],
    p: &ModelParams,
    spec: &NoiseSpec,
    times: &[f64],
) -> Result<MeanEnergyAudit> {
    if trajs.is_empty() {
        return Err(Error::AuditRefused("empty ensemble".into()));
    }
    let trace = spec.trace();
    let cramer = cramer_constant(p)?;
    let x_sq = trajs[0].records[0].ledger.initial_l2_sq;
    let rows: Vec<MeanEnergyRow> = times
        .iter()
        .map(|&t| {
            let vals: Vec<f64> = trajs
                .iter()
                .map(|tr| {
                    let l = tr.record_at(t).ledger;
                    l.l2_sq + l.diss + l.absorb / 4.0
                })
                .collect();
            let (mean, se) = mean_and_se(&vals);
            let bound = x_sq + (trace + cramer) * t;
            MeanEnergyRow { t, mean, std_error: se, bound, pass: mean <= bound + 3.0 * se }
        })
        .collect();
    let pass = rows.iter().all(|r| r.pass);
    Ok(MeanEnergyAudit {
        trace,
        cramer,
        initial_l2_sq: x_sq,
        ensemble: trajs.len(),
        rows,
        pass,
    })
}

// ---------------------------------------------------------------------------
// Markov-tightness (time-fraction) table.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FractionRow {
    pub threshold: f64,
    /// Time fraction with `||u_x||^2 > M`.
    pub fraction: f64,
    /// `(||x||^2 / t0 + Tr Q + C) / M^2`; may exceed 1 (then trivially met).
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FractionTable {
    pub t0: f64,
    pub rows: Vec<FractionRow>,
    /// Log-log slope of the positive fractions against the thresholds.
    pub slope: Option<f64>,
    pub pass: bool,
}

/// Time fraction of `||u_x||^2 > M` over a trajectory for each threshold,
/// against the Markov-inequality bound.
pub fn gradient_occupation_fraction(
    traj: &Trajectory,
    thresholds: &[f64],
    p: &ModelParams,
    spec: &NoiseSpec,
    t0: f64,
) -> Result<FractionTable> {
    if traj.records.len() < 2 {
        return Err(Error::ParameterDomain(
            "time-fraction table needs a trajectory with at least two records".into(),
        ));
    }
    let trace = spec.trace();
    let cramer = cramer_constant(p)?;
    let x_sq = traj.records[0].ledger.initial_l2_sq;
    let total: f64 = traj.records.last().unwrap().t - traj.records[0].t;
    let rows: Vec<FractionRow> = thresholds
        .iter()
        .map(|&m| {
            let mut time_above = 0.0;
            for w in traj.records.windows(2) {
                if w[0].h1_semi * w[0].h1_semi > m {
                    time_above += w[1].t - w[0].t;
                }
            }
            let fraction = time_above / total;
            let bound = (x_sq / t0 + trace + cramer) / (m * m);
            FractionRow { threshold: m, fraction, bound, pass: fraction <= bound }
        })
        .collect();
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.fraction > 0.0)
        .map(|r| (r.threshold.ln(), r.fraction.ln()))
        .collect();
    let slope = if pts.len() >= 3 { Some(least_squares_slope(&pts)) } else { None };
    let pass = rows.iter().all(|r| r.pass);
    Ok(FractionTable { t0, rows, slope, pass })
}

// ---------------------------------------------------------------------------
// Hyper-exponential recurrence tails.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailRow {
    pub n: u32,
    /// Paths with no entry into `K` during `[1, n]`.
    pub survivors: usize,
    /// Paths observed long enough to classify at this horizon.
    pub at_risk: usize,
    pub tail: f64,
    /// Envelope as printed: `rho(Psi) exp(-n C1 lambda0)`, claimed for n >= 2.
    pub envelope: f64,
    /// Stricter pre-simplification envelope
    /// `rho(Psi) exp(-nu lambda0 M^2 (n-1) + n lambda0 (Tr Q + C))`.
    pub envelope_strict: f64,
    /// Checked only when n >= 2 and at least 30 paths are at risk.
    pub eligible: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecurrenceStats {
    /// Gradient-norm threshold defining `K = { ||u_x|| <= M }`.
    pub threshold: f64,
    pub lambda0: f64,
    pub c1: f64,
    pub trace: f64,
    pub cramer: f64,
    pub initial_l2_sq: f64,
    /// First-entry times from t = 0 (infinite when never observed).
    pub tau: Vec<f64>,
    /// First-entry times from t = 1.
    pub tau1: Vec<f64>,
    pub tails: Vec<TailRow>,
    /// Exponential decay rate fitted to the positive eligible tails, when at
    /// least two are available.
    pub rate_fit: Option<f64>,
    pub pass: bool,
}

/// First recorded time (at or after `from`) with `||u_x|| <= m`; infinite if
/// never observed within the horizon. Computable from the past alone.
fn first_entry(traj: &Trajectory, m: f64, from: f64) -> f64 {
    for r in &traj.records {
        if r.t >= from && r.h1_semi <= m {
            return r.t;
        }
    }
    f64::INFINITY
}

/// Estimates `P(tau_K^(1) > n)` for integer `n` against the recurrence
/// envelope. Refuses thresholds with `C1 = M^2/2 - Tr Q - C <= 0`, reporting
/// the minimal admissible `M`.
pub fn recurrence_tails(
    trajs: &[Trajectory],
    m: f64,
    lambda0: f64,
    p: &ModelParams,
    spec: &NoiseSpec,
    n_max: u32,
) -> Result<RecurrenceStats> {
    let trace = spec.trace();
    let cramer = cramer_constant(p)?;
    let c1 = m * m / 2.0 - trace - cramer;
    if c1 <= 0.0 {
        let minimal = (2.0 * (trace + cramer)).sqrt();
        return Err(Error::AuditRefused(format!(
            "C1 = M^2/2 - TrQ - C = {c1:.6} <= 0 at M = {m}; smallest admissible M is {minimal:.6}"
        )));
    }
    let l0_max = lambda0_max(p, spec.q_norm())?;
    if !(lambda0 > 0.0 && lambda0 < l0_max) {
        return Err(Error::AuditRefused(format!(
            "lambda0 = {lambda0} outside the admissible window (0, {l0_max})"
        )));
    }
    let x_sq = trajs
        .first()
        .ok_or_else(|| Error::AuditRefused("empty ensemble".into()))?
        .records[0]
        .ledger
        .initial_l2_sq;
    let psi = (lambda0 * x_sq).exp();

    let tau: Vec<f64> = trajs.iter().map(|t| first_entry(t, m, 0.0)).collect();
    let tau1: Vec<f64> = trajs.iter().map(|t| first_entry(t, m, 1.0)).collect();

    let mut tails = Vec::new();
    for n in 1..=n_max {
        let horizon = n as f64;
        let at_risk = trajs
            .iter()
            .filter(|t| t.records.last().map_or(0.0, |r| r.t) >= horizon)
            .count();
        let survivors = tau1.iter().filter(|&&t| t > horizon).count();
        let tail = if at_risk > 0 { survivors as f64 / at_risk as f64 } else { f64::NAN };
        let envelope = psi * (-(n as f64) * c1 * lambda0).exp();
        let envelope_strict = psi
            * (-p.nu * lambda0 * m * m * (n as f64 - 1.0)
                + n as f64 * lambda0 * (trace + cramer))
                .exp();
        let eligible = n >= 2 && at_risk >= 30;
        tails.push(TailRow {
            n,
            survivors,
            at_risk,
            tail,
            envelope,
            envelope_strict,
            eligible,
            pass: !eligible || tail <= envelope,
        });
    }
    let pts: Vec<(f64, f64)> = tails
        .iter()
        .filter(|r| r.eligible && r.tail > 0.0)
        .map(|r| (r.n as f64, r.tail.ln()))
        .collect();
    let rate_fit = if pts.len() >= 2 { Some(-least_squares_slope(&pts)) } else { None };
    let pass = tails.iter().all(|r| r.pass);
    Ok(RecurrenceStats {
        threshold: m,
        lambda0,
        c1,
        trace,
        cramer,
        initial_l2_sq: x_sq,
        tau,
        tau1,
        tails,
        rate_fit,
        pass,
    })
}
