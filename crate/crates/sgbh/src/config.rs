//! The experiment configuration schema: one TOML document per run.
//!
//! A config fully determines a run together with the master seed; it
//! round-trips losslessly through serialize/deserialize, and every experiment
//! reads its own parameter block (all blocks have workable defaults, so a
//! minimal config is just `experiment`, `seed`, `output_dir`, `model`,
//! `noise` and `solver`).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::ergodics::ObservableId;
use crate::error::{Error, Result};
use crate::integrator::SolverConfig;
use crate::model::ModelParams;
use crate::noise::{power_law_noise, NoiseSpec, PowerLawBand};
use crate::spectral::SpectralField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    /// Plain trajectories plus occupation histograms of the observables.
    Simulate,
    /// Energy-equality defect across a dt-halving ladder.
    VerifyEnergy,
    /// Long-run occupation averages, split-half mixing check and the
    /// gradient time-fraction table.
    Invariant,
    /// Exponential-moment and first-moment bound audits.
    ExpMoment,
    /// Hyper-exponential recurrence tails.
    Recurrence,
    /// Exact-controllability construction and steering verification.
    Control,
    /// First-variation finite-difference consistency and gain audit.
    Variation,
    /// Galerkin refinement of the energy functional across mode counts.
    Refine,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Simulate => "simulate",
            Experiment::VerifyEnergy => "verify-energy",
            Experiment::Invariant => "invariant",
            Experiment::ExpMoment => "exp-moment",
            Experiment::Recurrence => "recurrence",
            Experiment::Control => "control",
            Experiment::Variation => "variation",
            Experiment::Refine => "refine",
        }
    }
}

/// Noise block: either explicit amplitudes or a declared power law
/// (exactly one of the two).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigmas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_law: Option<PowerLawBand>,
    /// Regularity exponent; defaults to `1/2 + eps` for power-law spectra.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Shift of the damped convolution diagnostics.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
}

fn default_kappa() -> f64 {
    1.0
}

impl NoiseConfig {
    pub fn build(&self, n_modes: usize) -> Result<NoiseSpec> {
        match (&self.sigmas, &self.power_law) {
            (Some(_), Some(_)) => Err(Error::Config(
                "noise block must give either sigmas or power_law, not both".into(),
            )),
            (None, None) => Err(Error::Config(
                "noise block needs sigmas or power_law".into(),
            )),
            (Some(sig), None) => {
                let eps = self.epsilon.ok_or_else(|| {
                    Error::Config("explicit sigmas need the regularity exponent epsilon".into())
                })?;
                let mut sig = sig.clone();
                sig.resize(n_modes.max(1), 0.0);
                let mut spec = NoiseSpec::from_sigmas(sig, eps, self.kappa)?;
                spec.kappa = self.kappa;
                Ok(spec)
            }
            (None, Some(band)) => {
                let mut spec = power_law_noise(n_modes, band.c_lo, band.c_hi, band.eps)?;
                if let Some(eps) = self.epsilon {
                    if !(eps > 0.0 && eps < 1.0) {
                        return Err(Error::Config(format!(
                            "epsilon = {eps} must lie in (0,1)"
                        )));
                    }
                    spec.epsilon = eps;
                }
                spec.kappa = self.kappa;
                Ok(spec)
            }
        }
    }
}

/// Initial state as leading mode coefficients (zero-padded to the resolved
/// band).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialCondition {
    #[serde(default)]
    pub modes: Vec<f64>,
}

impl InitialCondition {
    pub fn build(&self, n_modes: usize) -> Result<SpectralField> {
        let mut coeffs = self.modes.clone();
        if coeffs.len() > n_modes {
            return Err(Error::Config(format!(
                "initial condition has {} modes but the solver resolves {n_modes}",
                coeffs.len()
            )));
        }
        coeffs.resize(n_modes, 0.0);
        SpectralField::from_coeffs(coeffs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvariantParams {
    pub burn_in: f64,
    /// Histogram range `[0, obs_max)` and bin count for every observable.
    pub obs_max: f64,
    pub bins: usize,
    /// Split-half self-consistency tolerance on the L1 histogram distance.
    pub mixing_tolerance: f64,
    /// Thresholds of the gradient time-fraction table.
    pub tightness_thresholds: Vec<f64>,
    /// Minimum horizon entering the fraction bound.
    pub t0: f64,
}

impl Default for InvariantParams {
    fn default() -> Self {
        InvariantParams {
            burn_in: 1.0,
            obs_max: 2.0,
            bins: 40,
            mixing_tolerance: 0.05,
            tightness_thresholds: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            t0: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpMomentParams {
    /// Tilt as a fraction of the admissible maximum.
    pub lambda0_fraction: f64,
    /// Absolute tilt; takes precedence over the fraction when set.
    pub lambda0: Option<f64>,
    pub times: Vec<f64>,
}

impl Default for ExpMomentParams {
    fn default() -> Self {
        ExpMomentParams { lambda0_fraction: 0.5, lambda0: None, times: vec![1.0, 2.0, 5.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecurrenceParams {
    /// Gradient-norm threshold `M`; when absent it is chosen so that
    /// `C1 lambda0 = 1`.
    pub threshold_m: Option<f64>,
    pub n_max: u32,
    pub lambda0_fraction: f64,
}

impl Default for RecurrenceParams {
    fn default() -> Self {
        RecurrenceParams { threshold_m: None, n_max: 6, lambda0_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlParams {
    /// Target state as leading mode coefficients.
    pub target_modes: Vec<f64>,
    /// Switch time; defaults to half the horizon.
    pub t0: Option<f64>,
}

impl Default for ControlParams {
    fn default() -> Self {
        ControlParams { target_modes: Vec::new(), t0: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariationParams {
    /// Cut-off radius of the mollified system.
    pub radius: f64,
    /// Finite-difference offset at the top of the quartering ladder.
    pub eps: f64,
    /// Number of (x, h) pairs in the gain audit.
    pub pairs: usize,
}

impl Default for VariationParams {
    fn default() -> Self {
        VariationParams { radius: 2.0, eps: 4e-3, pairs: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineParams {
    pub n_list: Vec<usize>,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams { n_list: vec![8, 16, 32] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyParams {
    /// Number of dt halvings below the configured solver dt.
    pub rungs: usize,
    /// Required shrink factor of the expected defect per halving.
    pub min_ratio: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams { rungs: 3, min_ratio: 1.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    #[serde(default = "default_ensemble")]
    pub ensemble_size: usize,
    pub output_dir: PathBuf,
    #[serde(default = "default_observables")]
    pub observables: Vec<ObservableId>,
    pub model: ModelParams,
    pub noise: NoiseConfig,
    pub solver: SolverConfig,
    #[serde(default)]
    pub initial: InitialCondition,
    /// How many per-trajectory CSV files to write (ensembles can be large).
    #[serde(default = "default_trajectory_files")]
    pub trajectory_files: usize,
    /// Accept parameter/noise regimes outside the validated table.
    #[serde(default)]
    pub override_regime: bool,
    #[serde(default)]
    pub invariant: InvariantParams,
    #[serde(default)]
    pub exp_moment: ExpMomentParams,
    #[serde(default)]
    pub recurrence: RecurrenceParams,
    #[serde(default)]
    pub control: ControlParams,
    #[serde(default)]
    pub variation: VariationParams,
    #[serde(default)]
    pub refine: RefineParams,
    #[serde(default)]
    pub energy: EnergyParams,
}

fn default_ensemble() -> usize {
    1
}

fn default_trajectory_files() -> usize {
    4
}

fn default_observables() -> Vec<ObservableId> {
    vec![ObservableId::L2Sq]
}

impl ExperimentConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate_shallow()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Structural checks that do not depend on the parameter-regime table;
    /// cheap enough to run on untrusted input.
    pub fn validate_shallow(&self) -> Result<()> {
        self.solver.check()?;
        if self.solver.n_modes > 4096 {
            return Err(Error::Config(format!(
                "n_modes = {} is beyond the supported range (<= 4096)",
                self.solver.n_modes
            )));
        }
        if self.ensemble_size == 0 || self.ensemble_size > 10_000_000 {
            return Err(Error::Config(format!(
                "ensemble_size = {} out of range",
                self.ensemble_size
            )));
        }
        if self.solver.steps() > 100_000_000 {
            return Err(Error::Config("t_end / dt exceeds 1e8 steps".into()));
        }
        if let Some(sig) = &self.noise.sigmas {
            if sig.len() > 4096 {
                return Err(Error::Config("more than 4096 noise amplitudes".into()));
            }
        }
        if self.initial.modes.len() > self.solver.n_modes {
            return Err(Error::Config(format!(
                "initial condition has {} modes but the solver resolves {}",
                self.initial.modes.len(),
                self.solver.n_modes
            )));
        }
        if self.experiment == Experiment::ExpMoment {
            for t in &self.exp_moment.times {
                if !(t.is_finite() && *t >= 0.0 && *t <= self.solver.t_end + 1e-12) {
                    return Err(Error::Config(format!(
                        "exp-moment time {t} outside [0, t_end]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Full validation: model domain, noise spectrum and the regime table
    /// (the latter bypassed by `override_regime`).
    pub fn validate(&self) -> Result<(NoiseSpec, crate::model::RegimeReport)> {
        self.validate_shallow()?;
        let regime = crate::model::validate_params(&self.model)?;
        let spec = self.noise.build(self.solver.n_modes)?;
        let report = crate::noise::validate_noise(&spec)?;
        if !self.override_regime {
            if !regime.uniqueness_condition_met {
                return Err(Error::Config(format!(
                    "parameters sit outside the uniqueness regime \
                     (delta = {} needs beta nu > {}); pass --override-regime to force",
                    self.model.delta,
                    crate::model::uniqueness_threshold(self.model.alpha, self.model.delta)
                )));
            }
            if !report.regularity_ok {
                return Err(Error::Config(
                    "noise spectrum fails the regularity trend check; \
                     pass --override-regime to force"
                        .into(),
                ));
            }
        }
        Ok((spec, regime))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
experiment = "simulate"
seed = 42
ensemble_size = 4
output_dir = "out"
observables = ["l2_sq", "mode_1"]

[model]
nu = 1.0
alpha = 1.0
beta = 1.0
gamma = 0.5
delta = 1.0

[noise]
power_law = { c_lo = 0.1, c_hi = 1.0, eps = 0.25 }
kappa = 1.0

[solver]
n_modes = 16
dt = 0.001
t_end = 1.0
scheme = "mild_exponential"
record_stride = 10

[initial]
modes = [0.5, -0.25]
"#;

    #[test]
    fn sample_config_parses_and_validates() {
        let cfg = ExperimentConfig::parse_str(SAMPLE).unwrap();
        assert_eq!(cfg.experiment, Experiment::Simulate);
        assert_eq!(cfg.solver.n_modes, 16);
        let (spec, regime) = cfg.validate().unwrap();
        assert_eq!(spec.n_modes(), 16);
        assert!(regime.uniqueness_unconditional);
    }

    #[test]
    fn config_round_trips_losslessly() {
        let cfg = ExperimentConfig::parse_str(SAMPLE).unwrap();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::parse_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn noise_block_is_exclusive() {
        let bad = SAMPLE.replace(
            "power_law = { c_lo = 0.1, c_hi = 1.0, eps = 0.25 }",
            "power_law = { c_lo = 0.1, c_hi = 1.0, eps = 0.25 }\nsigmas = [1.0]",
        );
        let cfg = ExperimentConfig::parse_str(&bad).unwrap();
        assert!(cfg.noise.build(8).is_err());
    }

    #[test]
    fn sigmas_need_epsilon() {
        let bad = SAMPLE.replace(
            "power_law = { c_lo = 0.1, c_hi = 1.0, eps = 0.25 }",
            "sigmas = [1.0, 0.5]",
        );
        let cfg = ExperimentConfig::parse_str(&bad).unwrap();
        assert!(cfg.noise.build(8).is_err());
        let good = SAMPLE.replace(
            "power_law = { c_lo = 0.1, c_hi = 1.0, eps = 0.25 }",
            "sigmas = [1.0, 0.5]\nepsilon = 0.75",
        );
        let cfg = ExperimentConfig::parse_str(&good).unwrap();
        let spec = cfg.noise.build(8).unwrap();
        assert_eq!(spec.n_modes(), 8);
        assert_eq!(spec.sigma(2), 0.5);
        assert_eq!(spec.sigma(3), 0.0);
    }

    #[test]
    fn regime_gate_is_enforced_unless_overridden() {
        let gated = SAMPLE.replace("delta = 1.0", "delta = 3.0");
        let cfg = ExperimentConfig::parse_str(&gated).unwrap();
        assert!(cfg.validate().is_err());
        let forced = gated.replace("seed = 42", "seed = 42\noverride_regime = true");
        let cfg = ExperimentConfig::parse_str(&forced).unwrap();
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn rejects_unknown_fields_and_bad_bounds() {
        assert!(ExperimentConfig::parse_str(&format!("{SAMPLE}\nbogus = 1")).is_err());
        let huge = SAMPLE.replace("n_modes = 16", "n_modes = 100000");
        assert!(ExperimentConfig::parse_str(&huge).is_err());
    }
}
