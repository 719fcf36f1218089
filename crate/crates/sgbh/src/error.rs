//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A model or solver parameter fell outside its admissible domain.
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    /// A noise specification is malformed (negative or non-finite sigma,
    /// empty power-law band, ...).
    #[error("invalid noise spectrum: {0}")]
    NoiseSpectrum(String),

    /// Two fields or histograms that must share a discretization do not.
    #[error("discretization mismatch: {0}")]
    Mismatch(String),

    /// The solution left the configured norm guard; carries the time of the
    /// first offending step, the norm observed there, and the partial
    /// trajectory integrated so far.
    #[error("state norm {norm:.3e} exceeded the blow-up guard at t = {t}")]
    Diverged {
        t: f64,
        norm: f64,
        partial: Option<Box<crate::integrator::Trajectory>>,
    },

    /// An audit was asked to run outside the regime in which its bound is
    /// claimed (for example lambda0 at or above pi^2 nu / (2 ||Q||)).
    #[error("audit refused: {0}")]
    AuditRefused(String),

    /// Configuration file errors: parse failures and semantic validation.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Machine-readable diagnostic used by the CLI on stderr.
    pub fn diagnostic(&self) -> serde_json::Value {
        let kind = match self {
            Error::ParameterDomain(_) => "parameter_domain",
            Error::NoiseSpectrum(_) => "noise_spectrum",
            Error::Mismatch(_) => "mismatch",
            Error::Diverged { .. } => "diverged",
            Error::AuditRefused(_) => "audit_refused",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        };
        serde_json::json!({ "error": kind, "message": self.to_string() })
    }
}
