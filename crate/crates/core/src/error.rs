//! Crate-wide error type.

/// Errors produced by ensemble construction, integration and estimation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The ensemble parameters violate a structural invariant.
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),

    /// The operation only has a closed form for the plain (w = 1) ensemble.
    #[error("unsupported for stretched ensembles (w > 1): {0}")]
    UnsupportedStretch(&'static str),

    /// A position index fell outside `1..=D`.
    #[error("position {0} out of range 1..={1}")]
    PositionOutOfRange(usize, usize),

    /// Invalid scalar input (tolerances, grids, trial counts, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Euler integration became unstable; retry with a smaller step.
    #[error("integration unstable at tau {tau:.4}: {what}; retry with a smaller d_tau")]
    Unstable { tau: f64, what: String },

    /// The run never exhibited a flat steady-phase window.
    #[error("no steady window at epsilon {0}")]
    NoSteadyWindow(f64),

    /// The uncoupled ensemble has no nonzero stall fixed point at this erasure rate.
    #[error("no nonzero stall fixed point at epsilon {0} (below the uncoupled BP threshold)")]
    NoFixedPoint(f64),

    /// A covariance snapshot was too far from positive semidefinite to sample from.
    #[error("covariance matrix catastrophically non-PSD: min eigenvalue {min_eig:.3e} < -1e-3 * trace {trace:.3e}")]
    NotPsd { min_eig: f64, trace: f64 },

    /// The scaling law does not apply (at or above threshold, or empty steady window).
    #[error("scaling law inapplicable: {0}")]
    Inapplicable(String),

    /// Too few usable points for a fit.
    #[error("fit failed: {0}")]
    FitFailed(String),
}

pub type Result<T> = std::result::Result<T, Error>;
