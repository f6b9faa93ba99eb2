//! Finite-length analysis toolkit for spatially-coupled $(l,r,L)$ LDPC ensembles
//! on the binary erasure channel.
//!
//! The crate covers the full pipeline from code construction to the closed-form
//! block-error prediction:
//!
//! * [`ensemble`] — construction and sampling of $(l,r,L)$ Tanner graphs and the
//!   stretched $\mathcal{E}(l,r,L,w)$ variant, design rate, boundary degree laws.
//! * [`peeling`] — BEC transmission, peeling decoding, Monte Carlo harness.
//! * [`meanevo`] — expected graph evolution (degree-distribution ODE system),
//!   decoding thresholds, the mean scaling parameter `gamma`.
//! * [`uncoupled`] — fixed-point analysis of the uncoupled $(l,r)$ ensemble,
//!   residual fraction `beta` and the steady-phase onset bound `tau_lower`.
//! * [`covevo`] — covariance evolution of the degree distribution, the variance
//!   parameter `delta1_star`.
//! * [`temporal`] — steady-phase temporal covariance of the degree-one process
//!   and the decay rate `theta`.
//! * [`scaling`] — Ornstein-Uhlenbeck first-passage machinery and the scaling
//!   law that predicts the block error probability from
//!   `(epsilon_th, gamma, delta1_star, theta, tau_lower)`.

pub mod covevo;
pub mod ensemble;
pub mod error;
pub mod meanevo;
pub mod peeling;
pub mod scaling;
pub mod seed;
pub mod temporal;
pub mod uncoupled;

pub use covevo::{BoundaryInit, CovOptions, CovRun, CovState};
pub use ensemble::{Coupling, EnsembleSpec, TannerGraph};
pub use error::{Error, Result};
pub use meanevo::{DdState, Layout, MeanOptions, MeanRun, RunStatus};
pub use peeling::{ChannelSpec, McResult, ResidualGraph, Trajectory};
pub use scaling::{OuParams, PredictionVariant, ScalingParams};
pub use temporal::TemporalCovEstimate;
pub use uncoupled::UncoupledFixedPoint;
