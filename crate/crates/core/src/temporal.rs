//! Steady-phase temporal covariance of the degree-one process and the decay
//! rate `theta`.
//!
//! `phi_1(zeta, tau) = Cov[r1(zeta), r1(tau)]` is estimated by the Gaussian
//! sampling route: draw `N` degree distributions from the Gaussian with mean
//! `G_hat(zeta)` and covariance `delta(zeta)/M`, integrate the *mean* evolution
//! forward from each sample to get `E[r1(tau) | g(zeta)]`, and average
//! `r1(zeta) E[r1(tau)|g(zeta)]`. The decay is exponential,
//! `phi_1 ~ (delta1*/M) exp(-theta |tau - zeta|)`, and `theta` comes from a
//! least-squares line on the log-normalized covariance.

use crate::covevo::{integrate_covariance, CovOptions, CovSnapshot, CovState};
use crate::ensemble::EnsembleSpec;
use crate::error::{Error, Result};
use crate::meanevo::{integrate_from, DdState, MeanOptions};
use crate::peeling::ChannelSpec;
use crate::seed::{mix, stream_rng};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Factorized Gaussian over degree-distribution states at a fixed time.
pub struct GaussianDdSampler {
    mean: DdState,
    /// Lower factor `F` with `F F^T = delta/M`.
    factor: nalgebra::DMatrix<f64>,
    pub clamped_coords: std::sync::atomic::AtomicU64,
}

impl GaussianDdSampler {
    /// Build from a covariance snapshot, scaling by `1/M`. Uses Cholesky when
    /// the matrix is PD, otherwise a symmetric eigendecomposition with
    /// eigenvalues floored at zero. Errors when the snapshot is catastrophically
    /// non-PSD (`lambda_min < -1e-3 * trace`).
    pub fn new(mean: &DdState, cov: &CovState, m_bits: u32) -> Result<Self> {
        let k = mean.layout.len();
        let scale = 1.0 / m_bits as f64;
        let mat = nalgebra::DMatrix::from_fn(k, k, |i, j| cov.get(i, j) * scale);
        let factor = match nalgebra::Cholesky::new(mat.clone()) {
            Some(ch) => ch.l(),
            None => {
                let eig = nalgebra::SymmetricEigen::new(mat);
                let min_eig = eig.eigenvalues.min();
                let trace: f64 = eig.eigenvalues.iter().sum();
                if min_eig < -1e-3 * trace.abs() {
                    return Err(Error::NotPsd {
                        min_eig,
                        trace,
                    });
                }
                let mut u = eig.eigenvectors;
                for (ci, lam) in eig.eigenvalues.iter().enumerate() {
                    let s = lam.max(0.0).sqrt();
                    for v in u.column_mut(ci).iter_mut() {
                        *v *= s;
                    }
                }
                u
            }
        };
        Ok(Self {
            mean: mean.clone(),
            factor,
            clamped_coords: std::sync::atomic::AtomicU64::new(0),
        })
    }

    /// Draw one state; negative coordinates are clamped to zero and counted.
    pub fn sample(&self, rng: &mut impl Rng) -> DdState {
        let k = self.mean.layout.len();
        let z = nalgebra::DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = &self.factor * z;
        let mut out = self.mean.clone();
        let mut clamped = 0;
        for i in 0..k {
            out.g[i] += noise[i];
            if out.g[i] < 0.0 {
                out.g[i] = 0.0;
                clamped += 1;
            }
        }
        self.clamped_coords
            .fetch_add(clamped, std::sync::atomic::Ordering::Relaxed);
        out
    }
}

/// Sampled-estimator output for one anchor time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemporalCovEstimate {
    pub zeta: f64,
    /// Forward times, starting at `zeta`.
    pub taus: Vec<f64>,
    /// `phi_hat_1(zeta, tau)`.
    pub phi: Vec<f64>,
    /// `phi_hat / phi_hat(zeta, zeta)`.
    pub phi_norm: Vec<f64>,
    pub n: usize,
    pub m_bits: u32,
    /// Samples whose forward run went extinct before the horizon.
    pub extinct: usize,
    pub clamped_coords: u64,
}

#[derive(Debug, Clone)]
pub struct TemporalOptions {
    /// Anchor time; default is the steady-window midpoint `eps L / 2`.
    pub zeta: Option<f64>,
    pub n: usize,
    pub m_bits: u32,
    pub tau_step: f64,
    pub seed: u64,
    pub mean_d_tau: f64,
    /// Forward horizon cap `8 / theta_rough` uses a pilot fit this size.
    pub pilot_n: usize,
}

impl Default for TemporalOptions {
    fn default() -> Self {
        Self {
            zeta: None,
            n: 200,
            m_bits: 1000,
            tau_step: 0.25,
            seed: 7,
            mean_d_tau: 1e-3,
            pilot_n: 16,
        }
    }
}

/// Run covariance evolution to the anchor time and estimate the temporal
/// covariance from its snapshot.
pub fn phi_estimator(
    spec: &EnsembleSpec,
    ch: ChannelSpec,
    cov_opts: &CovOptions,
    opts: &TemporalOptions,
) -> Result<TemporalCovEstimate> {
    let zeta = opts
        .zeta
        .unwrap_or(ch.epsilon * spec.big_l as f64 / 2.0);
    let mut cov_opts = cov_opts.clone();
    cov_opts.snapshots = vec![zeta];
    cov_opts.stop_at = Some(zeta + cov_opts.d_tau);
    let run = integrate_covariance(spec, ch, &cov_opts)?;
    let snap = run
        .snapshots
        .first()
        .ok_or_else(|| Error::InvalidInput("no covariance snapshot at zeta".into()))?;
    phi_estimator_from_snapshot(spec, ch, snap, opts)
}

/// Estimate `phi_1(zeta, tau)` from a precomputed covariance snapshot.
pub fn phi_estimator_from_snapshot(
    spec: &EnsembleSpec,
    ch: ChannelSpec,
    snap: &CovSnapshot,
    opts: &TemporalOptions,
) -> Result<TemporalCovEstimate> {
    if opts.n < 2 {
        return Err(Error::InvalidInput("need at least 2 samples".into()));
    }
    let zeta = snap.tau;
    let horizon_edge = ch.epsilon * spec.big_l as f64 - zeta - 0.5;
    if horizon_edge <= opts.tau_step {
        return Err(Error::InvalidInput(format!(
            "zeta = {zeta} leaves no forward room in the steady window"
        )));
    }
    let sampler = GaussianDdSampler::new(&snap.mean, &snap.cov, opts.m_bits)?;
    let mean_opts = MeanOptions {
        d_tau: opts.mean_d_tau,
        record_every: 5,
        auto_retry: true,
        ..Default::default()
    };

    // unconditional mean forward run (same integrator, so the discretization
    // bias cancels in the covariance difference)
    let mean_fwd = integrate_from(spec, ch, snap.mean.clone(), zeta, &mean_opts)?;

    // pilot estimate of the decay rate to bound the forward horizon
    let pilot_taus = [zeta + 1.0, zeta + 3.0];
    let pilot = estimate_products(
        spec,
        ch,
        &sampler,
        &pilot_taus,
        zeta,
        opts.pilot_n,
        mix(opts.seed, 0x9111),
        &mean_opts,
    )?;
    let r1_zeta_hat = mean_fwd.r1_at(zeta);
    let phi_pilot: Vec<f64> = pilot
        .products
        .iter()
        .zip(&pilot_taus)
        .map(|(p, &t)| p - r1_zeta_hat * mean_fwd.r1_at(t))
        .collect();
    let theta_rough = if phi_pilot[0] > 0.0 && phi_pilot[1] > 0.0 {
        ((phi_pilot[0] / phi_pilot[1]).ln() / 2.0).clamp(0.05, 2.0)
    } else {
        0.5
    };
    let horizon = (8.0 / theta_rough).min(horizon_edge);

    let mut taus = vec![zeta];
    let mut t = zeta + opts.tau_step;
    while t <= zeta + horizon {
        taus.push(t);
        t += opts.tau_step;
    }

    let est = estimate_products(
        spec,
        ch,
        &sampler,
        &taus,
        zeta,
        opts.n,
        opts.seed,
        &mean_opts,
    )?;
    let phi: Vec<f64> = est
        .products
        .iter()
        .zip(&taus)
        .map(|(p, &t)| p - r1_zeta_hat * mean_fwd.r1_at(t))
        .collect();
    let phi_zeta = phi[0];
    let phi_norm: Vec<f64> = phi.iter().map(|&p| p / phi_zeta).collect();
    Ok(TemporalCovEstimate {
        zeta,
        taus,
        phi,
        phi_norm,
        n: opts.n,
        m_bits: opts.m_bits,
        extinct: est.extinct,
        clamped_coords: sampler
            .clamped_coords
            .load(std::sync::atomic::Ordering::Relaxed),
    })
}

struct ProductEstimate {
    /// `(1/N) sum r1(zeta) E[r1(tau)|g(zeta)]` per grid time.
    products: Vec<f64>,
    extinct: usize,
}

#[allow(clippy::too_many_arguments)]
fn estimate_products(
    spec: &EnsembleSpec,
    ch: ChannelSpec,
    sampler: &GaussianDdSampler,
    taus: &[f64],
    zeta: f64,
    n: usize,
    seed: u64,
    mean_opts: &MeanOptions,
) -> Result<ProductEstimate> {
    let results: Vec<Result<(Vec<f64>, bool)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(mix(seed, i as u64), 2);
            let g0 = sampler.sample(&mut rng);
            let r1_zeta = g0.r1();
            let run = integrate_from(spec, ch, g0, zeta, mean_opts)?;
            let vals: Vec<f64> = taus.iter().map(|&t| r1_zeta * run.r1_at(t)).collect();
            Ok((vals, run.died_mid_run()))
        })
        .collect();
    let mut products = vec![0.0; taus.len()];
    let mut extinct = 0;
    for res in results {
        let (vals, died) = res?;
        if died {
            extinct += 1;
        }
        for (acc, v) in products.iter_mut().zip(vals) {
            *acc += v / n as f64;
        }
    }
    Ok(ProductEstimate { products, extinct })
}

/// Least-squares exponential-decay fit of a temporal covariance estimate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ThetaFit {
    pub theta: f64,
    /// RMS residual of the line fit on the log scale.
    pub residual: f64,
    pub n_points: usize,
    /// Normalized-covariance window the fit used.
    pub window: (f64, f64),
}

/// Fit `theta` as the slope magnitude of `log(phi_norm)` against
/// `|tau - zeta|` over points with normalized covariance inside `window`
/// (default `[0.05, 0.8]`, excluding both the noisy tail and the curvature at
/// `tau ~ zeta`).
pub fn fit_theta(est: &TemporalCovEstimate, window: Option<(f64, f64)>) -> Result<ThetaFit> {
    let (lo, hi) = window.unwrap_or((0.05, 0.8));
    if est.phi[0] <= 0.0 {
        return Err(Error::FitFailed("phi(zeta, zeta) <= 0".into()));
    }
    let pts: Vec<(f64, f64)> = est
        .taus
        .iter()
        .zip(&est.phi_norm)
        .filter(|&(t, &p)| *t > est.zeta && p >= lo && p <= hi)
        .map(|(t, &p)| (t - est.zeta, p.ln()))
        .collect();
    if pts.len() < 4 {
        return Err(Error::FitFailed(format!(
            "only {} grid points inside the fit window",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let rss: f64 = pts
        .iter()
        .map(|&(x, y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    Ok(ThetaFit {
        theta: -slope,
        residual: (rss / n).sqrt(),
        n_points: pts.len(),
        window: (lo, hi),
    })
}
