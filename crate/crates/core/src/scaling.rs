//! Ornstein-Uhlenbeck first-passage machinery and the finite-length scaling
//! law.
//!
//! During the steady phase, `r1(tau) - r1_hat(*)` behaves as a stationary OU
//! process with mean-reversion rate `a = theta`, diffusion scale
//! `b = delta1_star * theta / M` and sampling interval `Omega = 1/M`; decoding
//! fails when the process first reaches the boundary `s = gamma (eps_th -
//! eps)`. The block error probability follows from the exponential tail of the
//! OU first-passage time with mean `mu0`.

use crate::error::{Error, Result};
use crate::uncoupled;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn adaptive_simpson(
    f: &impl Fn(f64) -> f64,
    a: f64,
    m: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    rel_tol: f64,
    depth: u32,
) -> f64 {
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * rel_tol * (left.abs() + right.abs()) {
        return left + right + delta / 15.0;
    }
    adaptive_simpson(f, a, lm, m, fa, flm, fm, left, rel_tol, depth - 1)
        + adaptive_simpson(f, m, rm, b, fm, frm, fb, right, rel_tol, depth - 1)
}

/// Adaptive-Simpson quadrature with per-subinterval relative tolerance
/// (the integrands here are positive).
pub fn integrate_adaptive(f: impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    adaptive_simpson(&f, a, m, b, fa, fm, fb, whole, rel_tol, 60)
}

fn check_ou_scalars(a: f64, b: f64, s: f64) -> Result<()> {
    if a <= 0.0 || b <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "OU rates must be positive: a = {a}, b = {b}"
        )));
    }
    if s < 0.0 {
        return Err(Error::InvalidInput(format!("boundary s = {s} < 0")));
    }
    Ok(())
}

/// Normalized boundary level `C = s / sqrt(b/a)` in stationary-deviation units.
pub fn boundary_in_sigmas(a: f64, b: f64, s: f64) -> f64 {
    s / (b / a).sqrt()
}

/// Mean first-passage time of the OU process from 0 to the boundary `s`:
/// `mu0 = sqrt(2 pi)/a * int_0^C Phi(z) exp(z^2/2) dz`, `C = s/sqrt(b/a)`.
///
/// Evaluated by adaptive quadrature (relative tolerance 1e-8) for `C <= 30`;
/// past that the integrand overflows doubles near `C ~ 38`, so the asymptotic
/// log-space expansion of [`log_mu0`] takes over and this returns its exp
/// (possibly infinite).
pub fn mu0(a: f64, b: f64, s: f64) -> Result<f64> {
    check_ou_scalars(a, b, s)?;
    let c = boundary_in_sigmas(a, b, s);
    if c == 0.0 {
        return Ok(0.0);
    }
    if c > 30.0 {
        return Ok(log_mu0(a, b, s)?.exp());
    }
    let integral = integrate_adaptive(|z| normal_cdf(z) * (0.5 * z * z).exp(), 0.0, c, 1e-8);
    Ok((2.0 * std::f64::consts::PI).sqrt() / a * integral)
}

/// `ln mu0`, stable for arbitrarily large boundaries. For `C > 30` the
/// quadrature is replaced by the asymptotic series
/// `int_0^C Phi e^{z^2/2} dz ~ e^{C^2/2} (1/C + 1/C^3 + 3/C^5 + 15/C^7 + 105/C^9)`
/// whose relative truncation error is below 1e-10 there.
pub fn log_mu0(a: f64, b: f64, s: f64) -> Result<f64> {
    check_ou_scalars(a, b, s)?;
    let c = boundary_in_sigmas(a, b, s);
    if c == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let ln_pref = 0.5 * (2.0 * std::f64::consts::PI).ln() - a.ln();
    if c <= 30.0 {
        let integral = integrate_adaptive(|z| normal_cdf(z) * (0.5 * z * z).exp(), 0.0, c, 1e-8);
        return Ok(ln_pref + integral.ln());
    }
    let u = 1.0 / c;
    let series = u * (1.0 + u * u * (1.0 + u * u * (3.0 + u * u * (15.0 + u * u * 105.0))));
    Ok(ln_pref + 0.5 * c * c + series.ln())
}

/// The closed-form upper bound `mu0 < sqrt(2 pi / (a b)) * s * exp(s^2 a / (2 b))`.
/// Strict for every `s > 0`; tight only in the exponent (the prefactor
/// overshoots by about `C^2`).
pub fn mu0_upper_bound(a: f64, b: f64, s: f64) -> Result<f64> {
    Ok(log_mu0_upper_bound(a, b, s)?.exp())
}

/// `ln` of [`mu0_upper_bound`].
pub fn log_mu0_upper_bound(a: f64, b: f64, s: f64) -> Result<f64> {
    check_ou_scalars(a, b, s)?;
    if s == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let c = boundary_in_sigmas(a, b, s);
    Ok(0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * (a * b).ln() + s.ln() + 0.5 * c * c)
}

/// Parameters of a sampled OU process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuParams {
    /// Mean-reversion rate.
    pub a: f64,
    /// Diffusion scale; the stationary variance is `b/a`.
    pub b: f64,
    /// Absorbing boundary level.
    pub s: f64,
    /// Sampling interval.
    pub omega: f64,
    /// Initial value.
    pub x0: f64,
}

impl OuParams {
    pub fn new(a: f64, b: f64, s: f64, omega: f64) -> Result<Self> {
        check_ou_scalars(a, b, s)?;
        if omega <= 0.0 {
            return Err(Error::InvalidInput("omega must be positive".into()));
        }
        Ok(Self {
            a,
            b,
            s,
            omega,
            x0: 0.0,
        })
    }

    /// One-step autocorrelation `g = exp(-a omega)`.
    pub fn g(&self) -> f64 {
        (-self.a * self.omega).exp()
    }

    pub fn stationary_variance(&self) -> f64 {
        self.b / self.a
    }

    pub fn boundary_in_sigmas(&self) -> f64 {
        boundary_in_sigmas(self.a, self.b, self.s)
    }
}

/// Scaling parameters of one ensemble, the inputs to the scaling law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub l: u32,
    pub r: u32,
    /// Chain length the parameters were extracted at (they are L-independent).
    #[serde(rename = "L")]
    pub big_l: u32,
    pub epsilon_th: f64,
    pub gamma: f64,
    pub delta1_star: f64,
    pub theta: f64,
    /// `tau_lower / L` evaluated at the threshold (Table-II convention).
    pub tau_lower_ratio_at_th: f64,
    /// Reference erasure rate the parameters were computed at.
    pub reference_epsilon: f64,
}

impl ScalingParams {
    pub fn alpha(&self) -> f64 {
        self.gamma / self.delta1_star.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.epsilon_th && self.epsilon_th < 1.0)
            || self.gamma <= 0.0
            || self.delta1_star <= 0.0
            || self.theta <= 0.0
        {
            return Err(Error::InvalidInput(
                "scaling parameters must be positive with epsilon_th in (0,1)".into(),
            ));
        }
        Ok(())
    }
}

/// OU identification of the steady-phase degree-one process:
/// `a = theta`, `b = delta1_star theta / M`, `s = gamma (eps_th - eps)`,
/// `omega = 1/M`.
pub fn ou_params_from_scaling(sp: &ScalingParams, m_bits: u32, eps: f64) -> Result<OuParams> {
    sp.validate()?;
    if eps >= sp.epsilon_th {
        return Err(Error::Inapplicable(format!(
            "eps = {eps} at or above threshold {}",
            sp.epsilon_th
        )));
    }
    let m = m_bits as f64;
    OuParams::new(
        sp.theta,
        sp.delta1_star * sp.theta / m,
        sp.gamma * (sp.epsilon_th - eps),
        1.0 / m,
    )
}

/// Which form of the scaling law to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionVariant {
    /// `P_B = 1 - exp(-(eps L - tau_lower)/mu0)` with the quadrature `mu0`.
    FullSl,
    /// Same with the closed-form upper bound substituted for `mu0`
    /// (a lower, optimistic error curve).
    UpperBoundMu0,
    /// First-order low-error-rate approximation
    /// `P_B = theta sqrt(delta1*) (eps L - tau_lower) / (sqrt(2 pi) gamma sqrt(M) Delta) * exp(-M gamma^2 Delta^2 / (2 delta1*))`.
    LowError,
}

/// How `tau_lower` enters a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauRule {
    /// Recompute `L (eps - beta(eps))` at the operating erasure rate (default).
    AtOperatingEps,
    /// Use the stored threshold-referenced ratio.
    AtThreshold,
    /// Conservative `tau_lower = 0` for sensitivity analysis.
    Zero,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub epsilon: f64,
    pub p_b: f64,
    pub variant: PredictionVariant,
    pub big_l: u32,
    pub m_bits: u32,
    pub tau_lower: f64,
    pub log_mu0: f64,
    /// Set when the steady window is empty (`eps L <= tau_lower`): the law
    /// predicts no steady phase and `p_b` is reported as 0.
    pub caveat: Option<String>,
}

/// Evaluate the scaling law at one operating point. All exponentials are
/// assembled in log space so tiny error probabilities keep full precision.
pub fn predict_block_error(
    sp: &ScalingParams,
    big_l: u32,
    m_bits: u32,
    eps: f64,
    variant: PredictionVariant,
    tau_rule: TauRule,
) -> Result<Prediction> {
    sp.validate()?;
    if eps >= sp.epsilon_th {
        return Err(Error::Inapplicable(format!(
            "eps = {eps} at or above threshold {}",
            sp.epsilon_th
        )));
    }
    let tau_lower = match tau_rule {
        TauRule::Zero => 0.0,
        TauRule::AtThreshold => sp.tau_lower_ratio_at_th * big_l as f64,
        TauRule::AtOperatingEps => uncoupled::tau_lower_bound(sp.l, sp.r, big_l, eps)?,
    };
    let window = eps * big_l as f64 - tau_lower;
    let ou = ou_params_from_scaling(sp, m_bits, eps)?;
    let lmu = match variant {
        PredictionVariant::FullSl => log_mu0(ou.a, ou.b, ou.s)?,
        PredictionVariant::UpperBoundMu0 | PredictionVariant::LowError => {
            log_mu0_upper_bound(ou.a, ou.b, ou.s)?
        }
    };
    if window <= 0.0 {
        return Ok(Prediction {
            epsilon: eps,
            p_b: 0.0,
            variant,
            big_l,
            m_bits,
            tau_lower,
            log_mu0: lmu,
            caveat: Some(format!(
                "steady window empty: eps*L = {} <= tau_lower = {tau_lower}",
                eps * big_l as f64
            )),
        });
    }
    let log_ratio = window.ln() - lmu;
    let p_b = match variant {
        PredictionVariant::FullSl | PredictionVariant::UpperBoundMu0 => {
            -(-log_ratio.exp()).exp_m1()
        }
        PredictionVariant::LowError => log_ratio.exp().min(1.0),
    };
    Ok(Prediction {
        epsilon: eps,
        p_b,
        variant,
        big_l,
        m_bits,
        tau_lower,
        log_mu0: lmu,
        caveat: None,
    })
}

/// Predicted block error probability after changing the bits per position from
/// `M` to `k M`, anchored on a measured curve matched by `M_SL`:
/// `P_B(kM) = P_B(M)/sqrt(k) * exp(-M_SL gamma^2 (k-1) Delta^2 / (2 delta1*))`.
pub fn predict_m_rescaling(
    sp: &ScalingParams,
    p_b_measured: f64,
    m_sl: f64,
    k: f64,
    eps: f64,
) -> Result<f64> {
    sp.validate()?;
    if k <= 0.0 {
        return Err(Error::InvalidInput("k must be positive".into()));
    }
    let delta = sp.epsilon_th - eps;
    let log_p = p_b_measured.ln() - 0.5 * k.ln()
        - m_sl * sp.gamma * sp.gamma * (k - 1.0) * delta * delta / (2.0 * sp.delta1_star);
    Ok(log_p.exp().min(1.0))
}

/// Result of calibrating the effective `M_SL` against a measured curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MslCalibration {
    pub m_sl: f64,
    /// max |log(SL(m_sl)/measured)| over the calibration points.
    pub max_abs_log_ratio: f64,
}

/// Grid-search the effective `M_SL` in `[lo, hi]` that best matches measured
/// block error rates, minimizing the max |log ratio| against the full SL. The
/// systematic finite-`M` shift of the law is absorbed here and never applied
/// silently.
pub fn calibrate_m_sl(
    sp: &ScalingParams,
    big_l: u32,
    points: &[(f64, f64)],
    lo: f64,
    hi: f64,
    grid: usize,
) -> Result<MslCalibration> {
    if points.is_empty() || grid < 2 || !(lo < hi) || lo <= 0.0 {
        return Err(Error::InvalidInput(
            "need measured points and a valid positive bracket".into(),
        ));
    }
    let mut best = MslCalibration {
        m_sl: lo,
        max_abs_log_ratio: f64::INFINITY,
    };
    for i in 0..=grid {
        let m_sl = lo + (hi - lo) * i as f64 / grid as f64;
        let mut worst: f64 = 0.0;
        for &(eps, p_meas) in points {
            let pred = predict_block_error(
                sp,
                big_l,
                m_sl.round() as u32,
                eps,
                PredictionVariant::FullSl,
                TauRule::AtOperatingEps,
            )?;
            if pred.p_b <= 0.0 || p_meas <= 0.0 {
                worst = f64::INFINITY;
                break;
            }
            worst = worst.max((pred.p_b / p_meas).ln().abs());
        }
        if worst < best.max_abs_log_ratio {
            best = MslCalibration {
                m_sl,
                max_abs_log_ratio: worst,
            };
        }
    }
    Ok(best)
}

/// Exact-discretization OU path at spacing `omega`.
#[derive(Debug, Clone)]
pub struct OuPath {
    pub x: Vec<f64>,
    /// First index with `x[i] >= s`, if any.
    pub first_passage: Option<usize>,
}

/// Simulate `n_steps` samples of the OU process, exactly in distribution:
/// `X_{i+1} = g X_i + sqrt((b/a)(1 - g^2)) Z_i`.
pub fn simulate_ou(params: &OuParams, n_steps: usize, seed: u64) -> OuPath {
    let mut rng = crate::seed::stream_rng(seed, 0);
    let g = params.g();
    let sigma = (params.stationary_variance() * (1.0 - g * g)).sqrt();
    let mut x = Vec::with_capacity(n_steps + 1);
    let mut first_passage = None;
    let mut xi = params.x0;
    x.push(xi);
    for i in 1..=n_steps {
        let z: f64 = rng.sample(StandardNormal);
        xi = g * xi + sigma * z;
        x.push(xi);
        if first_passage.is_none() && xi >= params.s {
            first_passage = Some(i);
        }
    }
    OuPath { x, first_passage }
}

/// Continuous first-passage time of the OU process to `s`, simulated with the
/// exact skeleton plus an inter-sample bridge-crossing test.
///
/// Between consecutive skeleton samples the OU bridge maps, via the Lamperti
/// time change, to a Brownian bridge against a nearly linear boundary; the
/// chord approximation gives the crossing probability
/// `exp(-(s - x0)(s - x1) a / (b sinh(a omega)))`, exact as `a omega -> 0`
/// with O((a omega)^2) boundary-curvature error. Returns the passage time, or
/// `None` if `max_steps` elapsed first.
pub fn sample_first_passage(params: &OuParams, seed: u64, max_steps: u64) -> Option<f64> {
    let mut rng = crate::seed::stream_rng(seed, 0);
    let g = params.g();
    let sigma = (params.stationary_variance() * (1.0 - g * g)).sqrt();
    let inv_bridge_scale = params.a / (params.b * (params.a * params.omega).sinh());
    let mut x0 = params.x0;
    for i in 0..max_steps {
        let z: f64 = rng.sample(StandardNormal);
        let x1 = g * x0 + sigma * z;
        if x1 >= params.s {
            return Some((i + 1) as f64 * params.omega);
        }
        let log_p = -(params.s - x0) * (params.s - x1) * inv_bridge_scale;
        if log_p > -40.0 {
            let u: f64 = rng.gen();
            if u < log_p.exp() {
                return Some((i as f64 + 0.5) * params.omega);
            }
        }
        x0 = x1;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mu0_small_boundary_series() {
        // for C <= 0.1: integral ~ C/2 + C^2/(2 sqrt(2 pi)) (Phi(z) ~ 1/2 + z/sqrt(2 pi))
        for c in [0.01, 0.05, 0.1] {
            let (a, b) = (1.3, 0.7);
            let s = c * (b / a as f64).sqrt();
            let got = mu0(a, b, s).unwrap();
            let integral_ref = integrate_trapezoid(c);
            let expect = (2.0 * std::f64::consts::PI).sqrt() / a * integral_ref;
            assert!(
                ((got - expect) / expect).abs() < 1e-6,
                "C = {c}: {got} vs {expect}"
            );
            let series = (2.0 * std::f64::consts::PI).sqrt() / a
                * (c / 2.0 + c * c / (2.0 * (2.0 * std::f64::consts::PI).sqrt()));
            assert!(((got - series) / series).abs() < 0.03);
        }
    }

    /// Brute-force trapezoid oracle, independent of the adaptive quadrature.
    fn integrate_trapezoid(c: f64) -> f64 {
        let n = 2_000_000;
        let h = c / n as f64;
        let f = |z: f64| normal_cdf(z) * (0.5 * z * z).exp();
        let mut acc = 0.5 * (f(0.0) + f(c));
        for i in 1..n {
            acc += f(i as f64 * h);
        }
        acc * h
    }

    #[test]
    fn mu0_matches_trapezoid_at_moderate_c() {
        let (a, b) = (0.59, 0.0004);
        for c in [1.0, 2.5, 5.0] {
            let s = c * (b / a as f64).sqrt();
            let got = mu0(a, b, s).unwrap();
            let expect = (2.0 * std::f64::consts::PI).sqrt() / a * integrate_trapezoid(c);
            assert!(
                ((got - expect) / expect).abs() < 1e-6,
                "C = {c}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn mu0_edge_cases_and_bound() {
        assert_eq!(mu0(1.0, 1.0, 0.0).unwrap(), 0.0);
        assert!(mu0(1.0, 1.0, -0.1).is_err());
        assert_eq!(mu0_upper_bound(1.0, 1.0, 0.0).unwrap(), 0.0);
        // the bound is strict for s > 0
        for c in [0.3, 1.0, 4.0, 9.0] {
            let (a, b) = (0.8, 0.2);
            let s = c * (b / a as f64).sqrt();
            let m = mu0(a, b, s).unwrap();
            let ub = mu0_upper_bound(a, b, s).unwrap();
            assert!(ub > m, "bound {ub} vs mu0 {m} at C = {c}");
        }
    }

    #[test]
    fn log_mu0_continuous_across_switch() {
        let a = 0.6;
        let b = 1e-4;
        // C just below and above the quadrature/asymptotic switch
        let s_lo = 29.9 * (b / a as f64).sqrt();
        let s_hi = 30.1 * (b / a as f64).sqrt();
        let lo = log_mu0(a, b, s_lo).unwrap();
        let hi = log_mu0(a, b, s_hi).unwrap();
        // d log mu0 / dC ~ C, so expect about 0.2 * 30 = 6 apart
        let gap = hi - lo;
        assert!(gap > 5.0 && gap < 7.0, "gap = {gap}");
        // asymptotic matches quadrature where both are evaluable
        let s = 25.0 * (b / a as f64).sqrt();
        let quad = log_mu0(a, b, s).unwrap();
        let u = 1.0 / 25.0f64;
        let series = u * (1.0 + u * u * (1.0 + u * u * (3.0 + u * u * (15.0 + u * u * 105.0))));
        let asym = 0.5 * (2.0 * std::f64::consts::PI).ln() - a.ln() + 0.5 * 625.0 + series.ln();
        assert!((quad - asym).abs() < 1e-6, "{quad} vs {asym}");
    }

    #[test]
    fn ou_identification_arithmetic() {
        let sp = ScalingParams {
            l: 3,
            r: 6,
            big_l: 100,
            epsilon_th: 0.48815,
            gamma: 4.31,
            delta1_star: 0.67,
            theta: 0.59,
            tau_lower_ratio_at_th: 0.0814,
            reference_epsilon: 0.44815,
        };
        let ou = ou_params_from_scaling(&sp, 2000, 0.46).unwrap();
        assert!((ou.a - 0.59).abs() < 1e-12);
        assert!((ou.s - 4.31 * 0.02815).abs() < 1e-10);
        assert!((ou.s - 0.12133).abs() < 5e-5);
        assert!((ou.stationary_variance() - 0.67 / 2000.0).abs() < 1e-12);
        assert!((ou.boundary_in_sigmas() - 6.63).abs() < 0.01);
        assert!(ou_params_from_scaling(&sp, 2000, 0.49).is_err());
        // eps = eps_th gives s = 0 (via a direct OuParams, since the
        // constructor from scaling rejects eps >= threshold)
        assert!(OuParams::new(0.59, 1e-4, 0.0, 5e-4).is_ok());
    }

    #[test]
    fn prediction_monotone_and_stable() {
        let sp = ScalingParams {
            l: 3,
            r: 6,
            big_l: 50,
            epsilon_th: 0.48815,
            gamma: 4.31,
            delta1_star: 0.67,
            theta: 0.59,
            tau_lower_ratio_at_th: 0.0814,
            reference_epsilon: 0.44815,
        };
        let mut prev = f64::INFINITY;
        for k in 0..10 {
            let eps = 0.475 - 0.003 * k as f64;
            let p = predict_block_error(
                &sp,
                50,
                2000,
                eps,
                PredictionVariant::FullSl,
                TauRule::AtOperatingEps,
            )
            .unwrap();
            assert!(p.p_b <= prev * (1.0 + 1e-12), "not monotone at {eps}");
            assert!(p.p_b >= 0.0 && p.p_b <= 1.0);
            prev = p.p_b;
        }
        // bound ordering: the upper-bound variant gives the smaller P_B
        for eps in [0.46, 0.47, 0.48] {
            let full = predict_block_error(
                &sp,
                50,
                2000,
                eps,
                PredictionVariant::FullSl,
                TauRule::AtOperatingEps,
            )
            .unwrap();
            let ub = predict_block_error(
                &sp,
                50,
                2000,
                eps,
                PredictionVariant::UpperBoundMu0,
                TauRule::AtOperatingEps,
            )
            .unwrap();
            assert!(ub.p_b <= full.p_b);
        }
    }

    #[test]
    fn m_rescaling_identity_at_k_one() {
        let sp = ScalingParams {
            l: 3,
            r: 6,
            big_l: 50,
            epsilon_th: 0.48815,
            gamma: 4.31,
            delta1_star: 0.67,
            theta: 0.59,
            tau_lower_ratio_at_th: 0.0814,
            reference_epsilon: 0.44815,
        };
        let p = predict_m_rescaling(&sp, 1e-3, 700.0, 1.0, 0.46).unwrap();
        assert!((p - 1e-3).abs() < 1e-15);
        let p4 = predict_m_rescaling(&sp, 1e-3, 700.0, 4.0, 0.46).unwrap();
        assert!(p4 < 1e-3);
    }

    #[test]
    fn ou_simulator_stationary_stats() {
        let params = OuParams::new(0.59, 0.59 * 0.67, 10.0, 0.1 / 0.59).unwrap();
        let path = simulate_ou(&params, 1_000_000, 42);
        let burn = 1000;
        let xs = &path.x[burn..];
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let sv = params.stationary_variance();
        assert!((var / sv - 1.0).abs() < 0.02, "var ratio {}", var / sv);
        // lag-k autocorrelation ~ g^k
        let g = params.g();
        for lag in [1usize, 2, 3] {
            let mut acc = 0.0;
            for i in 0..xs.len() - lag {
                acc += (xs[i] - mean) * (xs[i + lag] - mean);
            }
            let rho = acc / ((xs.len() - lag) as f64 * var);
            assert!(
                (rho - g.powi(lag as i32)).abs() < 0.01,
                "lag {lag}: {rho} vs {}",
                g.powi(lag as i32)
            );
        }
    }

    #[test]
    fn low_error_variant_equals_window_over_bound() {
        let sp = ScalingParams {
            l: 3,
            r: 6,
            big_l: 50,
            epsilon_th: 0.48815,
            gamma: 4.31,
            delta1_star: 0.67,
            theta: 0.59,
            tau_lower_ratio_at_th: 0.0814,
            reference_epsilon: 0.44815,
        };
        let eps = 0.455;
        let low = predict_block_error(
            &sp,
            50,
            4000,
            eps,
            PredictionVariant::LowError,
            TauRule::AtOperatingEps,
        )
        .unwrap();
        let ou = ou_params_from_scaling(&sp, 4000, eps).unwrap();
        let window = eps * 50.0 - low.tau_lower;
        let expect = (window.ln() - log_mu0_upper_bound(ou.a, ou.b, ou.s).unwrap()).exp();
        assert!(((low.p_b - expect) / expect).abs() < 1e-12);
    }
}
