//! Fixed-point analysis of the uncoupled $(l,r)$-regular ensemble: the stall
//! point `x(eps)` of BP decoding, the residual undecoded fraction `beta`, the
//! steady-phase onset bound `tau_lower = L (eps - beta)` and the wave-speed
//! identity `gamma = 2 beta / c`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Largest solution of `x = eps (1 - (1-x)^{r-1})^{l-1}` and the derived
/// residual fraction `beta = eps (1 - (1-x)^{r-1})^l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncoupledFixedPoint {
    pub l: u32,
    pub r: u32,
    pub epsilon: f64,
    /// Largest BP fixed point in (0, 1]; 0 when none exists.
    pub x: f64,
    /// Residual undecoded variable fraction at the stall point.
    pub beta: f64,
    /// False below the uncoupled BP threshold (only x = 0 solves the map).
    pub exists: bool,
}

fn fixed_point_gap(l: u32, r: u32, eps: f64, x: f64) -> f64 {
    eps * (1.0 - (1.0 - x).powi(r as i32 - 1)).powi(l as i32 - 1) - x
}

/// Solve for the stall fixed point by scanning a 1000-point grid for the
/// rightmost sign change of `eps(1-(1-x)^{r-1})^{l-1} - x` and bisecting.
/// The decoder stalls at the largest root.
pub fn stall_fixed_point(l: u32, r: u32, eps: f64) -> Result<UncoupledFixedPoint> {
    if !(0.0 < eps && eps < 1.0) {
        return Err(Error::InvalidInput(format!(
            "epsilon = {eps} outside (0,1)"
        )));
    }
    let grid = 1000;
    let lo_limit = 1e-9;
    let mut bracket = None;
    // gap > 0 just left of a root approached from below; scan right to left
    let mut prev_x = eps;
    let mut prev_gap = fixed_point_gap(l, r, eps, prev_x);
    for i in (0..grid).rev() {
        let x = lo_limit + (eps - lo_limit) * i as f64 / grid as f64;
        let gap = fixed_point_gap(l, r, eps, x);
        if gap <= 0.0 && prev_gap > 0.0 || gap >= 0.0 && prev_gap < 0.0 {
            bracket = Some((x, prev_x));
            break;
        }
        prev_x = x;
        prev_gap = gap;
    }
    let Some((mut lo, mut hi)) = bracket else {
        return Ok(UncoupledFixedPoint {
            l,
            r,
            epsilon: eps,
            x: 0.0,
            beta: 0.0,
            exists: false,
        });
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo < 1e-14 {
            break;
        }
        let gm = fixed_point_gap(l, r, eps, mid);
        let gl = fixed_point_gap(l, r, eps, lo);
        if (gm > 0.0) == (gl > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x = 0.5 * (lo + hi);
    let beta = eps * (1.0 - (1.0 - x).powi(r as i32 - 1)).powi(l as i32);
    Ok(UncoupledFixedPoint {
        l,
        r,
        epsilon: eps,
        x,
        beta,
        exists: true,
    })
}

/// Uncoupled BP threshold: the supremum of erasure rates with no nonzero
/// fixed point, found by bisection on [`stall_fixed_point`]'s `exists` flag.
pub fn uncoupled_bp_threshold(l: u32, r: u32) -> f64 {
    let mut lo = 1e-6;
    let mut hi = 1.0 - 1e-6;
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if stall_fixed_point(l, r, mid).map(|fp| fp.exists).unwrap_or(true) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Lower bound on the steady-phase onset: `tau_lower = L (eps - beta)`, the
/// expected normalized time at which an uncoupled chain of the same length
/// runs out of degree-one checks. Undefined below the uncoupled BP threshold
/// (there the initial phase decodes everything and the scaling law does not
/// apply).
pub fn tau_lower_bound(l: u32, r: u32, big_l: u32, eps: f64) -> Result<f64> {
    let fp = stall_fixed_point(l, r, eps)?;
    if !fp.exists {
        return Err(Error::NoFixedPoint(eps));
    }
    Ok(big_l as f64 * (eps - fp.beta))
}

/// Wave-speed route to the mean parameter: `gamma = 2 beta / c`, with the
/// iterations-per-position coefficient `c` supplied externally (measured under
/// parallel BP or taken from literature bounds).
pub fn gamma_from_speed(l: u32, r: u32, eps: f64, c: f64) -> Result<f64> {
    if c <= 0.0 {
        return Err(Error::InvalidInput("speed coefficient c must be > 0".into()));
    }
    let fp = stall_fixed_point(l, r, eps)?;
    if !fp.exists {
        return Err(Error::NoFixedPoint(eps));
    }
    Ok(2.0 * fp.beta / c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_fixed_points() {
        // eps = eps_th - 0.01 = 0.47815: x = 0.41475, beta = 0.386273
        let fp = stall_fixed_point(3, 6, 0.47815).unwrap();
        assert!(fp.exists);
        assert!((fp.x - 0.41475).abs() < 1e-4, "x = {}", fp.x);
        assert!((fp.beta - 0.386273).abs() < 1e-4, "beta = {}", fp.beta);
        // eps = 0.48815: x = 0.432261, beta = 0.406764
        let fp = stall_fixed_point(3, 6, 0.48815).unwrap();
        assert!((fp.x - 0.432261).abs() < 1e-4);
        assert!((fp.beta - 0.406764).abs() < 1e-4);
        // residual of the fixed-point map
        assert!(fixed_point_gap(3, 6, 0.48815, fp.x).abs() < 1e-10);
    }

    #[test]
    fn below_uncoupled_threshold_no_fixed_point() {
        let fp = stall_fixed_point(3, 6, 0.40).unwrap();
        assert!(!fp.exists);
        let th = uncoupled_bp_threshold(3, 6);
        assert!((th - 0.4294).abs() < 2e-4, "uncoupled threshold = {th}");
    }

    #[test]
    fn tau_lower_values() {
        let t = tau_lower_bound(3, 6, 50, 0.48815).unwrap();
        assert!((t - 4.0693).abs() < 5e-4, "tau_lower = {t}");
        assert!(tau_lower_bound(3, 6, 50, 0.40).is_err());
    }

    #[test]
    fn gamma_from_speed_example() {
        // c = 0.18 measured for (3,6) at eps = 0.47815: gamma = 2 beta / c = 4.29
        let g = gamma_from_speed(3, 6, 0.47815, 0.18).unwrap();
        assert!((g - 4.29).abs() < 0.01, "gamma = {g}");
        // c -> infinity gives 0
        let g = gamma_from_speed(3, 6, 0.47815, 1e12).unwrap();
        assert!(g < 1e-11);
        assert!(gamma_from_speed(3, 6, 0.47815, 0.0).is_err());
    }

    #[test]
    fn beta_increasing_in_eps() {
        let mut prev = 0.0;
        for k in 0..8 {
            let eps = 0.44 + 0.01 * k as f64;
            let fp = stall_fixed_point(3, 6, eps).unwrap();
            assert!(fp.exists);
            assert!(fp.beta > prev);
            assert!(fp.beta < fp.epsilon);
            prev = fp.beta;
        }
    }
}
