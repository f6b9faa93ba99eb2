//! Expected graph evolution of the peeling decoder: the degree-distribution
//! drift system, explicit Euler integration, threshold bisection and the mean
//! scaling parameter `gamma`.
//!
//! State layout: position-major vector of length `D*(r+1)`; entry `(u, j)` for
//! `j in 1..=r` holds the normalized edge count `r_{j,u} = R_{j,u}/M` on
//! degree-`j` checks at position `u`, and entry `(u, r+1)` holds the variable
//! fraction `v_u = V_u/M` (zero for `u > L`).

use crate::ensemble::{Coupling, EnsembleSpec};
use crate::error::{Error, Result};
use crate::peeling::ChannelSpec;
use serde::{Deserialize, Serialize};

/// Positions with fewer normalized edges than this are fully decoded; their
/// drift terms are skipped to avoid 0/0 ratios.
pub const DEAD_POSITION_TOL: f64 = 1e-12;
/// `r1` below this counts as hitting zero (absorbs roundoff).
pub const DEATH_TOL: f64 = 1e-9;
/// Remaining variable mass below this counts as complete decoding.
pub const COMPLETE_TOL: f64 = 1e-4;
/// If `r1` dies while more than this variable mass remains, the run failed.
const DEATH_VARS_TOL: f64 = 1e-3;

/// Index map for the degree-distribution vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub d: usize,
    pub r: usize,
    pub big_l: usize,
}

impl Layout {
    pub fn for_spec(spec: &EnsembleSpec) -> Self {
        Self {
            d: spec.d(),
            r: spec.r as usize,
            big_l: spec.big_l as usize,
        }
    }

    pub fn len(&self) -> usize {
        self.d * (self.r + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Coordinate of `r_{j,u}`, 0-based position `u`, degree `j in 1..=r`.
    #[inline]
    pub fn k_deg(&self, u: usize, j: usize) -> usize {
        debug_assert!(j >= 1 && j <= self.r);
        u * (self.r + 1) + (j - 1)
    }

    /// Coordinate of `v_u`.
    #[inline]
    pub fn k_var(&self, u: usize) -> usize {
        u * (self.r + 1) + self.r
    }

    #[inline]
    pub fn is_var(&self, k: usize) -> bool {
        k % (self.r + 1) == self.r
    }

    /// Inverse of the coordinate map: `(position, degree)` with degree `r+1`
    /// denoting the variable entry.
    #[inline]
    pub fn coord(&self, k: usize) -> (usize, usize) {
        (k / (self.r + 1), k % (self.r + 1) + 1)
    }
}

/// Normalized degree-distribution state `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct DdState {
    pub layout: Layout,
    pub g: Vec<f64>,
}

impl DdState {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            layout,
            g: vec![0.0; layout.len()],
        }
    }

    pub fn r1_at(&self, u: usize) -> f64 {
        self.g[self.layout.k_deg(u, 1)]
    }

    pub fn r1(&self) -> f64 {
        (0..self.layout.d).map(|u| self.r1_at(u)).sum()
    }

    pub fn e_at(&self, u: usize) -> f64 {
        (1..=self.layout.r)
            .map(|j| self.g[self.layout.k_deg(u, j)])
            .sum()
    }

    pub fn v_at(&self, u: usize) -> f64 {
        if u < self.layout.big_l {
            self.g[self.layout.k_var(u)]
        } else {
            0.0
        }
    }

    pub fn sum_v(&self) -> f64 {
        (0..self.layout.big_l).map(|u| self.v_at(u)).sum()
    }
}

/// Expected degree distribution right after transmission and initialization:
/// `v_u = eps` along the chain and `r_{j,u}` from binomial thinning of the
/// (possibly partially occupied) check sockets.
pub fn initial_mean(spec: &EnsembleSpec, ch: ChannelSpec) -> DdState {
    let coupling = spec.coupling();
    let layout = Layout::for_spec(spec);
    let r = layout.r;
    let mut g = vec![0.0; layout.len()];
    for u in 0..layout.d {
        let eta = coupling.occupancy(u) * ch.epsilon;
        let slots = coupling.slots[u] as f64;
        let mut coeff = 1.0f64; // C(r, j) built up incrementally
        for j in 1..=r {
            coeff = coeff * (r - j + 1) as f64 / j as f64;
            g[layout.k_deg(u, j)] =
                j as f64 * (slots / r as f64) * coeff * eta.powi(j as i32)
                    * (1.0 - eta).powi((r - j) as i32);
        }
    }
    for p in 0..layout.big_l {
        g[layout.k_var(p)] = ch.epsilon;
    }
    DdState { layout, g }
}

/// Per-state quantities shared by the drift, the Jacobian and the second
/// moments: `e_u`, the removal-position pmf `p_u`, window sums `T_m`, the
/// per-variable-position absorption rates `kappa_p` and the edge-hit averages
/// `Pxi_u = sum_m p_m xi_{m,u}`.
#[derive(Debug, Clone)]
pub struct DriftCtx {
    pub e: Vec<f64>,
    pub r1v: Vec<f64>,
    pub r1: f64,
    pub p: Vec<f64>,
    pub v: Vec<f64>,
    pub t_win: Vec<f64>,
    pub chi: Vec<f64>,
    pub kappa: Vec<f64>,
    pub pxi: Vec<f64>,
    pub live: Vec<bool>,
}

pub fn compute_ctx(state: &DdState, coupling: &Coupling) -> DriftCtx {
    let layout = state.layout;
    let d = layout.d;
    let e: Vec<f64> = (0..d).map(|u| state.e_at(u)).collect();
    let r1v: Vec<f64> = (0..d).map(|u| state.r1_at(u)).collect();
    let r1: f64 = r1v.iter().sum();
    let p: Vec<f64> = if r1 > 0.0 {
        r1v.iter().map(|&x| x / r1).collect()
    } else {
        vec![0.0; d]
    };
    let v: Vec<f64> = (0..d).map(|u| state.v_at(u)).collect();
    let t_win: Vec<f64> = (0..d)
        .map(|m| coupling.check_sources[m].iter().map(|&pp| v[pp]).sum())
        .collect();
    let chi: Vec<f64> = (0..d)
        .map(|m| {
            if t_win[m] > DEAD_POSITION_TOL {
                p[m] / t_win[m]
            } else {
                0.0
            }
        })
        .collect();
    let kappa: Vec<f64> = (0..layout.big_l)
        .map(|pp| v[pp] * coupling.var_targets[pp].iter().map(|&m| chi[m]).sum::<f64>())
        .collect();
    let pxi: Vec<f64> = (0..d)
        .map(|u| coupling.check_sources[u].iter().map(|&pp| kappa[pp]).sum())
        .collect();
    let live: Vec<bool> = e.iter().map(|&x| x > DEAD_POSITION_TOL).collect();
    DriftCtx {
        e,
        r1v,
        r1,
        p,
        v,
        t_win,
        chi,
        kappa,
        pxi,
        live,
    }
}

/// `(r_{j+1,u} - r_{j,u}) / e_u` with `r_{r+1,u} = 0`; the expected signed
/// degree-`j` edge change per edge hit at position `u`.
#[inline]
pub fn ratio(state: &DdState, ctx: &DriftCtx, u: usize, j: usize) -> f64 {
    let up = if j < state.layout.r {
        state.g[state.layout.k_deg(u, j + 1)]
    } else {
        0.0
    };
    (up - state.g[state.layout.k_deg(u, j)]) / ctx.e[u]
}

/// Drift `f_{j,u}(G)`: expected one-step change of the raw counts
/// (`Delta R_{j,u}` and `Delta V_u`), which is also the normalized-state
/// time derivative. Requires `r1 > 0`.
pub fn drift(state: &DdState, ctx: &DriftCtx, out: &mut [f64]) {
    let layout = state.layout;
    out.iter_mut().for_each(|x| *x = 0.0);
    for u in 0..layout.d {
        if !ctx.live[u] {
            continue;
        }
        let a = ctx.pxi[u] - ctx.p[u];
        for j in 1..=layout.r {
            out[layout.k_deg(u, j)] = j as f64 * ratio(state, ctx, u, j) * a;
        }
        out[layout.k_deg(u, 1)] -= ctx.p[u];
    }
    for pp in 0..layout.big_l {
        out[layout.k_var(pp)] = -ctx.kappa[pp];
    }
}

/// Options for the local-Jacobian evaluation.
#[derive(Debug, Clone, Copy)]
pub struct JacobianOpts {
    /// Floor applied to the `1/e_u` and `1/T_m^2` derivative denominators.
    /// Zero gives the exact Jacobian; covariance integration uses a floor of a
    /// few Euler steps to keep the stiff drain modes of dying positions stable.
    pub rate_floor: f64,
}

impl Default for JacobianOpts {
    fn default() -> Self {
        Self { rate_floor: 0.0 }
    }
}

/// Emits the local (sparse) part of the drift Jacobian rows of one position.
///
/// The full Jacobian decomposes as `J = J_local + g * 1_{deg1}^T` with the
/// rank-one vector `g = -f / r1` over all rows and columns restricted to the
/// degree-one coordinates; this function emits only `J_local`. `scratch` must
/// be a zeroed `D`-length buffer and is returned zeroed.
pub fn for_each_local_jacobian_entry(
    state: &DdState,
    ctx: &DriftCtx,
    coupling: &Coupling,
    opts: JacobianOpts,
    x: usize,
    scratch: &mut [f64],
    mut push: impl FnMut(usize, usize, f64),
) {
    let layout = state.layout;
    let r = layout.r;
    let floor = opts.rate_floor;
    let inv_r1 = if ctx.r1 > 0.0 { 1.0 / ctx.r1 } else { 0.0 };

    if ctx.live[x] {
        let ecap = ctx.e[x].max(floor);
        let a = ctx.pxi[x] - ctx.p[x];

        // dPxi_x/dv_y accumulated into scratch over the touched window
        let mut touched: Vec<usize> = Vec::new();
        for &pp in &coupling.check_sources[x] {
            let sumchi: f64 = coupling.var_targets[pp].iter().map(|&m| ctx.chi[m]).sum();
            scratch[pp] += sumchi;
            touched.push(pp);
            for &m in &coupling.var_targets[pp] {
                if ctx.t_win[m] > DEAD_POSITION_TOL {
                    let tcap = ctx.t_win[m].max(floor);
                    let w = ctx.p[m] * ctx.v[pp] / (tcap * tcap);
                    if w != 0.0 {
                        for &y in &coupling.check_sources[m] {
                            scratch[y] -= w;
                            touched.push(y);
                        }
                    }
                }
            }
        }
        touched.sort_unstable();
        touched.dedup();

        // xi_{y,x} over the second-neighborhood of x
        let mut xi_cols: Vec<(usize, f64)> = Vec::new();
        {
            let mut ys: Vec<usize> = Vec::new();
            for &pp in &coupling.check_sources[x] {
                for &m in &coupling.var_targets[pp] {
                    ys.push(m);
                }
            }
            ys.sort_unstable();
            ys.dedup();
            for y in ys {
                if ctx.t_win[y] > DEAD_POSITION_TOL {
                    let mut s = 0.0;
                    for &pp in &coupling.check_sources[x] {
                        if coupling.check_sources[y].binary_search(&pp).is_ok() {
                            s += ctx.v[pp] / ctx.t_win[y];
                        }
                    }
                    if s != 0.0 {
                        xi_cols.push((y, s));
                    }
                }
            }
        }

        for j in 1..=r {
            let row = layout.k_deg(x, j);
            let rat = ratio(state, ctx, x, j);
            let jf = j as f64;
            // same-position degree block
            for q in 1..=r {
                let indicator = if q == j + 1 {
                    1.0
                } else if q == j {
                    -1.0
                } else {
                    0.0
                };
                let val = jf * (indicator - rat) / ecap * a;
                if val != 0.0 {
                    push(row, layout.k_deg(x, q), val);
                }
            }
            // local degree-one columns: j ratio (xi_{y,x} - delta_{xy})/r1 - [j=1] delta_{xy}/r1
            for &(y, xi_yx) in &xi_cols {
                let mut val = jf * rat * xi_yx * inv_r1;
                if y == x {
                    val -= jf * rat * inv_r1;
                    if j == 1 {
                        val -= inv_r1;
                    }
                }
                if val != 0.0 {
                    push(row, layout.k_deg(y, 1), val);
                }
            }
            if !xi_cols.iter().any(|&(y, _)| y == x) {
                let mut val = -jf * rat * inv_r1;
                if j == 1 {
                    val -= inv_r1;
                }
                if val != 0.0 {
                    push(row, layout.k_deg(x, 1), val);
                }
            }
            // variable columns
            for &y in &touched {
                let val = jf * rat * scratch[y];
                if val != 0.0 {
                    push(row, layout.k_var(y), val);
                }
            }
        }
        for &y in &touched {
            scratch[y] = 0.0;
        }
    }

    // variable row of position x
    if x < layout.big_l && ctx.v[x] > DEAD_POSITION_TOL {
        let row = layout.k_var(x);
        // local degree-one columns: -lambda_{y,x}/r1 for y in N(x)
        for &y in &coupling.var_targets[x] {
            if ctx.t_win[y] > DEAD_POSITION_TOL {
                let lam = ctx.v[x] / ctx.t_win[y];
                let val = -lam * inv_r1;
                if val != 0.0 {
                    push(row, layout.k_deg(y, 1), val);
                }
            }
        }
        // variable columns: -delta_{xy} sum_m chi_m + sum_{m in N(x), y in S(m)} p_m v_x / T_m^2
        let sumchi: f64 = coupling.var_targets[x].iter().map(|&m| ctx.chi[m]).sum();
        let mut touched: Vec<usize> = vec![x];
        scratch[x] -= sumchi;
        for &m in &coupling.var_targets[x] {
            if ctx.t_win[m] > DEAD_POSITION_TOL {
                let tcap = ctx.t_win[m].max(floor);
                let w = ctx.p[m] * ctx.v[x] / (tcap * tcap);
                if w != 0.0 {
                    for &y in &coupling.check_sources[m] {
                        scratch[y] += w;
                        touched.push(y);
                    }
                }
            }
        }
        touched.sort_unstable();
        touched.dedup();
        for &y in &touched {
            if scratch[y] != 0.0 {
                push(row, layout.k_var(y), scratch[y]);
            }
            scratch[y] = 0.0;
        }
    }
}

/// Dense Jacobian (local + rank-one part); test and diagnostic use.
pub fn jacobian_dense(
    state: &DdState,
    ctx: &DriftCtx,
    coupling: &Coupling,
    opts: JacobianOpts,
) -> Vec<Vec<f64>> {
    let layout = state.layout;
    let n = layout.len();
    let mut jac = vec![vec![0.0; n]; n];
    let mut scratch = vec![0.0; layout.d];
    for x in 0..layout.d {
        for_each_local_jacobian_entry(state, ctx, coupling, opts, x, &mut scratch, |r, c, v| {
            jac[r][c] += v;
        });
    }
    let mut f = vec![0.0; n];
    drift(state, ctx, &mut f);
    if ctx.r1 > 0.0 {
        for row in 0..n {
            let gshift = -f[row] / ctx.r1;
            for u in 0..layout.d {
                jac[row][layout.k_deg(u, 1)] += gshift;
            }
        }
    }
    jac
}

/// Terminal status of an integrated mean run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RunStatus {
    /// All variable mass removed.
    Decoded { tau: f64 },
    /// `r1` hit zero with variable mass remaining.
    HitZero { tau: f64 },
}

#[derive(Debug, Clone)]
pub struct MeanOptions {
    pub d_tau: f64,
    /// Record the reduced observables every `record_every` steps.
    pub record_every: usize,
    /// Full-state snapshot times.
    pub snapshots: Vec<f64>,
    /// Retry with a halved step (up to 3 times) on instability.
    pub auto_retry: bool,
}

impl Default for MeanOptions {
    fn default() -> Self {
        Self {
            d_tau: 1e-3,
            record_every: 10,
            snapshots: Vec::new(),
            auto_retry: true,
        }
    }
}

/// Reduced record of one integrated run.
#[derive(Debug, Clone)]
pub struct MeanRun {
    pub spec: EnsembleSpec,
    pub epsilon: f64,
    pub d_tau: f64,
    pub taus: Vec<f64>,
    pub r1_hat: Vec<f64>,
    pub status: RunStatus,
    pub clamp_events: u64,
    pub snapshots: Vec<(f64, DdState)>,
}

impl MeanRun {
    /// Nearest recorded `r1_hat` at time `tau`.
    pub fn r1_at(&self, tau: f64) -> f64 {
        match self
            .taus
            .binary_search_by(|t| t.partial_cmp(&tau).unwrap())
        {
            Ok(i) => self.r1_hat[i],
            Err(i) => {
                if i == 0 {
                    self.r1_hat[0]
                } else if i >= self.taus.len() {
                    *self.r1_hat.last().unwrap()
                } else if (self.taus[i] - tau).abs() < (tau - self.taus[i - 1]).abs() {
                    self.r1_hat[i]
                } else {
                    self.r1_hat[i - 1]
                }
            }
        }
    }

    /// Min/max of `r1_hat` over a time window.
    pub fn r1_extrema(&self, lo: f64, hi: f64) -> Option<(f64, f64)> {
        let mut it = self
            .taus
            .iter()
            .zip(&self.r1_hat)
            .filter(|(t, _)| **t >= lo && **t <= hi)
            .map(|(_, r)| *r);
        let first = it.next()?;
        Some(it.fold((first, first), |(mn, mx), x| (mn.min(x), mx.max(x))))
    }

    /// Steady-phase value: the plateau is approached from above with an O(1)
    /// exponential transient after the initial phase, so the flatness check
    /// runs over `[tau_mid, tau_mid + W]` (`W = min(2, eps L / 8)`) and the
    /// value is read at the most-converged end of that window.
    pub fn steady_value(&self, flat_tol: f64) -> Result<f64> {
        let horizon = self.epsilon * self.spec.big_l as f64;
        let mid = horizon / 2.0;
        let w = (horizon / 8.0).min(2.0);
        let (mn, mx) = self
            .r1_extrema(mid, mid + w)
            .ok_or(Error::NoSteadyWindow(self.epsilon))?;
        let value = self.r1_at(mid + w);
        if mx - mn >= flat_tol.max(0.01 * value.abs()) {
            return Err(Error::NoSteadyWindow(self.epsilon));
        }
        Ok(value)
    }

    pub fn died_mid_run(&self) -> bool {
        matches!(self.status, RunStatus::HitZero { .. })
    }
}

/// Integrate the mean evolution from the post-initialization state.
pub fn integrate_mean(
    spec: &EnsembleSpec,
    ch: ChannelSpec,
    opts: &MeanOptions,
) -> Result<MeanRun> {
    let state0 = initial_mean(spec, ch);
    integrate_from(spec, ch, state0, 0.0, opts)
}

/// Integrate the mean evolution from an arbitrary state at time `tau0`
/// (used with sampled states for the temporal-covariance estimator).
pub fn integrate_from(
    spec: &EnsembleSpec,
    ch: ChannelSpec,
    state0: DdState,
    tau0: f64,
    opts: &MeanOptions,
) -> Result<MeanRun> {
    let mut d_tau = opts.d_tau;
    let mut attempt = 0;
    loop {
        match integrate_once(spec, ch, state0.clone(), tau0, d_tau, opts) {
            Err(Error::Unstable { tau, what }) if opts.auto_retry && attempt < 3 => {
                attempt += 1;
                d_tau *= 0.5;
                let _ = (tau, what);
            }
            other => return other,
        }
    }
}

fn integrate_once(
    spec: &EnsembleSpec,
    ch: ChannelSpec,
    mut state: DdState,
    tau0: f64,
    d_tau: f64,
    opts: &MeanOptions,
) -> Result<MeanRun> {
    if d_tau <= 0.0 {
        return Err(Error::InvalidInput("d_tau must be positive".into()));
    }
    let coupling = spec.coupling();
    let layout = state.layout;
    let horizon = ch.epsilon * spec.big_l as f64;
    let max_tau = horizon + 5.0;
    let mut snapshots_due: Vec<f64> = opts.snapshots.clone();
    snapshots_due.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut snapshots = Vec::new();

    let mut taus = Vec::new();
    let mut r1_hat = Vec::new();
    let mut f = vec![0.0; layout.len()];
    let mut clamp_events = 0u64;
    let mut tau = tau0;
    let mut step: u64 = 0;

    loop {
        let ctx = compute_ctx(&state, &coupling);
        let r1 = ctx.r1;
        let sum_v: f64 = ctx.v[..layout.big_l].iter().sum();
        if step % opts.record_every as u64 == 0 {
            taus.push(tau);
            r1_hat.push(r1);
        }
        while let Some(&next) = snapshots_due.first() {
            if tau + d_tau / 2.0 >= next {
                snapshots.push((tau, state.clone()));
                snapshots_due.remove(0);
            } else {
                break;
            }
        }
        if !r1.is_finite() || ctx.e.iter().any(|&e| e < -1e-6 || !e.is_finite()) {
            return Err(Error::Unstable {
                tau,
                what: "negative or non-finite edge mass".into(),
            });
        }
        if r1 < DEATH_TOL {
            taus.push(tau);
            r1_hat.push(r1);
            let status = if sum_v <= DEATH_VARS_TOL {
                RunStatus::Decoded { tau }
            } else {
                RunStatus::HitZero { tau }
            };
            return Ok(finish(
                spec, ch, d_tau, taus, r1_hat, status, clamp_events, snapshots,
            ));
        }
        if sum_v <= COMPLETE_TOL {
            taus.push(tau);
            r1_hat.push(r1);
            return Ok(finish(
                spec,
                ch,
                d_tau,
                taus,
                r1_hat,
                RunStatus::Decoded { tau },
                clamp_events,
                snapshots,
            ));
        }
        if tau > max_tau {
            return Err(Error::Unstable {
                tau,
                what: "integration did not terminate".into(),
            });
        }
        drift(&state, &ctx, &mut f);
        for k in 0..layout.len() {
            state.g[k] += d_tau * f[k];
            // degree-one coordinates stay unclamped so the death of r1 is
            // detectable; clamping them floors r1 at O(d_tau) above threshold
            let (_, j) = layout.coord(k);
            if j != 1 && state.g[k] < 0.0 {
                state.g[k] = 0.0;
                clamp_events += 1;
            }
        }
        tau += d_tau;
        step += 1;
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    spec: &EnsembleSpec,
    ch: ChannelSpec,
    d_tau: f64,
    taus: Vec<f64>,
    r1_hat: Vec<f64>,
    status: RunStatus,
    clamp_events: u64,
    snapshots: Vec<(f64, DdState)>,
) -> MeanRun {
    MeanRun {
        spec: *spec,
        epsilon: ch.epsilon,
        d_tau,
        taus,
        r1_hat,
        status,
        clamp_events,
        snapshots,
    }
}

/// Options for threshold bisection.
#[derive(Debug, Clone)]
pub struct ThresholdOptions {
    /// Bisection stops when the bracket is narrower than this.
    pub tolerance: f64,
    /// Step used for the classifying integrations. The Euler-plus-clamping
    /// scheme floors the steady plateau at O(d_tau) above the true threshold,
    /// so classification runs need a finer step than production runs.
    pub d_tau: f64,
    /// A run is dead when its mid-run `r1` minimum falls below
    /// `floor_mult * d_tau`.
    pub floor_mult: f64,
}

impl Default for ThresholdOptions {
    fn default() -> Self {
        Self {
            tolerance: 5e-4,
            d_tau: 1e-4,
            floor_mult: 5.0,
        }
    }
}

/// Decide whether the mean evolution at `eps` dies: either `r1` hits zero with
/// variable mass left, or the plateau over the central half of the decoding
/// run sits below the discretization floor.
pub fn survives(spec: &EnsembleSpec, eps: f64, topts: &ThresholdOptions) -> Result<bool> {
    let ch = ChannelSpec::new(eps)?;
    let opts = MeanOptions {
        d_tau: topts.d_tau,
        record_every: 10,
        ..Default::default()
    };
    let run = integrate_mean(spec, ch, &opts)?;
    if run.died_mid_run() {
        return Ok(false);
    }
    let horizon = eps * spec.big_l as f64;
    if let Some((mn, _)) = run.r1_extrema(0.25 * horizon, 0.75 * horizon) {
        if mn < topts.floor_mult * topts.d_tau {
            return Ok(false);
        }
    }
    Ok(true)
}

/// BP/ensemble threshold: the largest erasure rate for which the expected
/// degree-one fraction stays positive throughout decoding. Bisection over
/// `[0, 1]` on [`survives`].
pub fn threshold(spec: &EnsembleSpec, topts: &ThresholdOptions) -> Result<f64> {
    if topts.tolerance <= 0.0 {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    // narrow the initial bracket cheaply with a coarse step
    let coarse = ThresholdOptions {
        d_tau: topts.d_tau.max(1e-3),
        ..topts.clone()
    };
    while hi - lo > 0.02 {
        let mid = 0.5 * (lo + hi);
        if survives(spec, mid, &coarse)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo = (lo - 0.02).max(0.0);
    while hi - lo > topts.tolerance {
        let mid = 0.5 * (lo + hi);
        if survives(spec, mid, topts)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// The mean scaling parameter: `gamma = r1_hat(*) / (eps_th - eps_ref)`,
/// evaluated at the reference gap (0.04 below threshold unless overridden).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GammaEstimate {
    pub gamma: f64,
    pub r1_steady: f64,
    pub eps_ref: f64,
    pub eps_th: f64,
}

pub fn gamma_param(
    spec: &EnsembleSpec,
    eps_th: f64,
    eps_ref: Option<f64>,
    opts: &MeanOptions,
) -> Result<GammaEstimate> {
    let eps_ref = eps_ref.unwrap_or(eps_th - 0.04);
    if eps_ref >= eps_th {
        return Err(Error::Inapplicable(format!(
            "reference epsilon {eps_ref} not below threshold {eps_th}"
        )));
    }
    let run = integrate_mean(spec, ChannelSpec::new(eps_ref)?, opts)?;
    let r1_steady = run.steady_value(1e-3)?;
    Ok(GammaEstimate {
        gamma: r1_steady / (eps_th - eps_ref),
        r1_steady,
        eps_ref,
        eps_th,
    })
}

/// Removal-position pmf `p_u = r_{1,u}/r1` and the variable profile `v_u`.
pub fn position_profile(state: &DdState) -> Result<(Vec<f64>, Vec<f64>)> {
    let r1 = state.r1();
    if r1 <= 0.0 {
        return Err(Error::Inapplicable("r1 = 0: no removal pmf".into()));
    }
    let p = (0..state.layout.d)
        .map(|u| state.r1_at(u) / r1)
        .collect();
    let v = (0..state.layout.big_l).map(|u| state.v_at(u)).collect();
    Ok((p, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::EnsembleSpec;

    fn spec36_50() -> EnsembleSpec {
        EnsembleSpec::plain(3, 6, 50, 6).unwrap()
    }

    #[test]
    fn initial_mean_known_values() {
        let spec = spec36_50();
        // eps = 0: all-zero state
        let s = initial_mean(&spec, ChannelSpec::new(0.0).unwrap());
        assert!(s.g.iter().all(|&x| x == 0.0));
        // eps = 1, interior: r_{6,u} = 6 * (1/2) * 1 = 3, others 0
        let s = initial_mean(&spec, ChannelSpec::new(1.0).unwrap());
        let u = 25;
        for j in 1..=5 {
            assert!(s.g[s.layout.k_deg(u, j)].abs() < 1e-12);
        }
        assert!((s.g[s.layout.k_deg(u, 6)] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn drift_conservation() {
        let spec = spec36_50();
        let coupling = spec.coupling();
        let state = initial_mean(&spec, ChannelSpec::new(0.45).unwrap());
        let ctx = compute_ctx(&state, &coupling);
        let mut f = vec![0.0; state.layout.len()];
        drift(&state, &ctx, &mut f);
        let sum_r: f64 = (0..state.layout.d)
            .flat_map(|u| (1..=6).map(move |j| (u, j)))
            .map(|(u, j)| f[state.layout.k_deg(u, j)])
            .sum();
        let sum_v: f64 = (0..50).map(|u| f[state.layout.k_var(u)]).sum();
        assert!((sum_r + 3.0).abs() < 1e-10, "sum f_R = {sum_r}");
        assert!((sum_v + 1.0).abs() < 1e-10, "sum f_V = {sum_v}");
    }

    #[test]
    fn drift_conservation_mid_run_and_stretched() {
        for spec in [
            EnsembleSpec::plain(3, 6, 30, 6).unwrap(),
            EnsembleSpec::new(3, 6, 30, 6, 2).unwrap(),
        ] {
            let coupling = spec.coupling();
            let ch = ChannelSpec::new(0.42).unwrap();
            let opts = MeanOptions {
                snapshots: vec![3.0],
                ..Default::default()
            };
            let run = integrate_mean(&spec, ch, &opts).unwrap();
            let (_, state) = &run.snapshots[0];
            let ctx = compute_ctx(state, &coupling);
            let mut f = vec![0.0; state.layout.len()];
            drift(state, &ctx, &mut f);
            let sum_r: f64 = (0..state.layout.d)
                .flat_map(|u| (1..=6).map(move |j| (u, j)))
                .map(|(u, j)| f[state.layout.k_deg(u, j)])
                .sum();
            let sum_v: f64 = (0..30).map(|u| f[state.layout.k_var(u)]).sum();
            assert!((sum_r + 3.0).abs() < 1e-9, "w={} sum f_R = {sum_r}", spec.w);
            assert!((sum_v + 1.0).abs() < 1e-9, "w={} sum f_V = {sum_v}", spec.w);
        }
    }

    #[test]
    fn steady_value_36_50() {
        let spec = spec36_50();
        let run = integrate_mean(
            &spec,
            ChannelSpec::new(0.45).unwrap(),
            &MeanOptions::default(),
        )
        .unwrap();
        let steady = run.steady_value(1e-3).unwrap();
        // gamma (eps_th - eps) = 4.31 * 0.03815
        assert!(
            (steady - 0.1645).abs() < 2e-3,
            "steady = {steady}, expected about 0.1645"
        );
        // first-order convergence: halving d_tau moves the plateau < 1e-4
        let run2 = integrate_mean(
            &spec,
            ChannelSpec::new(0.45).unwrap(),
            &MeanOptions {
                d_tau: 5e-4,
                record_every: 20,
                ..Default::default()
            },
        )
        .unwrap();
        let steady2 = run2.steady_value(1e-3).unwrap();
        assert!(
            (steady - steady2).abs() < 1e-4,
            "d_tau halving moved plateau by {}",
            (steady - steady2).abs()
        );
    }

    #[test]
    fn above_threshold_dies() {
        let spec = spec36_50();
        let topts = ThresholdOptions::default();
        assert!(survives(&spec, 0.45, &topts).unwrap());
        assert!(!survives(&spec, 0.50, &topts).unwrap());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let spec = EnsembleSpec::plain(3, 6, 12, 6).unwrap();
        let coupling = spec.coupling();
        let ch = ChannelSpec::new(0.42).unwrap();
        let opts = MeanOptions {
            snapshots: vec![0.0, 1.5],
            ..Default::default()
        };
        let run = integrate_mean(&spec, ch, &opts).unwrap();
        for (_, state) in &run.snapshots {
            let ctx = compute_ctx(state, &coupling);
            let jac = jacobian_dense(state, &ctx, &coupling, JacobianOpts::default());
            let n = state.layout.len();
            let h = 1e-6;
            let mut fp = vec![0.0; n];
            let mut fm = vec![0.0; n];
            for col in 0..n {
                let mut sp = state.clone();
                sp.g[col] += h;
                let cp = compute_ctx(&sp, &coupling);
                drift(&sp, &cp, &mut fp);
                let mut sm = state.clone();
                sm.g[col] -= h;
                let cm = compute_ctx(&sm, &coupling);
                drift(&sm, &cm, &mut fm);
                for row in 0..n {
                    let fd = (fp[row] - fm[row]) / (2.0 * h);
                    let a = jac[row][col];
                    let denom = a.abs().max(fd.abs()).max(1e-3);
                    assert!(
                        ((a - fd) / denom).abs() < 1e-6,
                        "J[{row}][{col}] = {a} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn position_profile_sums_to_one() {
        let spec = spec36_50();
        let state = initial_mean(&spec, ChannelSpec::new(0.45).unwrap());
        let (p, v) = position_profile(&state).unwrap();
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(v.len(), 50);
    }
}
