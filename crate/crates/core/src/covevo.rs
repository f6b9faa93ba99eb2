//! Covariance evolution of the degree distribution: the ODE system for the
//! M-scaled covariances `delta^{j,u}_{z,x}(tau)`, its second-moment drift and
//! initial conditions, and extraction of the steady variance `delta1_star`.
//!
//! The update per Euler step is
//! `d delta = F2 - f f^T + delta J^T + (delta J^T)^T`, where `F2` holds the
//! one-step second moments `E[Delta_a Delta_b]`, `f` the drift and `J` the
//! drift Jacobian evaluated on the co-integrated mean state. `J` splits into a
//! sparse local part plus the rank-one global term `(-f/r1) 1_{deg1}^T` from
//! the removal-pmf normalization, so the expensive product runs as a sparse
//! matrix times dense matrix plus a rank-one update.

use crate::ensemble::{Coupling, EnsembleSpec};
use crate::error::{Error, Result};
use crate::meanevo::{
    self, compute_ctx, drift, ratio, DdState, DriftCtx, JacobianOpts, Layout, RunStatus,
    COMPLETE_TOL, DEAD_POSITION_TOL, DEATH_TOL,
};
use crate::peeling::ChannelSpec;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Symmetric covariance tensor over degree-distribution coordinates,
/// stored dense row-major (`K x K`, `K = D (r+1)`).
#[derive(Debug, Clone)]
pub struct CovState {
    pub layout: Layout,
    pub m: Vec<f64>,
}

impl CovState {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            m: vec![0.0; layout.len() * layout.len()],
            layout,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i * self.layout.len() + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let n = self.layout.len();
        self.m[i * n + j] = v;
        self.m[j * n + i] = v;
    }

    /// `delta1 = sum_{u,x} delta^{1,u}_{1,x}`, i.e. `M Var[r1]`.
    pub fn delta1(&self) -> f64 {
        let d = self.layout.d;
        let mut acc = 0.0;
        for u in 0..d {
            let row = self.layout.k_deg(u, 1);
            for x in 0..d {
                acc += self.get(row, self.layout.k_deg(x, 1));
            }
        }
        acc
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.layout.len();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.m[i * n + j] - self.m[j * n + i]).abs());
            }
        }
        worst
    }

    pub fn trace(&self) -> f64 {
        let n = self.layout.len();
        (0..n).map(|i| self.m[i * n + i]).sum()
    }

    /// Smallest eigenvalue (PSD probe). O(K^3); intended for diagnostics.
    pub fn min_eigenvalue(&self) -> f64 {
        let n = self.layout.len();
        let mat = nalgebra::DMatrix::from_row_slice(n, n, &self.m);
        let sym = nalgebra::SymmetricEigen::new(mat);
        sym.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b))
    }
}

/// How to initialize covariances involving partially occupied (boundary)
/// check positions, which the closed-form derivation only covers implicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryInit {
    /// Extend the interior combinatorics with the boundary occupancy
    /// `eta_u = q_u eps` (size-biased degree of a check given a shared edge
    /// becomes `1 + Binomial(r-1, eta_u)`).
    Generalized,
    /// Keep same-position terms, zero every cross term that touches a
    /// partially occupied position (comparison fallback).
    ZeroCross,
}

fn binom_coeff(n: usize, k: usize) -> f64 {
    let mut c = 1.0f64;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c
}

/// `P(deg = j)` after erasure thinning for a check with socket-carry
/// probability `eta`: Binomial(r, eta).
fn p_deg(r: usize, j: usize, eta: f64) -> f64 {
    binom_coeff(r, j) * eta.powi(j as i32) * (1.0 - eta).powi((r - j) as i32)
}

/// Degree pmf of the *other* r-1 sockets given one shared erased/received
/// variable: `A` = P(deg = j | shared erased), `B` = P(deg = j | shared received).
fn shared_degree_terms(r: usize, j: usize, eta: f64) -> (f64, f64) {
    let a = binom_coeff(r - 1, j - 1) * eta.powi(j as i32 - 1) * (1.0 - eta).powi((r - j) as i32);
    let b = if j <= r - 1 {
        binom_coeff(r - 1, j) * eta.powi(j as i32) * (1.0 - eta).powi((r - 1 - j) as i32)
    } else {
        0.0
    };
    (a, b)
}

/// Initial covariance state right after transmission.
///
/// Interior positions follow the closed forms: multinomial same-position
/// moments, `Var[V_u] = eps(1-eps)`, zero cross terms beyond the coupling
/// width, and for positions sharing `n_O` variable positions
/// `delta^{j,u}_{z,x}(0) = j z n_O (P(d_u=j, d_x=z | share) - p_{j,u} p_{z,x})`
/// (each of the `n_O M` doubly-connected variables hits a given check pair
/// with probability `(r/(slots_u M))(r/(slots_x M))`, so the pair-sharing
/// probability carries a single factor of `n_O`). The variable-check cross
/// term `j eps(1-eps)(A - B)` has no offset dependence: every variable has
/// exactly one edge into each check position of its range.
pub fn initial_covariance(
    spec: &EnsembleSpec,
    ch: ChannelSpec,
    boundary: BoundaryInit,
) -> Result<CovState> {
    spec.validate()?;
    let coupling = spec.coupling();
    let layout = Layout::for_spec(spec);
    let r = layout.r;
    let eps = ch.epsilon;
    let mut cov = CovState::zeros(layout);

    let eta: Vec<f64> = (0..layout.d)
        .map(|u| coupling.occupancy(u) * eps)
        .collect();
    let interior: Vec<bool> = (0..layout.d)
        .map(|u| coupling.occupancy(u) >= 1.0)
        .collect();

    // same-position multinomial moments
    for u in 0..layout.d {
        let slots_r = coupling.slots[u] as f64 / r as f64;
        for j in 1..=r {
            let pj = p_deg(r, j, eta[u]);
            for z in j..=r {
                let pz = p_deg(r, z, eta[u]);
                let val = if j == z {
                    (j * j) as f64 * slots_r * pj * (1.0 - pj)
                } else {
                    -((j * z) as f64) * slots_r * pj * pz
                };
                cov.set(layout.k_deg(u, j), layout.k_deg(u, z), val);
            }
        }
    }
    for u in 0..layout.big_l {
        cov.set(layout.k_var(u), layout.k_var(u), eps * (1.0 - eps));
    }

    // cross-position check-check terms
    for u in 0..layout.d {
        for x in (u + 1)..layout.d {
            let n_o = coupling.shared_sources(u, x);
            if n_o == 0 {
                continue;
            }
            if boundary == BoundaryInit::ZeroCross && (!interior[u] || !interior[x]) {
                continue;
            }
            for j in 1..=r {
                let (au, bu) = shared_degree_terms(r, j, eta[u]);
                let pj = p_deg(r, j, eta[u]);
                for z in 1..=r {
                    let (ax, bx) = shared_degree_terms(r, z, eta[x]);
                    let pz = p_deg(r, z, eta[x]);
                    let p_share = eps * au * ax + (1.0 - eps) * bu * bx;
                    let val = (j * z) as f64 * n_o as f64 * (p_share - pj * pz);
                    cov.set(layout.k_deg(u, j), layout.k_deg(x, z), val);
                }
            }
        }
    }

    // variable-check cross terms: V at x, R at u in N(x)
    for x in 0..layout.big_l {
        for &u in &coupling.var_targets[x] {
            if boundary == BoundaryInit::ZeroCross && !interior[u] {
                continue;
            }
            for j in 1..=r {
                let (a, b) = shared_degree_terms(r, j, eta[u]);
                let val = j as f64 * eps * (1.0 - eps) * (a - b);
                cov.set(layout.k_deg(u, j), layout.k_var(x), val);
            }
        }
    }

    Ok(cov)
}

/// Sparse one-step second moments `f^{j,u}_{z,x} = E[Delta_{j,u} Delta_{z,x}]`
/// at a state; only the upper triangle (row <= col) is stored.
#[derive(Debug, Clone)]
pub struct SecondMomentDrift {
    pub entries: Vec<(u32, u32, f64)>,
}

/// Evaluate every Appendix-case of the one-step second moments. Requires
/// `r1 > 0`.
pub fn second_moment_drift(
    state: &DdState,
    ctx: &DriftCtx,
    coupling: &Coupling,
) -> SecondMomentDrift {
    let mut entries = Vec::new();
    accumulate_second_moments(state, ctx, coupling, |row, col, val| {
        entries.push((row as u32, col as u32, val));
    });
    SecondMomentDrift { entries }
}

fn accumulate_second_moments(
    state: &DdState,
    ctx: &DriftCtx,
    coupling: &Coupling,
    mut push: impl FnMut(usize, usize, f64),
) {
    let layout = state.layout;
    let r = layout.r;

    // same position, check-check
    for u in 0..layout.d {
        if !ctx.live[u] {
            continue;
        }
        let exi = ctx.pxi[u] - ctx.p[u];
        for j in 1..=r {
            let rj = state.g[layout.k_deg(u, j)];
            let rj1 = if j < r {
                state.g[layout.k_deg(u, j + 1)]
            } else {
                0.0
            };
            let mut diag = (j * j) as f64 * (rj1 + rj) / ctx.e[u] * exi;
            if j == 1 {
                diag += ctx.p[u];
            }
            push(layout.k_deg(u, j), layout.k_deg(u, j), diag);
            if j < r {
                let val = -((j * (j + 1)) as f64) * rj1 / ctx.e[u] * exi;
                if val != 0.0 {
                    push(layout.k_deg(u, j), layout.k_deg(u, j + 1), val);
                }
            }
        }
    }

    // cross-position check-check, for positions sharing variable sources
    for u in 0..layout.d {
        if !ctx.live[u] {
            continue;
        }
        for x in (u + 1)..layout.d {
            if !ctx.live[x] {
                continue;
            }
            let mut shared_v = 0.0;
            let mut kappa_sum = 0.0;
            {
                let (a, b) = (&coupling.check_sources[u], &coupling.check_sources[x]);
                let (mut i, mut jj) = (0, 0);
                let mut any = false;
                while i < a.len() && jj < b.len() {
                    match a[i].cmp(&b[jj]) {
                        std::cmp::Ordering::Less => i += 1,
                        std::cmp::Ordering::Greater => jj += 1,
                        std::cmp::Ordering::Equal => {
                            shared_v += ctx.v[a[i]];
                            kappa_sum += ctx.kappa[a[i]];
                            any = true;
                            i += 1;
                            jj += 1;
                        }
                    }
                }
                if !any {
                    continue;
                }
            }
            let xi_u_shared = if ctx.t_win[u] > DEAD_POSITION_TOL {
                shared_v / ctx.t_win[u]
            } else {
                0.0
            };
            let xi_x_shared = if ctx.t_win[x] > DEAD_POSITION_TOL {
                shared_v / ctx.t_win[x]
            } else {
                0.0
            };
            // sum over removal positions m excluding u and x
            let xi2 = kappa_sum - ctx.p[u] * xi_u_shared - ctx.p[x] * xi_x_shared;
            for j in 1..=r {
                let rat_j = ratio(state, ctx, u, j);
                for z in 1..=r {
                    let rat_z = ratio(state, ctx, x, z);
                    let mut val = (j * z) as f64 * rat_j * rat_z * xi2;
                    if j == 1 {
                        val -= ctx.p[u] * z as f64 * xi_u_shared * rat_z;
                    }
                    if z == 1 {
                        val -= ctx.p[x] * j as f64 * xi_x_shared * rat_j;
                    }
                    if val != 0.0 {
                        push(layout.k_deg(u, j), layout.k_deg(x, z), val);
                    }
                }
            }
        }
    }

    // variable-check: V at x, R at u in N(x)
    for x in 0..layout.big_l {
        if ctx.v[x] <= DEAD_POSITION_TOL {
            continue;
        }
        for &u in &coupling.var_targets[x] {
            if !ctx.live[u] {
                continue;
            }
            let lam_ux = if ctx.t_win[u] > DEAD_POSITION_TOL {
                ctx.v[x] / ctx.t_win[u]
            } else {
                0.0
            };
            let s_other = ctx.kappa[x] - ctx.p[u] * lam_ux;
            for j in 1..=r {
                let mut val = -(j as f64) * ratio(state, ctx, u, j) * s_other;
                if j == 1 {
                    val += ctx.p[u] * lam_ux;
                }
                if val != 0.0 {
                    let (a, b) = (layout.k_deg(u, j), layout.k_var(x));
                    push(a.min(b), a.max(b), val);
                }
            }
        }
    }

    // variable-variable diagonal
    for x in 0..layout.big_l {
        if ctx.v[x] > DEAD_POSITION_TOL {
            push(layout.k_var(x), layout.k_var(x), ctx.kappa[x]);
        }
    }
}

#[derive(Debug, Clone)]
pub struct CovOptions {
    pub d_tau: f64,
    /// Jacobian rate floor in units of `d_tau`: attenuates the stiff `1/e_u`
    /// relaxation of draining positions so the explicit step stays stable.
    pub rate_floor_steps: f64,
    pub record_every: usize,
    /// Full (mean, covariance) snapshot times.
    pub snapshots: Vec<f64>,
    /// Stop time; `None` integrates to `tau_mid + flat_window` where
    /// `tau_mid = eps L / 2`.
    pub stop_at: Option<f64>,
    pub boundary_init: BoundaryInit,
    /// Half-width of the flatness window used to read `delta1_star` at `tau_mid`.
    pub flat_window: f64,
    pub auto_retry: bool,
}

impl Default for CovOptions {
    fn default() -> Self {
        Self {
            d_tau: 1e-3,
            rate_floor_steps: 20.0,
            record_every: 20,
            snapshots: Vec::new(),
            stop_at: None,
            boundary_init: BoundaryInit::Generalized,
            flat_window: 2.0,
            auto_retry: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CovSnapshot {
    pub tau: f64,
    pub mean: DdState,
    pub cov: CovState,
}

#[derive(Debug, Clone)]
pub struct CovRun {
    pub spec: EnsembleSpec,
    pub epsilon: f64,
    pub d_tau: f64,
    pub taus: Vec<f64>,
    pub delta1: Vec<f64>,
    pub r1_hat: Vec<f64>,
    /// Steady value of `delta1`, read at `tau_mid` under the flatness check.
    pub delta1_star: Option<f64>,
    pub diag_clamp_events: u64,
    pub snapshots: Vec<CovSnapshot>,
    pub status: RunStatus,
}

impl CovRun {
    pub fn delta1_at(&self, tau: f64) -> f64 {
        let i = self
            .taus
            .iter()
            .position(|&t| t >= tau)
            .unwrap_or(self.taus.len() - 1);
        self.delta1[i]
    }
}

/// `alpha = gamma / sqrt(delta1_star)`, the ratio the error probability decays
/// exponentially in.
pub fn ratio_alpha(gamma: f64, delta1_star: f64) -> Result<f64> {
    if delta1_star <= 0.0 {
        return Err(Error::InvalidInput("delta1_star must be positive".into()));
    }
    Ok(gamma / delta1_star.sqrt())
}

/// Co-integrate mean and covariance evolution with explicit Euler and read the
/// steady variance `delta1_star` at `tau_mid = eps L / 2`.
pub fn integrate_covariance(
    spec: &EnsembleSpec,
    ch: ChannelSpec,
    opts: &CovOptions,
) -> Result<CovRun> {
    let mut d_tau = opts.d_tau;
    let mut attempt = 0;
    loop {
        match integrate_covariance_once(spec, ch, opts, d_tau) {
            Err(Error::Unstable { .. }) if opts.auto_retry && attempt < 2 => {
                attempt += 1;
                d_tau *= 0.5;
            }
            other => return other,
        }
    }
}

fn integrate_covariance_once(
    spec: &EnsembleSpec,
    ch: ChannelSpec,
    opts: &CovOptions,
    d_tau: f64,
) -> Result<CovRun> {
    spec.validate()?;
    let coupling = spec.coupling();
    let layout = Layout::for_spec(spec);
    let k = layout.len();
    let r = layout.r;
    let horizon = ch.epsilon * spec.big_l as f64;
    let tau_mid = horizon / 2.0;
    let stop_at = opts.stop_at.unwrap_or(tau_mid + opts.flat_window + d_tau);
    let jac_opts = JacobianOpts {
        rate_floor: opts.rate_floor_steps * d_tau,
    };

    let mut state = meanevo::initial_mean(spec, ch);
    let mut cov = initial_covariance(spec, ch, opts.boundary_init)?;
    let mut f = vec![0.0; k];
    let mut b_mat = vec![0.0; k * k];
    let mut bt_mat = vec![0.0; k * k];
    let mut sigma = vec![0.0; k];
    let mut dead = vec![false; k];

    let mut taus = Vec::new();
    let mut delta1 = Vec::new();
    let mut r1_series = Vec::new();
    let mut snapshots_due = opts.snapshots.clone();
    snapshots_due.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut snapshots = Vec::new();
    let mut diag_clamp_events = 0u64;

    let mut tau = 0.0;
    let mut step: u64 = 0;
    let status;

    loop {
        let ctx = compute_ctx(&state, &coupling);
        let sum_v: f64 = ctx.v[..layout.big_l].iter().sum();
        if step % opts.record_every as u64 == 0 {
            taus.push(tau);
            delta1.push(cov.delta1());
            r1_series.push(ctx.r1);
        }
        while let Some(&next) = snapshots_due.first() {
            if tau + d_tau / 2.0 >= next {
                snapshots.push(CovSnapshot {
                    tau,
                    mean: state.clone(),
                    cov: cov.clone(),
                });
                snapshots_due.remove(0);
            } else {
                break;
            }
        }
        if ctx.r1 < DEATH_TOL {
            status = if sum_v <= 1e-3 {
                RunStatus::Decoded { tau }
            } else {
                RunStatus::HitZero { tau }
            };
            break;
        }
        if sum_v <= COMPLETE_TOL || tau >= stop_at {
            status = RunStatus::Decoded { tau };
            break;
        }
        if !ctx.r1.is_finite() {
            return Err(Error::Unstable {
                tau,
                what: "mean state diverged".into(),
            });
        }

        drift(&state, &ctx, &mut f);

        // B = J_local * delta (rows grouped by position so each task owns its block)
        b_mat.iter_mut().for_each(|x| *x = 0.0);
        {
            let cov_m = &cov.m;
            let state_ref = &state;
            let ctx_ref = &ctx;
            let coupling_ref = &coupling;
            b_mat
                .par_chunks_mut(k * (r + 1))
                .enumerate()
                .for_each(|(x, rows)| {
                    let row_base = x * (r + 1);
                    let mut scratch = vec![0.0; layout.d];
                    meanevo::for_each_local_jacobian_entry(
                        state_ref,
                        ctx_ref,
                        coupling_ref,
                        jac_opts,
                        x,
                        &mut scratch,
                        |row, col, val| {
                            let local = row - row_base;
                            let dst = &mut rows[local * k..(local + 1) * k];
                            let src = &cov_m[col * k..(col + 1) * k];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += val * s;
                            }
                        },
                    );
                });
        }
        // BT = B^T (tiled transpose)
        transpose_tiled(&b_mat, &mut bt_mat, k);
        // sigma_i = sum_y delta[i, (y,1)]
        sigma
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, s)| {
                let row = &cov.m[i * k..(i + 1) * k];
                let mut acc = 0.0;
                for y in 0..layout.d {
                    acc += row[y * (r + 1)];
                }
                *s = acc;
            });
        let inv_r1 = 1.0 / ctx.r1;
        let g_vec: Vec<f64> = f.iter().map(|&fi| -fi * inv_r1).collect();

        // delta += d_tau (B^T + B + sigma g^T + g sigma^T - f f^T), then the
        // sparse F2 contribution
        {
            let b_ref = &b_mat;
            let bt_ref = &bt_mat;
            let f_ref = &f;
            let g_ref = &g_vec;
            let sigma_ref = &sigma;
            let dead_ref = &dead;
            cov.m
                .par_chunks_mut(k)
                .enumerate()
                .for_each(|(i, row)| {
                    if dead_ref[i] {
                        return;
                    }
                    let fi = f_ref[i];
                    let si = sigma_ref[i];
                    let gi = g_ref[i];
                    let brow = &b_ref[i * k..(i + 1) * k];
                    let btrow = &bt_ref[i * k..(i + 1) * k];
                    for kk in 0..k {
                        row[kk] += d_tau
                            * (brow[kk] + btrow[kk] + si * g_ref[kk] + gi * sigma_ref[kk]
                                - fi * f_ref[kk]);
                    }
                });
        }
        {
            let mut apply = |row: usize, col: usize, val: f64| {
                if dead[row] || dead[col] {
                    return;
                }
                cov.m[row * k + col] += d_tau * val;
                if row != col {
                    cov.m[col * k + row] += d_tau * val;
                }
            };
            accumulate_second_moments(&state, &ctx, &coupling, &mut apply);
        }
        // clamp negative diagonal entries
        for i in 0..k {
            if cov.m[i * k + i] < 0.0 {
                cov.m[i * k + i] = 0.0;
                diag_clamp_events += 1;
            }
        }

        // advance the mean, clamping all but degree-one coordinates
        for kk in 0..k {
            state.g[kk] += d_tau * f[kk];
            let (_, j) = layout.coord(kk);
            if j != 1 && state.g[kk] < 0.0 {
                state.g[kk] = 0.0;
            }
        }
        // a decoded position carries no residual mass: freeze its covariance at 0
        for u in 0..layout.d {
            let e_u: f64 = (1..=r).map(|j| state.g[layout.k_deg(u, j)]).sum();
            if e_u < DEAD_POSITION_TOL && !dead[layout.k_deg(u, 1)] {
                for j in 1..=r {
                    kill_coordinate(&mut cov.m, &mut dead, k, layout.k_deg(u, j));
                }
            }
        }
        for u in 0..layout.big_l {
            let kv = layout.k_var(u);
            if state.g[kv] < DEAD_POSITION_TOL && !dead[kv] {
                kill_coordinate(&mut cov.m, &mut dead, k, kv);
            }
        }

        if !cov.m[0].is_finite() || !cov.delta1().is_finite() {
            return Err(Error::Unstable {
                tau,
                what: "covariance diverged".into(),
            });
        }

        tau += d_tau;
        step += 1;
    }

    taus.push(tau);
    delta1.push(cov.delta1());
    r1_series.push(state.r1());

    let delta1_star = read_steady(&taus, &delta1, tau_mid, opts.flat_window);
    Ok(CovRun {
        spec: *spec,
        epsilon: ch.epsilon,
        d_tau,
        taus,
        delta1,
        r1_hat: r1_series,
        delta1_star,
        diag_clamp_events,
        snapshots,
        status,
    })
}

fn kill_coordinate(m: &mut [f64], dead: &mut [bool], k: usize, idx: usize) {
    dead[idx] = true;
    for v in m[idx * k..(idx + 1) * k].iter_mut() {
        *v = 0.0;
    }
    for row in 0..k {
        m[row * k + idx] = 0.0;
    }
}

fn transpose_tiled(src: &[f64], dst: &mut [f64], n: usize) {
    const T: usize = 64;
    dst.par_chunks_mut(n * T)
        .enumerate()
        .for_each(|(band, chunk)| {
            let i0 = band * T;
            let rows = chunk.len() / n;
            for j0 in (0..n).step_by(T) {
                let jmax = (j0 + T).min(n);
                for di in 0..rows {
                    let i = i0 + di;
                    for j in j0..jmax {
                        chunk[di * n + j] = src[j * n + i];
                    }
                }
            }
        });
}

fn read_steady(taus: &[f64], series: &[f64], tau_mid: f64, window: f64) -> Option<f64> {
    let lo = tau_mid - window;
    let hi = tau_mid + window;
    let vals: Vec<f64> = taus
        .iter()
        .zip(series)
        .filter(|(t, _)| **t >= lo && **t <= hi)
        .map(|(_, v)| *v)
        .collect();
    if vals.len() < 3 {
        return None;
    }
    let mn = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mid_val = taus
        .iter()
        .zip(series)
        .min_by(|(t1, _), (t2, _)| {
            (*t1 - tau_mid)
                .abs()
                .partial_cmp(&(*t2 - tau_mid).abs())
                .unwrap()
        })
        .map(|(_, v)| *v)?;
    let tol = (0.05 * mid_val.abs()).max(0.02);
    (mx - mn < tol).then_some(mid_val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::EnsembleSpec;

    fn ctx_for(
        spec: &EnsembleSpec,
        eps: f64,
    ) -> (DdState, DriftCtx, Coupling) {
        let coupling = spec.coupling();
        let state = meanevo::initial_mean(spec, ChannelSpec::new(eps).unwrap());
        let ctx = compute_ctx(&state, &coupling);
        (state, ctx, coupling)
    }

    #[test]
    fn second_moment_sum_rules() {
        // sum over check-check pairs = l^2, var-var = 1, check-var = l
        let spec = EnsembleSpec::plain(3, 6, 20, 6).unwrap();
        let (state, ctx, coupling) = ctx_for(&spec, 0.45);
        let layout = state.layout;
        let f2 = second_moment_drift(&state, &ctx, &coupling);
        let mut sum_rr = 0.0;
        let mut sum_vv = 0.0;
        let mut sum_rv = 0.0;
        for &(a, b, val) in &f2.entries {
            let (a, b) = (a as usize, b as usize);
            let weight = if a == b { 1.0 } else { 2.0 };
            match (layout.is_var(a), layout.is_var(b)) {
                (false, false) => sum_rr += weight * val,
                (true, true) => sum_vv += weight * val,
                _ => sum_rv += weight * val,
            }
        }
        assert!((sum_rr - 9.0).abs() < 1e-9, "sum RR = {sum_rr}");
        assert!((sum_vv - 1.0).abs() < 1e-9, "sum VV = {sum_vv}");
        // both off-diagonal blocks: 2 * E[sum dR * sum dV] = 2l
        assert!((sum_rv - 6.0).abs() < 1e-9, "sum RV = {sum_rv}");
    }

    #[test]
    fn second_moment_support_rules() {
        let spec = EnsembleSpec::plain(3, 6, 20, 6).unwrap();
        let (state, ctx, coupling) = ctx_for(&spec, 0.45);
        let layout = state.layout;
        let f2 = second_moment_drift(&state, &ctx, &coupling);
        for &(a, b, val) in &f2.entries {
            if val == 0.0 {
                continue;
            }
            let (ua, ja) = layout.coord(a as usize);
            let (ub, jb) = layout.coord(b as usize);
            if ja <= 6 && jb <= 6 && ua != ub {
                // cross-position terms vanish beyond the coupling width
                assert!(
                    coupling.shared_sources(ua, ub) > 0,
                    "entry at distance {} positions",
                    ua.abs_diff(ub)
                );
                // same-position z > j+1 vanishing is structural (not emitted)
            }
        }
        // same-position z > j+1 never emitted
        for &(a, b, _) in &f2.entries {
            let (ua, ja) = layout.coord(a as usize);
            let (ub, jb) = layout.coord(b as usize);
            if ua == ub && ja <= 6 && jb <= 6 {
                assert!(jb <= ja + 1, "same-position pair ({ja},{jb})");
            }
        }
    }

    #[test]
    fn initial_covariance_interior_values() {
        let spec = EnsembleSpec::plain(3, 6, 20, 6).unwrap();
        let ch = ChannelSpec::new(0.45).unwrap();
        let cov = initial_covariance(&spec, ch, BoundaryInit::Generalized).unwrap();
        let layout = Layout::for_spec(&spec);
        // V-V cross terms are zero
        assert_eq!(cov.get(layout.k_var(3), layout.k_var(4)), 0.0);
        // check-check cross terms vanish for |u - x| >= l
        assert_eq!(cov.get(layout.k_deg(8, 6), layout.k_deg(11, 6)), 0.0);
        assert_ne!(cov.get(layout.k_deg(8, 6), layout.k_deg(10, 6)), 0.0);
        // interior variance matches the multinomial closed form
        let p6 = p_deg(6, 6, 0.45);
        let expect = 36.0 * 0.5 * p6 * (1.0 - p6);
        assert!((cov.get(layout.k_deg(8, 6), layout.k_deg(8, 6)) - expect).abs() < 1e-12);
        // V-R term is offset independent: same value for c = 0,1,2
        let v0 = cov.get(layout.k_deg(8, 4), layout.k_var(8));
        let v1 = cov.get(layout.k_deg(9, 4), layout.k_var(8));
        let v2 = cov.get(layout.k_deg(10, 4), layout.k_var(8));
        assert!((v0 - v1).abs() < 1e-14 && (v1 - v2).abs() < 1e-14);
        assert_ne!(v0, 0.0);
        // and matches Cov2: j M eps^j (1-eps)^{r-j} [C(r-1,j-1) - C(r,j) eps] / M
        let j = 4;
        let cov2 = j as f64
            * 0.45f64.powi(4)
            * 0.55f64.powi(2)
            * (binom_coeff(5, 3) - binom_coeff(6, 4) * 0.45);
        assert!((v0 - cov2).abs() < 1e-12, "{v0} vs {cov2}");
    }

    #[test]
    fn initial_covariance_symmetry() {
        let spec = EnsembleSpec::new(3, 6, 12, 6, 2).unwrap();
        let ch = ChannelSpec::new(0.4).unwrap();
        let cov = initial_covariance(&spec, ch, BoundaryInit::Generalized).unwrap();
        assert_eq!(cov.max_asymmetry(), 0.0);
    }
}
