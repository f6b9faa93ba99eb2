//! BEC transmission and peeling decoding of sampled Tanner graphs, plus the
//! Monte Carlo harness.
//!
//! The peeling decoder removes one uniformly chosen degree-one check per step
//! together with its variable and all `l` edges of that variable. The residual
//! state keeps per-check live degrees, a sum-of-variable-ids accumulator (the
//! single neighbor of a degree-one check is recovered in O(1) from the sum),
//! and a swap-remove pool of degree-one checks so every step is O(l).

use crate::ensemble::{sample_graph, EnsembleSpec, TannerGraph};
use crate::error::{Error, Result};
use crate::meanevo::{DdState, Layout};
use crate::seed::{mix, stream_rng};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Binary erasure channel parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub epsilon: f64,
}

impl ChannelSpec {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidInput(format!(
                "epsilon = {epsilon} outside [0,1]"
            )));
        }
        Ok(Self { epsilon })
    }
}

const NOT_IN_POOL: u32 = u32::MAX;

/// Mutable residual graph during peeling. Exclusive access per decoder.
pub struct ResidualGraph<'a> {
    pub graph: &'a TannerGraph,
    check_deg: Vec<u16>,
    check_sum: Vec<u64>,
    var_alive: Vec<bool>,
    alive_vars: usize,
    pool: Vec<u32>,
    pool_pos: Vec<u32>,
    /// Number of live checks of degree `dgr` at position `u`:
    /// `deg_count[u * (r+1) + dgr]`, `dgr in 0..=r`.
    deg_count: Vec<u32>,
    vars_per_pos: Vec<u32>,
    steps: u64,
    rng: ChaCha8Rng,
}

/// Terminal state of one decoding run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DecodeStatus {
    /// All variables recovered.
    Decoded,
    /// Ran out of degree-one checks with variables remaining; value is the
    /// normalized stall time `tau = steps / M`.
    Stalled { tau: f64 },
}

/// Sampled decoding trajectory of the degree-one edge fraction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub tau: Vec<f64>,
    pub r1: Vec<f64>,
    /// Per-position degree-one fractions at the sample times (optional).
    pub r1_per_pos: Option<Vec<Vec<f32>>>,
    /// Per-position variable fractions at the sample times (optional).
    pub v_per_pos: Option<Vec<Vec<f32>>>,
    pub status: DecodeStatus,
}

impl<'a> ResidualGraph<'a> {
    /// Transmit over BEC(epsilon) and remove all received (non-erased)
    /// variables with their edges. This is the `tau = 0` state.
    pub fn transmit_and_initialize(
        graph: &'a TannerGraph,
        ch: ChannelSpec,
        rng_seed: u64,
    ) -> Self {
        let spec = &graph.spec;
        let (l, r) = (spec.l as usize, spec.r as usize);
        let m = spec.m as usize;
        let d = graph.coupling.d;
        let n_vars = graph.n_vars();
        let n_checks = graph.n_checks();

        let mut channel_rng = stream_rng(mix(rng_seed, 0xC4A), 0);
        let mut var_alive = vec![false; n_vars];
        let mut alive_vars = 0usize;
        let mut vars_per_pos = vec![0u32; spec.big_l as usize];
        let mut check_deg = vec![0u16; n_checks];
        let mut check_sum = vec![0u64; n_checks];
        for v in 0..n_vars {
            if channel_rng.gen::<f64>() < ch.epsilon {
                var_alive[v] = true;
                alive_vars += 1;
                vars_per_pos[v / m] += 1;
                for i in 0..l {
                    let c = graph.var_checks[v * l + i] as usize;
                    check_deg[c] += 1;
                    check_sum[c] += v as u64;
                }
            }
        }

        let mut deg_count = vec![0u32; d * (r + 1)];
        let mut pool = Vec::new();
        let mut pool_pos = vec![NOT_IN_POOL; n_checks];
        for c in 0..n_checks {
            let u = graph.check_position[c] as usize;
            deg_count[u * (r + 1) + check_deg[c] as usize] += 1;
            if check_deg[c] == 1 {
                pool_pos[c] = pool.len() as u32;
                pool.push(c as u32);
            }
        }

        Self {
            graph,
            check_deg,
            check_sum,
            var_alive,
            alive_vars,
            pool,
            pool_pos,
            deg_count,
            vars_per_pos,
            steps: 0,
            rng: stream_rng(mix(rng_seed, 0x9EE1), 1),
        }
    }

    pub fn alive_vars(&self) -> usize {
        self.alive_vars
    }

    pub fn degree_one_checks(&self) -> usize {
        self.pool.len()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn tau(&self) -> f64 {
        self.steps as f64 / self.graph.spec.m as f64
    }

    /// Total fraction of edges on degree-one checks, `r1 = (# degree-one checks) / M`.
    pub fn r1(&self) -> f64 {
        self.pool.len() as f64 / self.graph.spec.m as f64
    }

    /// Count of live checks with degree `dgr` at 0-based position `u`.
    pub fn degree_count(&self, u: usize, dgr: usize) -> u32 {
        self.deg_count[u * (self.graph.spec.r as usize + 1) + dgr]
    }

    /// Live-graph edge total, `sum_u E_u`.
    pub fn total_edges(&self) -> u64 {
        let r = self.graph.spec.r as usize;
        let d = self.graph.coupling.d;
        let mut tot = 0u64;
        for u in 0..d {
            for dgr in 1..=r {
                tot += (dgr as u64) * self.deg_count[u * (r + 1) + dgr] as u64;
            }
        }
        tot
    }

    /// Normalized degree-distribution state of the residual graph, in the
    /// mean-evolution layout.
    pub fn dd_state(&self) -> DdState {
        let spec = &self.graph.spec;
        let layout = Layout::for_spec(spec);
        let r = spec.r as usize;
        let m = spec.m as f64;
        let mut g = vec![0.0; layout.len()];
        for u in 0..layout.d {
            for j in 1..=r {
                g[layout.k_deg(u, j)] =
                    j as f64 * self.deg_count[u * (r + 1) + j] as f64 / m;
            }
        }
        for p in 0..spec.big_l as usize {
            g[layout.k_var(p)] = self.vars_per_pos[p] as f64 / m;
        }
        DdState { layout, g }
    }

    fn pool_remove(&mut self, c: usize) {
        let at = self.pool_pos[c];
        debug_assert!(at != NOT_IN_POOL);
        let last = self.pool.len() - 1;
        self.pool.swap(at as usize, last);
        let moved = self.pool[at as usize];
        self.pool_pos[moved as usize] = at;
        self.pool.pop();
        self.pool_pos[c] = NOT_IN_POOL;
    }

    fn remove_edge(&mut self, c: usize, v: usize) {
        let r = self.graph.spec.r as usize;
        let u = self.graph.check_position[c] as usize;
        let dgr = self.check_deg[c] as usize;
        debug_assert!(dgr >= 1);
        self.deg_count[u * (r + 1) + dgr] -= 1;
        self.deg_count[u * (r + 1) + dgr - 1] += 1;
        self.check_deg[c] -= 1;
        self.check_sum[c] -= v as u64;
        if dgr == 2 {
            self.pool_pos[c] = self.pool.len() as u32;
            self.pool.push(c as u32);
        } else if dgr == 1 {
            self.pool_remove(c);
        }
    }

    fn remove_variable(&mut self, v: usize) {
        let l = self.graph.spec.l as usize;
        let m = self.graph.spec.m as usize;
        debug_assert!(self.var_alive[v]);
        self.var_alive[v] = false;
        self.alive_vars -= 1;
        self.vars_per_pos[v / m] -= 1;
        for i in 0..l {
            let c = self.graph.var_checks[v * l + i] as usize;
            self.remove_edge(c, v);
        }
    }

    /// One peeling step: pick a degree-one check uniformly at random, remove
    /// it, its variable and all edges of that variable. Returns the removed
    /// `(check, variable)` or `None` when no degree-one check remains.
    pub fn peel_step(&mut self) -> Option<(u32, u32)> {
        if self.pool.is_empty() {
            return None;
        }
        let at = self.rng.gen_range(0..self.pool.len());
        let c = self.pool[at];
        debug_assert_eq!(self.check_deg[c as usize], 1);
        let v = self.check_sum[c as usize] as u32;
        self.remove_variable(v as usize);
        self.steps += 1;
        Some((c, v))
    }

    /// Peel until no degree-one check remains, recording `r1` every
    /// `record_stride` steps (default `ceil(M / 100)` when 0 is passed).
    pub fn peel_to_end(&mut self, record_stride: usize, per_position: bool) -> Trajectory {
        let m = self.graph.spec.m as usize;
        let stride = if record_stride == 0 {
            m.div_ceil(100)
        } else {
            record_stride
        };
        let mut tau = Vec::new();
        let mut r1 = Vec::new();
        let mut r1_pp: Option<Vec<Vec<f32>>> = per_position.then(Vec::new);
        let mut v_pp: Option<Vec<Vec<f32>>> = per_position.then(Vec::new);
        let mut record = |rg: &Self| {
            tau.push(rg.tau());
            r1.push(rg.r1());
            if let Some(rows) = r1_pp.as_mut() {
                let r = rg.graph.spec.r as usize;
                rows.push(
                    (0..rg.graph.coupling.d)
                        .map(|u| rg.deg_count[u * (r + 1) + 1] as f32 / rg.graph.spec.m as f32)
                        .collect(),
                );
            }
            if let Some(rows) = v_pp.as_mut() {
                rows.push(
                    rg.vars_per_pos
                        .iter()
                        .map(|&n| n as f32 / rg.graph.spec.m as f32)
                        .collect(),
                );
            }
        };
        record(self);
        while self.peel_step().is_some() {
            if self.steps as usize % stride == 0 {
                record(self);
            }
        }
        record(self);
        let status = if self.alive_vars == 0 {
            DecodeStatus::Decoded
        } else {
            DecodeStatus::Stalled { tau: self.tau() }
        };
        Trajectory {
            tau,
            r1,
            r1_per_pos: r1_pp,
            v_per_pos: v_pp,
            status,
        }
    }

    /// Peel exactly `n` steps; returns false if the decoder stalled first.
    pub fn peel_exact_steps(&mut self, n: u64) -> bool {
        for _ in 0..n {
            if self.peel_step().is_none() {
                return false;
            }
        }
        true
    }

    /// One peeling step instrumented for drift oracles: returns the raw
    /// degree-distribution increments `Delta R_{j,u}` (edge counts) and
    /// `Delta V_u` as sparse `(layout index, value)` pairs.
    pub fn one_step_delta(&mut self) -> Option<Vec<(usize, f64)>> {
        let spec = &self.graph.spec;
        let layout = Layout::for_spec(spec);
        let (l, r, m) = (spec.l as usize, spec.r as usize, spec.m as usize);
        if self.pool.is_empty() {
            return None;
        }
        let at = self.rng.gen_range(0..self.pool.len());
        let c = self.pool[at];
        let v = self.check_sum[c as usize] as usize;
        let touched: Vec<usize> = (0..l)
            .map(|i| self.graph.check_position[self.graph.var_checks[v * l + i] as usize] as usize)
            .collect();
        let before: Vec<Vec<u32>> = touched
            .iter()
            .map(|&u| self.deg_count[u * (r + 1)..(u + 1) * (r + 1)].to_vec())
            .collect();
        self.remove_variable(v);
        self.steps += 1;
        let mut delta = Vec::new();
        for (t, &u) in touched.iter().enumerate() {
            for j in 1..=r {
                let d = self.deg_count[u * (r + 1) + j] as i64 - before[t][j] as i64;
                if d != 0 {
                    delta.push((layout.k_deg(u, j), (j as i64 * d) as f64));
                }
            }
        }
        delta.push((layout.k_var(v / m), -1.0));
        Some(delta)
    }
}

/// Aggregated Monte Carlo outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McResult {
    pub spec: EnsembleSpec,
    pub epsilon: f64,
    pub trials: u64,
    pub failures: u64,
    pub base_seed: u64,
    pub p_b: f64,
    /// Wilson 95% interval for the block error probability.
    pub ci_low: f64,
    pub ci_high: f64,
    /// Normalized stall times of the failed trials, in trial order.
    pub fail_taus: Vec<f64>,
}

fn wilson_interval(failures: u64, trials: u64) -> (f64, f64) {
    let n = trials as f64;
    let p = failures as f64 / n;
    let z = 1.959963984540054_f64;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Run `trials` independent transmissions, a fresh graph per trial (the block
/// error probability is an expectation over both the ensemble and the
/// channel). Trial `i` uses seed `mix(base_seed, i)`; aggregation is
/// order-insensitive, so the result is bit-identical for any thread count.
pub fn run_monte_carlo(
    spec: &EnsembleSpec,
    ch: ChannelSpec,
    trials: u64,
    base_seed: u64,
) -> Result<McResult> {
    if trials == 0 {
        return Err(Error::InvalidInput("trials must be >= 1".into()));
    }
    spec.validate()?;
    let outcomes: Vec<Option<f64>> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let trial_seed = mix(base_seed, i);
            let graph = sample_graph(spec, mix(trial_seed, 1)).expect("validated spec");
            let mut rg = ResidualGraph::transmit_and_initialize(&graph, ch, mix(trial_seed, 2));
            while rg.peel_step().is_some() {}
            (rg.alive_vars() > 0).then(|| rg.tau())
        })
        .collect();
    let fail_taus: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let failures = fail_taus.len() as u64;
    let (ci_low, ci_high) = wilson_interval(failures, trials);
    Ok(McResult {
        spec: *spec,
        epsilon: ch.epsilon,
        trials,
        failures,
        base_seed,
        p_b: failures as f64 / trials as f64,
        ci_low,
        ci_high,
        fail_taus,
    })
}

/// Sample-covariance estimate of `phi_1(zeta, tau) = Cov[r1(zeta), r1(tau)]`
/// across trials, on the given normalized-time grids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmpiricalTemporalCov {
    pub zeta_grid: Vec<f64>,
    pub tau_grid: Vec<f64>,
    /// `phi[zi][ti]`, sample covariance with denominator `trials - 1`.
    pub phi: Vec<Vec<f64>>,
    pub trials: u64,
    pub stalled_trials: u64,
}

/// Estimate the temporal covariance of `r1` by simulating `trials` codewords.
/// Stalled trials contribute `r1 = 0` past their stall time and are counted.
pub fn empirical_temporal_covariance(
    spec: &EnsembleSpec,
    ch: ChannelSpec,
    trials: u64,
    zeta_grid: &[f64],
    tau_grid: &[f64],
    base_seed: u64,
) -> Result<EmpiricalTemporalCov> {
    if trials < 2 {
        return Err(Error::InvalidInput(
            "temporal covariance needs trials >= 2".into(),
        ));
    }
    spec.validate()?;
    let horizon = ch.epsilon * spec.big_l as f64;
    for &t in zeta_grid.iter().chain(tau_grid.iter()) {
        if !(0.0..=horizon).contains(&t) {
            return Err(Error::InvalidInput(format!(
                "grid time {t} outside [0, eps*L = {horizon}]"
            )));
        }
    }
    let mut all: Vec<f64> = zeta_grid.iter().chain(tau_grid.iter()).copied().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.dedup();
    let m = spec.m as f64;
    let targets: Vec<u64> = all.iter().map(|t| (t * m).round() as u64).collect();

    let rows: Vec<(Vec<f64>, bool)> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let trial_seed = mix(base_seed, i);
            let graph = sample_graph(spec, mix(trial_seed, 1)).expect("validated spec");
            let mut rg = ResidualGraph::transmit_and_initialize(&graph, ch, mix(trial_seed, 2));
            let mut vals = vec![0.0; targets.len()];
            let mut next = 0usize;
            loop {
                while next < targets.len() && rg.steps() >= targets[next] {
                    vals[next] = rg.r1();
                    next += 1;
                }
                if next >= targets.len() || rg.peel_step().is_none() {
                    break;
                }
            }
            // past a stall, r1 is identically zero; vals already 0 there
            (vals, rg.alive_vars() > 0)
        })
        .collect();

    let stalled = rows.iter().filter(|(_, s)| *s).count() as u64;
    let n = trials as f64;
    let npts = targets.len();
    let mut mean = vec![0.0; npts];
    for (vals, _) in &rows {
        for (k, v) in vals.iter().enumerate() {
            mean[k] += v / n;
        }
    }
    let index_of = |t: f64| -> usize {
        all.iter()
            .position(|&x| (x - t).abs() < 1e-12)
            .expect("grid value present")
    };
    let mut phi = vec![vec![0.0; tau_grid.len()]; zeta_grid.len()];
    for (zi, &z) in zeta_grid.iter().enumerate() {
        let kz = index_of(z);
        for (ti, &t) in tau_grid.iter().enumerate() {
            let kt = index_of(t);
            let mut acc = 0.0;
            for (vals, _) in &rows {
                acc += (vals[kz] - mean[kz]) * (vals[kt] - mean[kt]);
            }
            phi[zi][ti] = acc / (n - 1.0);
        }
    }
    Ok(EmpiricalTemporalCov {
        zeta_grid: zeta_grid.to_vec(),
        tau_grid: tau_grid.to_vec(),
        phi,
        trials,
        stalled_trials: stalled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec36() -> EnsembleSpec {
        EnsembleSpec::plain(3, 6, 50, 120).unwrap()
    }

    #[test]
    fn epsilon_zero_decodes_immediately() {
        let spec = spec36();
        let g = sample_graph(&spec, 1).unwrap();
        let mut rg =
            ResidualGraph::transmit_and_initialize(&g, ChannelSpec::new(0.0).unwrap(), 2);
        assert_eq!(rg.alive_vars(), 0);
        let traj = rg.peel_to_end(0, false);
        assert_eq!(traj.status, DecodeStatus::Decoded);
    }

    #[test]
    fn epsilon_one_keeps_everything() {
        let spec = spec36();
        let g = sample_graph(&spec, 1).unwrap();
        let rg = ResidualGraph::transmit_and_initialize(&g, ChannelSpec::new(1.0).unwrap(), 2);
        assert_eq!(rg.alive_vars(), g.n_vars());
        // E[V_u(0)] = M exactly at eps = 1
        for p in 0..spec.big_l as usize {
            assert_eq!(rg.vars_per_pos[p], spec.m);
        }
    }

    #[test]
    fn edge_conservation_along_peeling() {
        let spec = spec36();
        let g = sample_graph(&spec, 3).unwrap();
        let mut rg =
            ResidualGraph::transmit_and_initialize(&g, ChannelSpec::new(0.45).unwrap(), 4);
        let l = spec.l as u64;
        for _ in 0..200 {
            assert_eq!(l * rg.alive_vars() as u64, rg.total_edges());
            let edges_before = rg.total_edges();
            let vars_before = rg.alive_vars();
            if rg.peel_step().is_none() {
                break;
            }
            assert_eq!(rg.total_edges(), edges_before - l);
            assert_eq!(rg.alive_vars(), vars_before - 1);
        }
    }

    #[test]
    fn one_step_delta_sums() {
        let spec = spec36();
        let g = sample_graph(&spec, 5).unwrap();
        let mut rg =
            ResidualGraph::transmit_and_initialize(&g, ChannelSpec::new(0.45).unwrap(), 6);
        rg.peel_exact_steps(100);
        let layout = Layout::for_spec(&spec);
        let delta = rg.one_step_delta().unwrap();
        let mut dr = 0.0;
        let mut dv = 0.0;
        for (k, val) in delta {
            if layout.is_var(k) {
                dv += val;
            } else {
                dr += val;
            }
        }
        assert_eq!(dr, -(spec.l as f64));
        assert_eq!(dv, -1.0);
    }

    #[test]
    fn below_threshold_mostly_decodes_above_mostly_stalls() {
        let spec = EnsembleSpec::plain(3, 6, 50, 1000).unwrap();
        let ok = run_monte_carlo(&spec, ChannelSpec::new(0.40).unwrap(), 20, 77).unwrap();
        assert_eq!(ok.failures, 0, "eps = 0.40 should decode");
        let bad = run_monte_carlo(&spec, ChannelSpec::new(0.55).unwrap(), 20, 78).unwrap();
        assert!(bad.failures >= 19, "eps = 0.55 should stall");
    }

    #[test]
    fn monte_carlo_deterministic_across_thread_counts() {
        let spec = EnsembleSpec::plain(3, 6, 30, 60).unwrap();
        let ch = ChannelSpec::new(0.47).unwrap();
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool8 = rayon::ThreadPoolBuilder::new().num_threads(8).build().unwrap();
        let a = pool1.install(|| run_monte_carlo(&spec, ch, 400, 99).unwrap());
        let b = pool8.install(|| run_monte_carlo(&spec, ch, 400, 99).unwrap());
        assert_eq!(a.failures, b.failures);
        assert_eq!(a.fail_taus, b.fail_taus);
        assert_eq!(a.p_b, b.p_b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = spec36();
        assert!(run_monte_carlo(&spec, ChannelSpec::new(0.4).unwrap(), 0, 1).is_err());
        assert!(ChannelSpec::new(-0.1).is_err());
        assert!(ChannelSpec::new(1.1).is_err());
        assert!(empirical_temporal_covariance(
            &spec,
            ChannelSpec::new(0.45).unwrap(),
            1,
            &[5.0],
            &[6.0],
            1
        )
        .is_err());
        // grid outside [0, eps L]
        assert!(empirical_temporal_covariance(
            &spec,
            ChannelSpec::new(0.45).unwrap(),
            10,
            &[30.0],
            &[6.0],
            1
        )
        .is_err());
    }
}
