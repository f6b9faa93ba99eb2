//! Construction of the $(l,r,L)$ ensemble and its stretched
//! $\mathcal{E}(l,r,L,w)$ variant, and sampling of Tanner graphs.
//!
//! A code has `L` variable positions with `M` degree-`l` variables each and
//! `D` check positions. For `w = 1`, a variable at position `u` sends one edge
//! to each of the check positions `u, u+1, ..., u+l-1` and `D = L + l - 1`.
//! For `w > 1`, variables at odd positions stretch their connections to
//! `u, u+w, ..., u+w(l-1)` while even positions keep the unit stride, giving
//! `D = L + w(l-1)`.
//!
//! Check positions allocate one block of `M` sockets per *slot*, i.e. per
//! `(variable-position parity, edge index)` combination that can reach them;
//! blocks whose source position falls outside `1..=L` stay empty. For `w = 1`
//! this is exactly the textbook construction (`l` blocks of `M` sockets,
//! `l/r * M` checks per position), and it reproduces the boundary law: the
//! degree of a random check at position `u <= l-1` is Binomial(r, u/l).

use crate::error::{Error, Result};
use crate::seed::{mix, stream_rng};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Parameters of one spatially-coupled ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnsembleSpec {
    /// Variable-node degree `l >= 2`.
    pub l: u32,
    /// Check-node degree `r >= l`.
    pub r: u32,
    /// Chain length (number of variable positions).
    #[serde(rename = "L")]
    pub big_l: u32,
    /// Variables per position.
    #[serde(rename = "M")]
    pub m: u32,
    /// Coupling stretch factor; `w = 1` is the plain `(l,r,L)` ensemble.
    #[serde(default = "default_w")]
    pub w: u32,
}

fn default_w() -> u32 {
    1
}

impl EnsembleSpec {
    pub fn new(l: u32, r: u32, big_l: u32, m: u32, w: u32) -> Result<Self> {
        let spec = Self { l, r, big_l, m, w };
        spec.validate()?;
        Ok(spec)
    }

    /// Plain `(l,r,L)` ensemble.
    pub fn plain(l: u32, r: u32, big_l: u32, m: u32) -> Result<Self> {
        Self::new(l, r, big_l, m, 1)
    }

    /// Number of check positions: `L + l - 1` for `w = 1`, `L + w(l-1)` otherwise.
    pub fn d(&self) -> usize {
        (self.big_l + self.w * (self.l - 1)) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.l < 2 {
            return Err(Error::InvalidEnsemble(format!("l = {} < 2", self.l)));
        }
        if self.r < self.l {
            return Err(Error::InvalidEnsemble(format!(
                "r = {} < l = {}",
                self.r, self.l
            )));
        }
        if self.big_l < 1 || self.m < 1 || self.w < 1 {
            return Err(Error::InvalidEnsemble(
                "L, M and w must all be >= 1".into(),
            ));
        }
        let coupling = Coupling::new(self.l as usize, self.big_l as usize, self.w as usize);
        for (c, &s) in coupling.slots.iter().enumerate() {
            if (s as u64 * self.m as u64) % self.r as u64 != 0 {
                return Err(Error::InvalidEnsemble(format!(
                    "check position {} has {} socket blocks: {}*M must be divisible by r = {} (for w = 1 this is the usual l*M % r == 0)",
                    c + 1,
                    s,
                    s,
                    self.r
                )));
            }
        }
        Ok(())
    }

    pub fn coupling(&self) -> Coupling {
        Coupling::new(self.l as usize, self.big_l as usize, self.w as usize)
    }

    /// Design rate of the plain ensemble, from the closed form
    /// `1 - (l/r) (1 - (l-1)/L + 2 sum_{u=1}^{l-1} (1 - ((l-u)/l)^r) / L)`.
    ///
    /// For `w > 1` the paper gives no closed form; the rate must be estimated
    /// by counting nonempty checks on sampled graphs.
    pub fn design_rate(&self) -> Result<f64> {
        if self.w != 1 {
            return Err(Error::UnsupportedStretch(
                "design_rate has a closed form only for w = 1",
            ));
        }
        let (l, r, big_l) = (self.l as f64, self.r as f64, self.big_l as f64);
        let mut boundary = 0.0;
        for u in 1..self.l {
            boundary += 1.0 - ((self.l - u) as f64 / l).powi(self.r as i32);
        }
        Ok(1.0 - (l / r) * (1.0 - (l - 1.0) / big_l + 2.0 * boundary / big_l))
    }

    /// Degree pmf `rho_{m,u}` (over degrees `0..=r`) of a random check at
    /// 1-based position `u` in the original code graph: Binomial(r, u/l) at the
    /// left boundary, a point mass at `r` in the interior, and the mirrored
    /// Binomial(r, (L+l-u)/l) at the right boundary.
    pub fn boundary_degree_pmf(&self, u: usize) -> Result<Vec<f64>> {
        if self.w != 1 {
            return Err(Error::UnsupportedStretch(
                "closed-form boundary degree pmf only for w = 1; use sampled graphs",
            ));
        }
        let d = self.d();
        if u < 1 || u > d {
            return Err(Error::PositionOutOfRange(u, d));
        }
        let coupling = self.coupling();
        Ok(binomial_pmf(self.r as usize, coupling.occupancy(u - 1)))
    }
}

/// Binomial(n, p) pmf over `0..=n`.
pub(crate) fn binomial_pmf(n: usize, p: f64) -> Vec<f64> {
    let mut pmf = vec![0.0; n + 1];
    // recursive binomial coefficients keep this exact enough for r <= 32
    let q = 1.0 - p;
    let mut coeff = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            coeff = coeff * (n - k + 1) as f64 / k as f64;
        }
        pmf[k] = coeff * p.powi(k as i32) * q.powi((n - k) as i32);
    }
    pmf
}

/// Structural coupling pattern: which check positions each variable position
/// feeds, and which variable positions each check position draws from.
///
/// Positions are 0-based internally.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub l: usize,
    pub w: usize,
    pub big_l: usize,
    pub d: usize,
    /// `var_targets[p]` = sorted check positions of variable position `p` (`l` of them).
    pub var_targets: Vec<Vec<usize>>,
    /// `check_sources[c]` = sorted in-range variable positions feeding check position `c`.
    pub check_sources: Vec<Vec<usize>>,
    /// `slots[c]` = number of socket blocks at check position `c` (in-range or not).
    pub slots: Vec<usize>,
    /// Slot lists per check position: `(source position as isize, slot order)`.
    slot_sources: Vec<Vec<isize>>,
}

impl Coupling {
    pub fn new(l: usize, big_l: usize, w: usize) -> Self {
        let d = big_l + w * (l - 1);
        let mut var_targets = Vec::with_capacity(big_l);
        for p0 in 0..big_l {
            let p1 = p0 + 1; // 1-based position decides the parity rule
            let stride = if w == 1 {
                1
            } else if p1 % 2 == 1 {
                w
            } else {
                1
            };
            let targets: Vec<usize> = (0..l).map(|j| p0 + j * stride).collect();
            var_targets.push(targets);
        }
        // Slots at check position c: all (parity family, j) combinations whose
        // source position (any integer) would reach c. For w = 1 there is a
        // single family with stride 1: exactly l slots everywhere.
        let mut slot_sources: Vec<Vec<isize>> = vec![Vec::new(); d];
        for c in 0..d {
            let c1 = (c + 1) as isize;
            if w == 1 {
                for j in 0..l as isize {
                    slot_sources[c].push(c1 - j);
                }
            } else {
                for j in 0..l as isize {
                    let p1 = c1 - j * w as isize;
                    if p1.rem_euclid(2) == 1 {
                        slot_sources[c].push(p1);
                    }
                }
                for j in 0..l as isize {
                    let p1 = c1 - j;
                    if p1.rem_euclid(2) == 0 {
                        slot_sources[c].push(p1);
                    }
                }
            }
        }
        let slots: Vec<usize> = slot_sources.iter().map(|s| s.len()).collect();
        let check_sources: Vec<Vec<usize>> = slot_sources
            .iter()
            .map(|srcs| {
                let mut v: Vec<usize> = srcs
                    .iter()
                    .filter(|&&p1| p1 >= 1 && p1 <= big_l as isize)
                    .map(|&p1| (p1 - 1) as usize)
                    .collect();
                v.sort_unstable();
                v
            })
            .collect();
        // 1-based slot sources -> keep as-is for the sampler
        Self {
            l,
            w,
            big_l,
            d,
            var_targets,
            check_sources,
            slots,
            slot_sources,
        }
    }

    /// Fraction of socket blocks at check position `c` (0-based) that carry edges.
    pub fn occupancy(&self, c: usize) -> f64 {
        self.check_sources[c].len() as f64 / self.slots[c] as f64
    }

    /// Number of variable positions feeding both `c1` and `c2` (0-based).
    pub fn shared_sources(&self, c1: usize, c2: usize) -> usize {
        let (a, b) = (&self.check_sources[c1], &self.check_sources[c2]);
        let mut n = 0;
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }
}

/// One sampled code: the static Tanner graph. Residual (decoding) state lives
/// in [`crate::peeling::ResidualGraph`].
#[derive(Debug, Clone)]
pub struct TannerGraph {
    pub spec: EnsembleSpec,
    pub coupling: Coupling,
    /// Global check ids of each variable's `l` edges; variable `v` at position
    /// `v / M`, edges at `var_checks[v*l .. (v+1)*l]` ordered by target position.
    pub var_checks: Vec<u32>,
    /// First global check id at each check position (length `D + 1`).
    pub check_base: Vec<u32>,
    /// Position of each check.
    pub check_position: Vec<u32>,
    /// Number of occupied sockets per check in the original code graph.
    pub check_static_degree: Vec<u16>,
}

impl TannerGraph {
    pub fn n_vars(&self) -> usize {
        (self.spec.big_l * self.spec.m) as usize
    }

    pub fn n_checks(&self) -> usize {
        self.check_static_degree.len()
    }

    pub fn checks_at(&self, c: usize) -> std::ops::Range<usize> {
        self.check_base[c] as usize..self.check_base[c + 1] as usize
    }

    /// Fraction of checks connected to at least one variable; `1 - this * (D
    /// positions' checks) / (M L)` is the empirical design rate.
    pub fn empirical_design_rate(&self) -> f64 {
        let nonempty = self
            .check_static_degree
            .iter()
            .filter(|&&d| d > 0)
            .count();
        1.0 - nonempty as f64 / (self.spec.big_l as f64 * self.spec.m as f64)
    }
}

/// Sample a Tanner graph from the ensemble. Deterministic in `(spec, seed)`:
/// each check position's socket permutation draws from its own ChaCha stream.
pub fn sample_graph(spec: &EnsembleSpec, seed: u64) -> Result<TannerGraph> {
    spec.validate()?;
    let coupling = spec.coupling();
    let (l, r, m) = (spec.l as usize, spec.r as usize, spec.m as usize);
    let big_l = spec.big_l as usize;
    let d = coupling.d;

    let mut check_base = Vec::with_capacity(d + 1);
    check_base.push(0u32);
    for c in 0..d {
        let n_c = coupling.slots[c] * m / r;
        check_base.push(check_base[c] + n_c as u32);
    }
    let n_checks = check_base[d] as usize;
    let mut check_position = vec![0u32; n_checks];
    for c in 0..d {
        for k in check_base[c]..check_base[c + 1] {
            check_position[k as usize] = c as u32;
        }
    }

    let n_vars = big_l * m;
    let mut var_checks = vec![u32::MAX; n_vars * l];
    let mut var_fill = vec![0u8; n_vars];
    let mut check_static_degree = vec![0u16; n_checks];

    let mut perm: Vec<u32> = Vec::new();
    for c in 0..d {
        let n_sockets = coupling.slots[c] * m;
        perm.clear();
        perm.extend(0..n_sockets as u32);
        let mut rng = stream_rng(mix(seed, 0xE45), (c + 1) as u64);
        perm.shuffle(&mut rng);
        for (slot, &src1) in coupling.slot_sources[c].iter().enumerate() {
            if src1 < 1 || src1 > big_l as isize {
                continue; // empty block: source position outside the chain
            }
            let p = (src1 - 1) as usize;
            for mm in 0..m {
                let label = perm[slot * m + mm] as usize;
                let check = check_base[c] + (label / r) as u32;
                let var = p * m + mm;
                let at = var * l + var_fill[var] as usize;
                var_checks[at] = check;
                var_fill[var] += 1;
                check_static_degree[check as usize] += 1;
            }
        }
    }
    debug_assert!(var_fill.iter().all(|&f| f as usize == l));
    debug_assert!(var_checks.iter().all(|&c| c != u32::MAX));

    Ok(TannerGraph {
        spec: *spec,
        coupling,
        var_checks,
        check_base,
        check_position,
        check_static_degree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn d_formula_plain_and_stretched() {
        let s = EnsembleSpec::plain(3, 6, 50, 6).unwrap();
        assert_eq!(s.d(), 52);
        let s = EnsembleSpec::new(3, 6, 100, 6, 2).unwrap();
        assert_eq!(s.d(), 104);
        let s = EnsembleSpec::new(3, 6, 100, 6, 4).unwrap();
        assert_eq!(s.d(), 108);
    }

    #[test]
    fn rejects_bad_divisibility() {
        // l*M = 3*5 = 15 not divisible by r = 6
        assert!(EnsembleSpec::plain(3, 6, 10, 5).is_err());
        assert!(EnsembleSpec::plain(3, 6, 10, 6).is_ok());
    }

    #[test]
    fn design_rate_values() {
        let s = EnsembleSpec::plain(3, 6, 50, 6).unwrap();
        let rate = s.design_rate().unwrap();
        assert!((rate - 0.4817832).abs() < 1e-6, "rate = {rate}");
        // tends to 1 - l/r for large L
        let s = EnsembleSpec::plain(3, 6, 100_000, 6).unwrap();
        assert!((s.design_rate().unwrap() - 0.5).abs() < 1e-4);
        // monotonically increasing in L, always in (0,1)
        let mut prev = 0.0;
        for big_l in [2u32, 5, 10, 50, 200, 1000] {
            let rate = EnsembleSpec::plain(3, 6, big_l, 6)
                .unwrap()
                .design_rate()
                .unwrap();
            assert!(rate > 0.0 && rate < 1.0);
            assert!(rate > prev);
            prev = rate;
        }
        assert!(EnsembleSpec::new(3, 6, 50, 6, 2)
            .unwrap()
            .design_rate()
            .is_err());
    }

    #[test]
    fn boundary_pmf_shapes() {
        let s = EnsembleSpec::plain(3, 6, 50, 6).unwrap();
        // interior: point mass at r
        let pmf = s.boundary_degree_pmf(25).unwrap();
        assert!((pmf[6] - 1.0).abs() < 1e-12);
        // left boundary: Binomial(6, 1/3)
        let pmf = s.boundary_degree_pmf(1).unwrap();
        let bin = binomial_pmf(6, 1.0 / 3.0);
        for k in 0..=6 {
            assert!((pmf[k] - bin[k]).abs() < 1e-12);
        }
        // right symmetry: rho_{m, L+l-u} = rho_{m,u}
        let left = s.boundary_degree_pmf(2).unwrap();
        let right = s.boundary_degree_pmf(51).unwrap();
        for k in 0..=6 {
            assert!((left[k] - right[k]).abs() < 1e-12);
        }
        assert!(s.boundary_degree_pmf(0).is_err());
        assert!(s.boundary_degree_pmf(53).is_err());
    }

    #[test]
    fn sampled_graph_structure() {
        let s = EnsembleSpec::plain(3, 6, 50, 6).unwrap();
        let g = sample_graph(&s, 1234).unwrap();
        assert_eq!(g.n_vars(), 300);
        assert_eq!(g.n_checks(), 52 * 3);
        // every variable at position 5 (1-based) has one edge to check
        // positions 5, 6, 7
        let m = s.m as usize;
        for mm in 0..m {
            let v = 4 * m + mm;
            let mut positions: Vec<u32> = (0..3)
                .map(|i| g.check_position[g.var_checks[v * 3 + i] as usize])
                .collect();
            positions.sort_unstable();
            assert_eq!(positions, vec![4, 5, 6]);
        }
        // determinism
        let g2 = sample_graph(&s, 1234).unwrap();
        assert_eq!(g.var_checks, g2.var_checks);
        let g3 = sample_graph(&s, 1235).unwrap();
        assert_ne!(g.var_checks, g3.var_checks);
    }

    #[test]
    fn stretched_graph_strides() {
        let s = EnsembleSpec::new(3, 6, 100, 6, 2).unwrap();
        let g = sample_graph(&s, 9).unwrap();
        assert_eq!(g.coupling.d, 104);
        let m = s.m as usize;
        // odd position 7 (0-based 6): targets 7, 9, 11 (1-based)
        let v = 6 * m;
        let mut pos: Vec<u32> = (0..3)
            .map(|i| g.check_position[g.var_checks[v * 3 + i] as usize])
            .collect();
        pos.sort_unstable();
        assert_eq!(pos, vec![6, 8, 10]);
        // even position 8 (0-based 7): targets 8, 9, 10
        let v = 7 * m;
        let mut pos: Vec<u32> = (0..3)
            .map(|i| g.check_position[g.var_checks[v * 3 + i] as usize])
            .collect();
        pos.sort_unstable();
        assert_eq!(pos, vec![7, 8, 9]);
    }

    #[test]
    fn static_degrees_conserve_edges() {
        let s = EnsembleSpec::plain(4, 8, 20, 8).unwrap();
        let g = sample_graph(&s, 7).unwrap();
        let total: usize = g.check_static_degree.iter().map(|&d| d as usize).sum();
        assert_eq!(total, g.n_vars() * 4);
        assert!(g.check_static_degree.iter().all(|&d| d as u32 <= s.r));
    }

    #[test]
    fn empirical_design_rate_tracks_closed_form() {
        let s = EnsembleSpec::plain(3, 6, 50, 600).unwrap();
        let rate_cf = s.design_rate().unwrap();
        let mut acc = 0.0;
        for seed in 0..20 {
            acc += sample_graph(&s, seed).unwrap().empirical_design_rate();
        }
        let rate_emp = acc / 20.0;
        assert!(
            (rate_emp - rate_cf).abs() < 2e-3,
            "empirical {rate_emp} vs closed form {rate_cf}"
        );
    }
}
