//! Windowed scan statistic over candidate change points.
//!
//! For a window of the L most recent observations and a candidate split t,
//! the statistic R(t, n) is twice the number of directed k-NN edges joining
//! the two sides of the split. Its permutation expectation and variance are
//! closed forms in the split size x = L - (n - t), so standardizing is
//! cheap; [`zmax`] scans every admissible split in one O(L + edges) sweep
//! using a difference array of edge spans.

use crate::nngraph::{GraphError, GraphFunctionals, WindowGraph};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("scan offsets must satisfy 0 < n0 < n1 <= L - n0, got n0={n0}, n1={n1}, L={l}")]
    BadOffsets { n0: usize, n1: usize, l: usize },
    #[error("k must satisfy 1 <= k < L, got k={k}, L={l}")]
    BadK { k: usize, l: usize },
    #[error("group size x={x} outside [{lo}, {hi}] for L={l}")]
    XOutOfRange { x: usize, lo: usize, hi: usize, l: usize },
    #[error("window length {l} below the minimum {min} for this operation")]
    WindowTooShort { l: usize, min: usize },
    #[error("split t={t} out of the admissible range [{lo}, {hi}]")]
    TOutOfRange { t: u64, lo: u64, hi: u64 },
    #[error("config window length {cfg} does not match graph size {graph}")]
    LengthMismatch { cfg: usize, graph: usize },
    #[error("config k={cfg} does not match graph k={graph}")]
    KMismatch { cfg: usize, graph: usize },
    #[error("every admissible split has zero permutation variance")]
    AllDegenerate,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Scan geometry: neighbor count, window length, and the offsets bounding
/// how close a candidate split may sit to either window edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanConfig {
    pub k: usize,
    pub l: usize,
    /// Minimum offset of the split from the new edge of the window.
    pub n0: usize,
    /// Maximum offset; splits range over t in [n - n1, n - n0].
    pub n1: usize,
}

impl ScanConfig {
    pub fn new(k: usize, l: usize, n0: usize, n1: usize) -> Result<Self, ScanError> {
        if n0 == 0 || n0 >= n1 || n1 + n0 > l {
            return Err(ScanError::BadOffsets { n0, n1, l });
        }
        if k == 0 || k >= l {
            return Err(ScanError::BadK { k, l });
        }
        Ok(ScanConfig { k, l, n0, n1 })
    }
}

/// One standardized scan evaluation at split t of the window ending at n.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanValue {
    /// Candidate change index: last observation of the older group.
    pub t: u64,
    /// Newest observation index in the window.
    pub n: u64,
    /// Realized statistic (twice the directed cross-edge count).
    pub r: u64,
    pub exp_r: f64,
    pub var_r: f64,
    /// Standardized, negated score; larger means stronger evidence.
    pub z: f64,
}

/// Result of maximizing Z over the admissible splits of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct ZmaxOutcome {
    pub max_z: f64,
    /// Argmax split; the smallest t on exact ties.
    pub argmax_t: u64,
    /// All non-degenerate evaluations, ascending in t.
    pub values: Vec<ScanValue>,
}

/// Which variance enters the standardization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMode {
    /// Use the window's own observed mutual/shared sums (given-graph form).
    Conditional,
    /// Use externally estimated per-node rates, dividing the stored counts
    /// by L; numerically identical to Conditional when both come from the
    /// same window, but the caller may supply historical averages instead.
    Unconditional,
}

/// Permutation expectation of R at group size x: 4k x (L - x) / (L - 1).
pub fn e_r(k: usize, l: usize, x: usize) -> Result<f64, ScanError> {
    if l < 2 {
        return Err(ScanError::WindowTooShort { l, min: 2 });
    }
    if x < 1 || x > l - 1 {
        return Err(ScanError::XOutOfRange { x, lo: 1, hi: l - 1, l });
    }
    let (k, l, x) = (k as f64, l as f64, x as f64);
    Ok(4.0 * k * x * (l - x) / (l - 1.0))
}

/// Permutation variance of R from per-node mutual and shared rates p and q.
///
/// This is the closed form shared by both variance modes; feeding the
/// observed counts divided by L reproduces the given-graph variance
/// exactly (the two published forms agree algebraically).
pub fn var_r_pq(k: usize, l: usize, x: usize, p: f64, q: f64) -> Result<f64, ScanError> {
    if l < 4 {
        return Err(ScanError::WindowTooShort { l, min: 4 });
    }
    if x < 2 || x > l - 2 {
        return Err(ScanError::XOutOfRange { x, lo: 2, hi: l - 2, l });
    }
    let kf = k as f64;
    let lf = l as f64;
    let xf = x as f64;
    let lead = 4.0 * xf * (lf - xf) / (lf - 1.0);
    let pair = 4.0 * (xf - 1.0) * (lf - xf - 1.0) / ((lf - 2.0) * (lf - 3.0));
    Ok(lead * (pair * (p - q + (lf - 3.0) * kf * kf / (lf - 1.0)) + (q + kf - kf * kf)))
}

/// Permutation variance of R at group size x from a window's motif counts.
pub fn var_r(
    f: &GraphFunctionals,
    l: usize,
    x: usize,
    mode: VarianceMode,
) -> Result<f64, ScanError> {
    // Both modes divide the stored counts by L; they are separated so call
    // sites document whether the counts are this window's own or averages.
    let _ = mode;
    let p = f.mutual_sum as f64 / f.l as f64;
    let q = f.shared_sum as f64 / f.l as f64;
    var_r_pq(f.k, l, x, p, q)
}

/// Realized statistic at split t: twice the directed edges between window
/// members with index <= t and those after t.
pub fn r_stat(g: &WindowGraph, t: u64, cfg: &ScanConfig) -> Result<u64, ScanError> {
    check_config(g, cfg)?;
    let n = g.newest_index().unwrap();
    let (lo, hi) = (n - cfg.n1 as u64, n - cfg.n0 as u64);
    if t < lo || t > hi {
        return Err(ScanError::TOutOfRange { t, lo, hi });
    }
    let split = (t - g.oldest_index().unwrap() + 1) as usize;
    let mut crossings = 0u64;
    for (pi, pj) in g.edge_positions()? {
        if (pi < split) != (pj < split) {
            crossings += 1;
        }
    }
    Ok(2 * crossings)
}

fn check_config(g: &WindowGraph, cfg: &ScanConfig) -> Result<(), ScanError> {
    if cfg.l != g.len() {
        return Err(ScanError::LengthMismatch { cfg: cfg.l, graph: g.len() });
    }
    // The crossing counts come from the graph's own edges, so a config
    // requesting a different k would silently mix moments and counts.
    if cfg.k != g.k() {
        return Err(ScanError::KMismatch { cfg: cfg.k, graph: g.k() });
    }
    Ok(())
}

/// Scan all admissible splits of the current window and return the largest
/// standardized score. Splits where the variance formula is undefined or
/// the variance vanishes are skipped; if every split is skipped the window
/// cannot be scored and an error is returned.
pub fn zmax(g: &WindowGraph, cfg: &ScanConfig) -> Result<ZmaxOutcome, ScanError> {
    zmax_with(g, cfg, VarianceMode::Conditional, None)
}

/// As [`zmax`], with the variance sourced either from the window itself or
/// from caller-supplied (p, q) rates.
pub fn zmax_with(
    g: &WindowGraph,
    cfg: &ScanConfig,
    mode: VarianceMode,
    rates: Option<(f64, f64)>,
) -> Result<ZmaxOutcome, ScanError> {
    check_config(g, cfg)?;
    let l = cfg.l;
    let n = g.newest_index().unwrap();
    let oldest = g.oldest_index().unwrap();

    // cross[x] = directed edges spanning the cut after window position x-1,
    // accumulated from each edge's position interval in one pass.
    let mut diff = vec![0i64; l + 1];
    for (pi, pj) in g.edge_positions()? {
        let (lo, hi) = if pi < pj { (pi, pj) } else { (pj, pi) };
        diff[lo + 1] += 1;
        diff[hi + 1] -= 1;
    }

    let (p, q) = match (mode, rates) {
        (_, Some(pq)) => pq,
        _ => {
            let f = g.pair_counts(cfg.k)?;
            (f.0 as f64 / l as f64, f.1 as f64 / l as f64)
        }
    };

    let x_lo = l - cfg.n1;
    let x_hi = l - cfg.n0;
    let mut values = Vec::with_capacity(x_hi - x_lo + 1);
    let mut best: Option<(f64, u64)> = None;
    let mut cross = 0i64;
    for x in 1..=x_hi {
        cross += diff[x];
        if x < x_lo || x < 2 || x > l - 2 {
            continue;
        }
        let var = var_r_pq(cfg.k, l, x, p, q)?;
        if var <= 0.0 {
            continue;
        }
        let r = 2 * cross as u64;
        let exp = e_r(cfg.k, l, x)?;
        let z = -(r as f64 - exp) / var.sqrt();
        let t = oldest + x as u64 - 1;
        values.push(ScanValue { t, n, r, exp_r: exp, var_r: var, z });
        // Strict comparison keeps the earliest split on ties.
        if best.map_or(true, |(bz, _)| z > bz) {
            best = Some((z, t));
        }
    }
    let (max_z, argmax_t) = best.ok_or(ScanError::AllDegenerate)?;
    Ok(ZmaxOutcome { max_z, argmax_t, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DistanceSpec, Observation};
    use crate::twosample::{Group, LabeledSample};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_graph(l: usize, k: usize, seed: u64) -> WindowGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = WindowGraph::sliding(l, k, DistanceSpec::Euclidean).unwrap();
        for i in 0..(l as u64 + 7) {
            let v: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            g.push(Observation::vector(i, v)).unwrap();
        }
        g
    }

    #[test]
    fn expectation_formula_values_and_symmetry() {
        assert!((e_r(1, 200, 100).unwrap() - 40000.0 / 199.0).abs() < 1e-12);
        for x in 1..12 {
            assert_eq!(e_r(2, 12, x).unwrap(), e_r(2, 12, 12 - x).unwrap());
        }
        assert!(matches!(e_r(1, 12, 0), Err(ScanError::XOutOfRange { .. })));
        assert!(matches!(e_r(1, 12, 12), Err(ScanError::XOutOfRange { .. })));
    }

    #[test]
    fn variance_symmetry_and_domain() {
        let g = random_graph(12, 2, 5);
        let f = g.functionals().unwrap();
        for x in 2..=10 {
            let a = var_r(&f, 12, x, VarianceMode::Conditional).unwrap();
            let b = var_r(&f, 12, 12 - x, VarianceMode::Conditional).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert!(a >= 0.0);
        }
        assert!(matches!(
            var_r(&f, 12, 1, VarianceMode::Conditional),
            Err(ScanError::XOutOfRange { .. })
        ));
    }

    #[test]
    fn variance_modes_agree_on_the_same_window() {
        let g = random_graph(20, 3, 11);
        let f = g.functionals().unwrap();
        for x in 2..=18 {
            let a = var_r(&f, 20, x, VarianceMode::Conditional).unwrap();
            let b = var_r(&f, 20, x, VarianceMode::Unconditional).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn r_stat_matches_two_sample_statistic() {
        let g = random_graph(14, 2, 23);
        let cfg = ScanConfig::new(2, 14, 1, 13).unwrap();
        let n = g.newest_index().unwrap();
        let oldest = g.oldest_index().unwrap();
        for t in (n - 13)..=(n - 1) {
            let x = (t - oldest + 1) as usize;
            let labels: Vec<Group> = (0..14)
                .map(|p| if p < x { Group::First } else { Group::Second })
                .collect();
            let s = LabeledSample::new(&g, labels).unwrap();
            assert_eq!(r_stat(&g, t, &cfg).unwrap(), s.cross_count().unwrap());
        }
    }

    #[test]
    fn complete_graph_statistic() {
        let g = random_graph(8, 7, 2);
        let cfg = ScanConfig::new(7, 8, 1, 7).unwrap();
        let n = g.newest_index().unwrap();
        for t in (n - 7)..=(n - 1) {
            let x = (t - g.oldest_index().unwrap() + 1) as u64;
            assert_eq!(r_stat(&g, t, &cfg).unwrap(), 4 * x * (8 - x));
        }
    }

    #[test]
    fn sweep_agrees_with_per_split_recomputation() {
        for seed in 0..20 {
            let g = random_graph(16, 2, seed);
            let cfg = ScanConfig::new(2, 16, 2, 14).unwrap();
            let out = zmax(&g, &cfg).unwrap();
            assert_eq!(out.values.len(), 13);
            for v in &out.values {
                assert_eq!(v.r, r_stat(&g, v.t, &cfg).unwrap());
                let x = (v.t - g.oldest_index().unwrap() + 1) as usize;
                assert_eq!(v.exp_r, e_r(2, 16, x).unwrap());
            }
            let best = out
                .values
                .iter()
                .cloned()
                .reduce(|a, b| if b.z > a.z { b } else { a })
                .unwrap();
            assert_eq!(out.max_z, best.z);
            assert_eq!(out.argmax_t, best.t);
        }
    }

    #[test]
    fn tie_break_prefers_smallest_t() {
        // A window symmetric around its center produces mirrored Z values;
        // the argmax must sit on the earlier side.
        let pts = [0.0, 1.0, 2.0, 10.0, 11.0, 12.0];
        let mut g = WindowGraph::sliding(6, 1, DistanceSpec::Euclidean).unwrap();
        for (i, &x) in pts.iter().enumerate() {
            g.push(Observation::vector(i as u64, vec![x])).unwrap();
        }
        let cfg = ScanConfig::new(1, 6, 2, 4).unwrap();
        let out = zmax(&g, &cfg).unwrap();
        let zs: Vec<f64> = out.values.iter().map(|v| v.z).collect();
        assert!((zs[0] - zs[2]).abs() > 0.0 || out.argmax_t == out.values[0].t);
        let top = out.values.iter().filter(|v| v.z == out.max_z).count();
        if top > 1 {
            assert_eq!(
                out.argmax_t,
                out.values.iter().find(|v| v.z == out.max_z).unwrap().t
            );
        }
    }

    #[test]
    fn strong_shift_is_located() {
        // Mean shift of 3 sigma at the window midpoint: the argmax should
        // land within a few positions of the true split in most runs.
        let mut hits = 0;
        let runs = 40;
        for seed in 0..runs {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let l = 60;
            let mut g = WindowGraph::sliding(l, 3, DistanceSpec::Euclidean).unwrap();
            for i in 0..l as u64 {
                let shift = if i >= 30 { 3.0 } else { 0.0 };
                let v: Vec<f64> = (0..5)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) + shift)
                    .collect();
                g.push(Observation::vector(i, v)).unwrap();
            }
            let cfg = ScanConfig::new(3, l, 3, l - 3).unwrap();
            let out = zmax(&g, &cfg).unwrap();
            if (out.argmax_t as i64 - 29).abs() <= 5 {
                hits += 1;
            }
        }
        assert!(hits >= runs * 8 / 10, "hits = {hits}/{runs}");
    }

    #[test]
    fn all_degenerate_reported() {
        // k = L - 1 gives a complete graph: every split has R identically
        // 4x(L-x), so the permutation variance is zero everywhere.
        let g = random_graph(8, 7, 3);
        let cfg = ScanConfig::new(7, 8, 2, 6).unwrap();
        assert!(matches!(zmax(&g, &cfg), Err(ScanError::AllDegenerate)));
    }
}
