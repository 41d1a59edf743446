//! Analytic average-run-length machinery and the threshold solver.
//!
//! The expected time until the scan statistic first crosses a threshold b
//! under no change has a closed-form approximation driven by two slope
//! functions g1 and g2 of the limiting Gaussian field, an overshoot
//! correction nu, and, at finite window lengths, a skewness correction S
//! built from the exact third moment of the statistic. The third moment is
//! a polynomial in seven motif expectations of the k-NN graph, estimated
//! from change-free history. Everything here is a pure function of those
//! estimates, so calibration is deterministic.

use crate::nngraph::GraphFunctionals;
use crate::normal::{cap_phi, phi};
use crate::scan::{e_r, var_r_pq, ScanError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArlError {
    #[error("u must lie strictly inside (0,1), got {0}")]
    UOutOfRange(f64),
    #[error("sigma^2(u) must be positive at u={u}, got {value}")]
    DegenerateSigma { u: f64, value: f64 },
    #[error("nu requires x > 0, got {0}")]
    NuDomain(f64),
    #[error("variance is not positive at x={x} (value {value}); skewness undefined")]
    ZeroVariance { x: usize, value: f64 },
    #[error("offsets must satisfy 0 < n0 < n1 <= L - n0, got n0={n0}, n1={n1}, L={l}")]
    BadOffsets { n0: usize, n1: usize, l: usize },
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("skewness correction undefined at every grid point (no fallback anchor)")]
    AllOutOfDomain,
    #[error(
        "target run length {target} outside the bracket: arl(1)={lo}, arl(10)={hi}"
    )]
    BracketFailure { target: f64, lo: f64, hi: f64 },
    #[error("target run length must be at least 100, got {0}")]
    TargetTooSmall(f64),
    #[error(transparent)]
    Scan(#[from] ScanError),
}

/// Historical estimates of the graph functionals entering the run-length
/// formulas. The pair rates are per-node (counts divided by L); the
/// three-way entries are plain per-window averages, which is what the
/// third-moment formula consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalEstimates {
    pub k: usize,
    pub l: usize,
    /// Mean mutual-neighbor count per node.
    pub pkl: f64,
    /// Mean shared-neighbor count per node.
    pub qkl: f64,
    /// Rank-resolved mutual rate: mutual pairs whose forward edge has rank
    /// exactly k, summed over the back-edge rank, per node.
    pub pkl_k: f64,
    /// Rank-resolved shared rate, same normalization.
    pub qkl_k: f64,
    /// Per-window averages of the five three-way configuration counts.
    pub motif3: [f64; 5],
    /// Number of windows averaged so far.
    pub windows: u64,
}

impl FunctionalEstimates {
    /// Start an estimate from a single window's counts.
    pub fn from_window(f: &GraphFunctionals) -> Self {
        let lf = f.l as f64;
        FunctionalEstimates {
            k: f.k,
            l: f.l,
            pkl: f.mutual_sum as f64 / lf,
            qkl: f.shared_sum as f64 / lf,
            pkl_k: f.mutual_rank_total() as f64 / lf,
            qkl_k: f.shared_rank_total() as f64 / lf,
            motif3: f.motif3.map(|c| c as f64),
            windows: 1,
        }
    }

    /// Fold one more window into the running means.
    pub fn update(&mut self, f: &GraphFunctionals) {
        debug_assert_eq!(self.k, f.k);
        debug_assert_eq!(self.l, f.l);
        let lf = f.l as f64;
        self.windows += 1;
        let w = 1.0 / self.windows as f64;
        let fold = |mean: &mut f64, x: f64| *mean += (x - *mean) * w;
        fold(&mut self.pkl, f.mutual_sum as f64 / lf);
        fold(&mut self.qkl, f.shared_sum as f64 / lf);
        fold(&mut self.pkl_k, f.mutual_rank_total() as f64 / lf);
        fold(&mut self.qkl_k, f.shared_rank_total() as f64 / lf);
        for (m, &c) in self.motif3.iter_mut().zip(f.motif3.iter()) {
            fold(m, c as f64);
        }
    }
}

/// Variance of the limiting field's increment process at relative split u.
fn sigma_sq(u: f64, k: f64, p: f64, q: f64) -> f64 {
    4.0 * u * (1.0 - u) * (4.0 * u * (1.0 - u) * (k + p) + (1.0 - 2.0 * u).powi(2) * (q - k * k + k))
}

fn check_u(u: f64) -> Result<(), ArlError> {
    if !(u > 0.0 && u < 1.0) {
        return Err(ArlError::UOutOfRange(u));
    }
    Ok(())
}

/// Slope of the field correlation in the split direction.
pub fn g1(u: f64, f: &FunctionalEstimates) -> Result<f64, ArlError> {
    check_u(u)?;
    let k = f.k as f64;
    let s2 = sigma_sq(u, k, f.pkl, f.qkl);
    if s2 <= 0.0 {
        return Err(ArlError::DegenerateSigma { u, value: s2 });
    }
    let num = 16.0 * u * (1.0 - u) * (k + f.pkl)
        + 2.0 * (1.0 - 2.0 * u).powi(2) * (f.qkl - k * k + k);
    Ok(num / s2)
}

/// Slope of the field correlation in the time direction.
pub fn g2(u: f64, f: &FunctionalEstimates) -> Result<f64, ArlError> {
    check_u(u)?;
    let k = f.k as f64;
    let s2 = sigma_sq(u, k, f.pkl, f.qkl);
    if s2 <= 0.0 {
        return Err(ArlError::DegenerateSigma { u, value: s2 });
    }
    let u1 = u * (1.0 - u);
    let num = 16.0 * u1 * u1 * (f.pkl + f.qkl + k * k + 2.0 * f.pkl_k - 2.0 * f.qkl_k)
        + 4.0 * u1 * (2.0 * f.qkl_k - 3.0 * f.qkl + k * k + k)
        + 2.0 * (f.qkl - k * k + k);
    Ok(num / s2)
}

/// Overshoot correction for a discrete-time boundary crossing.
pub fn nu(x: f64) -> Result<f64, ArlError> {
    if !(x > 0.0) {
        return Err(ArlError::NuDomain(x));
    }
    let h = x / 2.0;
    Ok(((2.0 / x) * (cap_phi(h) - 0.5)) / (h * cap_phi(h) + phi(h)))
}

/// Exact third raw moment of the scan statistic at group size x, as a
/// polynomial in the estimated graph functionals.
pub fn third_moment_r(f: &FunctionalEstimates, l: usize, x: usize) -> Result<f64, ArlError> {
    if l < 6 || x < 3 || x + 3 > l {
        return Err(ScanError::XOutOfRange {
            x,
            lo: 3,
            hi: l.saturating_sub(3),
            l,
        }
        .into());
    }
    let k = f.k as f64;
    let lf = l as f64;
    let xf = x as f64;
    let yf = lf - xf;

    // Split-assignment probabilities of one, two, and three cross pairs;
    // each is a ratio of falling-factorial products kept in factored form.
    let r1 = 2.0 * xf * yf / (lf * (lf - 1.0));
    let r2 = 4.0 * xf * (xf - 1.0) * yf * (yf - 1.0) / (lf * (lf - 1.0) * (lf - 2.0) * (lf - 3.0));
    let r3 = xf * yf * ((xf - 1.0) * (xf - 2.0) + (yf - 1.0) * (yf - 2.0))
        / (lf * (lf - 1.0) * (lf - 2.0) * (lf - 3.0));
    let r4 = 8.0 * (xf * (xf - 1.0) * (xf - 2.0) / (lf * (lf - 1.0) * (lf - 2.0)))
        * (yf * (yf - 1.0) * (yf - 2.0) / ((lf - 3.0) * (lf - 4.0) * (lf - 5.0)));

    let [m_in3, m_mutual_in, m_in_in, m_cycle, m_outpair] = f.motif3;

    Ok(8.0 * k.powi(3) * lf.powi(3) * r4
        + 12.0 * k * k * lf * lf * (r2 + 3.0 * k * (r2 - 2.0 * r4))
        + 4.0
            * k
            * lf
            * (3.0 * r2 - r1 + 2.0 * r3 - 4.0 * r4
                + 3.0 * k * (3.0 * r1 - 2.0 * r2 - 4.0 * r3 - 4.0 * r4)
                + 8.0 * k * k * (r3 - 3.0 * r2 + 5.0 * r4))
        + 24.0
            * f.pkl
            * (k * lf * lf * r4 + k * lf * (r1 + r2 - 2.0 * r3 - 4.0 * r4)
                + 2.0 * lf * (2.0 * r3 - r1 + 2.0 * r4))
        + 12.0
            * f.qkl
            * (k * lf * lf * (r2 - 2.0 * r4)
                + k * lf * (2.0 * r3 - 5.0 * r2 + 8.0 * r4)
                + lf * (r1 + r2 - 2.0 * r3 - 4.0 * r4))
        + 4.0 * (2.0 * r3 - 3.0 * r2 + 4.0 * r4) * m_in3
        + 24.0 * (r1 + r2 - 2.0 * r3 - 4.0 * r4) * m_mutual_in
        + 24.0 * (2.0 * r4 - r2) * m_in_in
        - 16.0 * r4 * (m_cycle + 3.0 * m_outpair))
}

/// Skewness of the standardized scan score at group size x. The score is
/// the negated standardization of R, so the sign flips relative to R's own
/// third central moment.
pub fn gamma(f: &FunctionalEstimates, l: usize, x: usize) -> Result<f64, ArlError> {
    let e = e_r(f.k, l, x)?;
    let v = var_r_pq(f.k, l, x, f.pkl, f.qkl)?;
    if v <= 0.0 {
        return Err(ArlError::ZeroVariance { x, value: v });
    }
    let e3 = third_moment_r(f, l, x)?;
    Ok((e.powi(3) + 3.0 * e * v - e3) / v.powf(1.5))
}

/// Finite-sample correction to the Gaussian marginal at threshold b for a
/// split with score skewness `gamma`. `None` when the underlying
/// change-of-measure equation has no root (1 + 2 gamma b <= 0), in which
/// case the caller falls back to neighboring grid points.
pub fn s_correction(b: f64, gamma: f64) -> Option<f64> {
    if gamma.abs() < 1e-12 {
        return Some(1.0);
    }
    let disc = 1.0 + 2.0 * gamma * b;
    if disc <= 0.0 {
        return None;
    }
    let theta = (disc.sqrt() - 1.0) / gamma;
    Some(((b - theta).powi(2) / 2.0 + gamma * theta.powi(3) / 6.0).exp() / (1.0 + gamma * theta).sqrt())
}

/// Inputs to one run-length evaluation.
#[derive(Debug, Clone)]
pub struct ArlRequest<'f> {
    pub b: f64,
    pub l: usize,
    pub n0: usize,
    pub n1: usize,
    pub functionals: &'f FunctionalEstimates,
    pub skewness_corrected: bool,
}

fn check_offsets(l: usize, n0: usize, n1: usize) -> Result<(), ArlError> {
    if n0 == 0 || n0 >= n1 || n1 + n0 > l {
        return Err(ArlError::BadOffsets { n0, n1, l });
    }
    Ok(())
}

/// Expected run length at threshold b: the boundary-crossing integral
/// discretized over the integer split offsets the statistic actually
/// takes, with optional per-offset skewness correction.
pub fn arl(req: &ArlRequest) -> Result<f64, ArlError> {
    check_offsets(req.l, req.n0, req.n1)?;
    if !(req.b > 0.0) {
        return Err(ArlError::BadThreshold(req.b));
    }
    let f = req.functionals;
    let lf = req.l as f64;
    let b = req.b;

    // Per-offset factors g1 g2 nu(.) nu(.), before the S correction.
    let offsets: Vec<usize> = (req.n0..=req.n1).collect();
    let mut base = Vec::with_capacity(offsets.len());
    for &j in &offsets {
        let u = j as f64 / lf;
        let h1 = g1(u, f)?;
        let h2 = g2(u, f)?;
        base.push(h1 * h2 * nu((2.0 * b * b * h1 / lf).sqrt())? * nu((2.0 * b * b * h2 / lf).sqrt())?);
    }

    let s = if req.skewness_corrected {
        resolve_s_grid(req, &offsets)?
    } else {
        vec![1.0; offsets.len()]
    };

    let sum: f64 = base.iter().zip(&s).map(|(v, s)| v * s).sum();
    let integral = sum / lf;
    Ok(lf * (2.0 * std::f64::consts::PI).sqrt() * (b * b / 2.0).exp() / (b.powi(3) * integral))
}

/// Evaluate S at every offset, patching undefined points from the nearest
/// defined ones: linear in log S through the two nearest anchors, or a
/// plain copy when only one anchor exists.
fn resolve_s_grid(req: &ArlRequest, offsets: &[usize]) -> Result<Vec<f64>, ArlError> {
    let f = req.functionals;
    let mut log_s: Vec<Option<f64>> = Vec::with_capacity(offsets.len());
    for &j in offsets {
        // The skewness at offset j belongs to group size x = L - j; gamma
        // needs 3 <= x <= L-3, outside of which the point is treated like
        // an S domain failure and patched from its neighbors.
        let x = req.l - j;
        let value = if x >= 3 && x + 3 <= req.l {
            gamma(f, req.l, x)
                .ok()
                .and_then(|g| s_correction(req.b, g))
                .map(|s| s.ln())
        } else {
            None
        };
        log_s.push(value);
    }

    let anchors: Vec<usize> = (0..log_s.len()).filter(|&i| log_s[i].is_some()).collect();
    if anchors.is_empty() {
        return Err(ArlError::AllOutOfDomain);
    }
    let mut out = Vec::with_capacity(log_s.len());
    for i in 0..log_s.len() {
        let v = match log_s[i] {
            Some(v) => v,
            None => {
                // Two nearest defined grid points, then the line through
                // them evaluated at i; with a single anchor, its value.
                let mut sorted = anchors.clone();
                sorted.sort_by_key(|&a| (a.abs_diff(i), a));
                let a = sorted[0];
                if let Some(&b2) = sorted.get(1) {
                    let (ya, yb) = (log_s[a].unwrap(), log_s[b2].unwrap());
                    ya + (yb - ya) * (i as f64 - a as f64) / (b2 as f64 - a as f64)
                } else {
                    log_s[a].unwrap()
                }
            }
        };
        out.push(v.exp());
    }
    Ok(out)
}

/// Smallest threshold whose run length reaches `target`, by bisection over
/// b in [1, 10] to a relative run-length error of 1e-6.
pub fn solve_threshold(target: f64, template: &ArlRequest) -> Result<f64, ArlError> {
    if target < 100.0 {
        return Err(ArlError::TargetTooSmall(target));
    }
    let at = |b: f64| -> Result<f64, ArlError> {
        let mut req = template.clone();
        req.b = b;
        arl(&req)
    };
    let (mut lo, mut hi) = (1.0f64, 10.0f64);
    let (arl_lo, arl_hi) = (at(lo)?, at(hi)?);
    if target < arl_lo || target > arl_hi {
        return Err(ArlError::BracketFailure {
            target,
            lo: arl_lo,
            hi: arl_hi,
        });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let value = at(mid)?;
        if ((value - target) / target).abs() <= 1e-6 {
            return Ok(mid);
        }
        if value < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}
