//! Simulation lab: stream generators, Monte Carlo threshold calibration,
//! detection-delay and failure-rate experiments, a Hotelling T-squared
//! baseline, k sweeps, and the canned experiment presets behind the CLI.
//!
//! Every experiment is embarrassingly parallel across repetitions. Each
//! repetition derives its own counter-based RNG stream from the spec seed,
//! so results are bit-identical regardless of scheduling and any single
//! repetition can be replayed in isolation.

use crate::arl::{solve_threshold, ArlError, ArlRequest, FunctionalEstimates};
use crate::data::{DistanceSpec, Observation};
use crate::detect::{
    step, warmup, DetectError, DetectorConfig, StoppingRule, ThresholdSpec,
};
use crate::nngraph::{GraphError, WindowGraph};
use crate::scan::{zmax_with, ScanConfig, ScanError, VarianceMode};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// Abrupt mean shift in a Gaussian stream.
    GaussianShift,
    /// Abrupt shift of the underlying Gaussian mean, observed through a
    /// coordinatewise exponential.
    LognormalShift,
    /// Gaussian stream whose mean drifts linearly, reaching the full shift
    /// after `length` observations; length 1 is exactly the abrupt shift.
    GradualShift { length: u64 },
}

#[derive(Debug, Clone)]
pub struct SimSpec {
    pub generator: Generator,
    pub d: usize,
    /// L2 distance between the pre- and post-change means.
    pub delta: f64,
    /// Index of the first observation drawn under the new regime.
    pub tau: u64,
    /// Largest observation index a run may reach.
    pub horizon: u64,
    pub reps: u64,
    pub seed: u64,
    pub detector: DetectorConfig,
    /// A detection counts as successful only within this many observations
    /// of the change.
    pub success_window: u64,
}

impl SimSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.delta < 0.0 {
            return Err(SimError::NegativeDelta { delta: self.delta });
        }
        if self.tau <= self.detector.n_history as u64 {
            return Err(SimError::ChangeInsideHistory {
                tau: self.tau,
                n_history: self.detector.n_history,
            });
        }
        if self.horizon <= self.tau {
            return Err(SimError::HorizonBeforeChange {
                horizon: self.horizon,
                tau: self.tau,
            });
        }
        if self.reps == 0 {
            return Err(SimError::NoReps);
        }
        if let Generator::GradualShift { length: 0 } = self.generator {
            return Err(SimError::ZeroGradualLength);
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("delta must be nonnegative, got {delta}")]
    NegativeDelta { delta: f64 },
    #[error("change index {tau} must lie beyond the history length {n_history}")]
    ChangeInsideHistory { tau: u64, n_history: usize },
    #[error("horizon {horizon} must exceed the change index {tau}")]
    HorizonBeforeChange { horizon: u64, tau: u64 },
    #[error("at least one repetition is required")]
    NoReps,
    #[error("gradual change length must be at least 1")]
    ZeroGradualLength,
    #[error("calibration needs at least {min} repetitions, got {reps}")]
    TooFewReps { reps: u64, min: u64 },
    #[error("target probability {alpha} cannot be resolved from {reps} repetitions")]
    QuantileBracket { alpha: f64, reps: u64 },
    #[error("experiments need a fixed detection threshold; calibrate first")]
    ThresholdNotFixed,
    #[error("dimension {d} exceeds the pooled covariance budget of window {l} (needs d <= L - 2)")]
    NotApplicable { d: usize, l: usize },
    #[error("functional estimation needs at least L={l} observations, got {points}")]
    ShortFunctionalStream { points: usize, l: usize },
    #[error("unknown preset {0:?}; expected table1|table2|table3|fig1|fig5|fig7")]
    UnknownPreset(String),
    #[error("unknown scale {0:?}; expected desk|paper")]
    UnknownScale(String),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Scan(#[from] ScanError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Arl(#[from] ArlError),
}

/// Lazy observation source for one repetition. The change enters as a
/// deterministic mean offset on top of the stream's own draws, so the null
/// stream and the pre-change segment of a shifted stream coincide draw for
/// draw under the same seed.
struct StreamGen {
    rng: ChaCha8Rng,
    d: usize,
    shift_per_coord: f64,
    tau: Option<u64>,
    gradual_len: u64,
    lognormal: bool,
    next_index: u64,
}

impl StreamGen {
    fn for_rep(spec: &SimSpec, rep: u64) -> Self {
        let mut g = Self::null_for_rep(spec, rep);
        g.tau = Some(spec.tau);
        g
    }

    fn null_for_rep(spec: &SimSpec, rep: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(rep);
        let (lognormal, gradual_len) = match spec.generator {
            Generator::GaussianShift => (false, 1),
            Generator::LognormalShift => (true, 1),
            Generator::GradualShift { length } => (false, length),
        };
        StreamGen {
            rng,
            d: spec.d,
            // Spread the shift evenly so its L2 norm is exactly delta.
            shift_per_coord: spec.delta / (spec.d as f64).sqrt(),
            tau: None,
            gradual_len,
            lognormal,
            next_index: 1,
        }
    }

    fn next(&mut self) -> Observation {
        let n = self.next_index;
        self.next_index += 1;
        let frac = match self.tau {
            Some(tau) if n >= tau => {
                let done = n - tau + 1;
                if done >= self.gradual_len {
                    1.0
                } else {
                    done as f64 / self.gradual_len as f64
                }
            }
            _ => 0.0,
        };
        let shift = frac * self.shift_per_coord;
        let v: Vec<f64> = (0..self.d)
            .map(|_| {
                let y = self.rng.sample::<f64, _>(StandardNormal) + shift;
                if self.lognormal {
                    y.exp()
                } else {
                    y
                }
            })
            .collect();
        Observation::vector(n, v)
    }
}

/// Materialize repetition `rep` of the spec's stream, indices 1..=horizon.
pub fn generate(spec: &SimSpec, rep: u64) -> Result<Vec<Observation>, SimError> {
    spec.validate()?;
    let mut g = StreamGen::for_rep(spec, rep);
    Ok((0..spec.horizon).map(|_| g.next()).collect())
}

/// How one repetition ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    /// Detected within the success window after the change.
    Success,
    /// Stopped before the change (failure I).
    EarlyStop,
    /// Did not detect within the success window (failure II).
    Miss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: u64,
    /// Absolute index of the first threshold crossing, if any was seen
    /// before the repetition was cut off.
    pub detected_at: Option<u64>,
    pub outcome: Outcome,
    /// Detection lag behind the change, for successful repetitions.
    pub lag: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    /// Mean detection lag over successful repetitions; absent if none.
    pub edd: Option<f64>,
    /// Fraction stopping before the change.
    pub failure_i: f64,
    /// Fraction failing to detect within the success window.
    pub failure_ii: f64,
    /// Fraction of successful detections.
    pub power: f64,
    pub reps: u64,
    pub records: Vec<RepRecord>,
}

fn summarize(records: Vec<RepRecord>) -> ExperimentResult {
    let reps = records.len() as u64;
    let mut lags = 0u64;
    let (mut ok, mut early, mut miss) = (0u64, 0u64, 0u64);
    for r in &records {
        match r.outcome {
            Outcome::Success => {
                ok += 1;
                lags += r.lag.unwrap();
            }
            Outcome::EarlyStop => early += 1,
            Outcome::Miss => miss += 1,
        }
    }
    ExperimentResult {
        edd: (ok > 0).then(|| lags as f64 / ok as f64),
        failure_i: early as f64 / reps as f64,
        failure_ii: miss as f64 / reps as f64,
        power: ok as f64 / reps as f64,
        reps,
        records,
    }
}

fn classify(detected_at: Option<u64>, tau: u64, window: u64) -> (Outcome, Option<u64>) {
    match detected_at {
        Some(n) if n < tau => (Outcome::EarlyStop, None),
        Some(n) if n < tau + window => (Outcome::Success, Some(n - tau)),
        _ => (Outcome::Miss, None),
    }
}

/// Run the spec's detector over `reps` independent shifted streams and
/// aggregate outcomes. The stopping time is the first raw threshold
/// crossing; post-processing plays no role here.
pub fn run_experiment(spec: &SimSpec) -> Result<ExperimentResult, SimError> {
    spec.validate()?;
    let ThresholdSpec::Fixed(_) = spec.detector.threshold else {
        return Err(SimError::ThresholdNotFixed);
    };
    // Beyond tau + window - 1 every outcome is already determined.
    let last = spec.horizon.min(spec.tau + spec.success_window - 1);
    let records: Vec<RepRecord> = (0..spec.reps)
        .into_par_iter()
        .map(|rep| -> Result<RepRecord, SimError> {
            let mut gen = StreamGen::for_rep(spec, rep);
            let history: Vec<Observation> =
                (0..spec.detector.n_history).map(|_| gen.next()).collect();
            let mut state = warmup(spec.detector.clone(), DistanceSpec::Euclidean, &history)?;
            let mut detected_at = None;
            for _ in spec.detector.n_history as u64..last {
                let out = step(&mut state, gen.next())?;
                if let Some(ev) = out.event {
                    detected_at = Some(ev.n);
                    break;
                }
            }
            let (outcome, lag) = classify(detected_at, spec.tau, spec.success_window);
            Ok(RepRecord { rep, detected_at, outcome, lag })
        })
        .collect::<Result<_, _>>()?;
    Ok(summarize(records))
}

/// A Monte Carlo calibrated threshold with its order-statistic confidence
/// band and the early-stop probability realized at `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub b: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub achieved: f64,
    pub target: f64,
    pub reps: u64,
    /// Crossing strictly before this many monitored observations counts.
    pub t_max: u64,
}

const MIN_CALIBRATION_REPS: u64 = 500;

/// Choose b so the empirical probability of any crossing within t_max
/// monitored observations of a change-free stream hits `alpha`.
///
/// The event "some crossing before t_max at threshold b" is exactly
/// "the largest scan score over those steps exceeds b", so the bisection
/// over b collapses to an order statistic of the per-repetition maxima.
pub fn calibrate_mc(spec: &SimSpec, t_max: u64, alpha: f64) -> Result<Calibration, SimError> {
    spec.validate()?;
    if spec.reps < MIN_CALIBRATION_REPS {
        return Err(SimError::TooFewReps { reps: spec.reps, min: MIN_CALIBRATION_REPS });
    }
    let maxima = match spec.detector.rule {
        StoppingRule::T3 => {
            let cfg = ScanConfig::new(
                spec.detector.k,
                spec.detector.l,
                spec.detector.n0,
                spec.detector.n1,
            )?;
            let per_rep = windowed_null_maxima(spec, &[cfg], t_max)?;
            per_rep.into_iter().map(|mut row| row.pop().unwrap()).collect()
        }
        _ => growing_null_maxima(spec, t_max)?,
    };
    threshold_from_maxima(maxima, alpha, t_max)
}

fn threshold_from_maxima(
    mut maxima: Vec<f64>,
    alpha: f64,
    t_max: u64,
) -> Result<Calibration, SimError> {
    let reps = maxima.len() as u64;
    maxima.sort_by(|a, b| b.total_cmp(a));
    let m = (alpha * reps as f64).round() as usize;
    if m == 0 || m >= maxima.len() {
        return Err(SimError::QuantileBracket { alpha, reps });
    }
    let hw = (1.96 * (alpha * (1.0 - alpha) * reps as f64).sqrt()).ceil() as usize;
    if m + hw >= maxima.len() {
        return Err(SimError::QuantileBracket { alpha, reps });
    }
    let b = maxima[m];
    if !b.is_finite() {
        return Err(SimError::QuantileBracket { alpha, reps });
    }
    let achieved = maxima.iter().filter(|v| **v > b).count() as f64 / reps as f64;
    Ok(Calibration {
        b,
        lo95: maxima[m + hw],
        hi95: maxima[m.saturating_sub(hw)],
        achieved,
        target: alpha,
        reps,
        t_max,
    })
}

/// Per-repetition maxima of the windowed scan score over the first
/// t_max - 1 monitored steps of a change-free stream, evaluated for
/// several scan geometries on one shared pass (they must agree on k and L).
fn windowed_null_maxima(
    spec: &SimSpec,
    cfgs: &[ScanConfig],
    t_max: u64,
) -> Result<Vec<Vec<f64>>, SimError> {
    let n_history = spec.detector.n_history as u64;
    (0..spec.reps)
        .into_par_iter()
        .map(|rep| -> Result<Vec<f64>, SimError> {
            let mut gen = StreamGen::null_for_rep(spec, rep);
            let mut graph =
                WindowGraph::sliding(spec.detector.l, spec.detector.k, DistanceSpec::Euclidean)?;
            for _ in 0..n_history {
                graph.push(gen.next())?;
            }
            let mut best = vec![f64::NEG_INFINITY; cfgs.len()];
            for _ in 1..t_max {
                graph.push(gen.next())?;
                for (slot, cfg) in cfgs.iter().enumerate() {
                    match zmax_with(&graph, cfg, VarianceMode::Conditional, None) {
                        Ok(out) => best[slot] = best[slot].max(out.max_z),
                        Err(ScanError::AllDegenerate) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            Ok(best)
        })
        .collect()
}

/// Per-repetition maxima for the unwindowed rules, scanning the growing
/// graph over the rule's split range each step.
fn growing_null_maxima(spec: &SimSpec, t_max: u64) -> Result<Vec<f64>, SimError> {
    let det = &spec.detector;
    let n_history = det.n_history as u64;
    (0..spec.reps)
        .into_par_iter()
        .map(|rep| -> Result<f64, SimError> {
            let mut gen = StreamGen::null_for_rep(spec, rep);
            let mut graph = WindowGraph::growing(det.k, DistanceSpec::Euclidean)?;
            for _ in 0..n_history {
                graph.push(gen.next())?;
            }
            let mut best = f64::NEG_INFINITY;
            for _ in 1..t_max {
                graph.push(gen.next())?;
                let count = graph.len();
                let n1 = match det.rule {
                    StoppingRule::T1 => count - det.n0,
                    _ => det.n1.min(count - det.n0),
                };
                if n1 <= det.n0 {
                    continue;
                }
                let cfg = ScanConfig::new(det.k, count, det.n0, n1)?;
                match zmax_with(&graph, &cfg, VarianceMode::Conditional, None) {
                    Ok(out) => best = best.max(out.max_z),
                    Err(ScanError::AllDegenerate) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            Ok(best)
        })
        .collect()
}

/// Average the window functionals of a change-free Gaussian stream, for
/// each requested k, sharing one pass over `points` observations.
pub fn estimate_functionals(
    d: usize,
    l: usize,
    ks: &[usize],
    points: usize,
    seed: u64,
) -> Result<Vec<FunctionalEstimates>, SimError> {
    if points < l {
        return Err(SimError::ShortFunctionalStream { points, l });
    }
    let k_graph = ks.iter().copied().max().unwrap_or(1);
    let mut graph = WindowGraph::sliding(l, k_graph, DistanceSpec::Euclidean)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut estimates: Vec<Option<FunctionalEstimates>> = vec![None; ks.len()];
    for i in 0..points {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        graph.push(Observation::vector(i as u64 + 1, v))?;
        if !graph.is_ready() {
            continue;
        }
        for (slot, &k) in ks.iter().enumerate() {
            let f = graph.functionals_for_k(k)?;
            match estimates[slot].as_mut() {
                None => estimates[slot] = Some(FunctionalEstimates::from_window(&f)),
                Some(e) => e.update(&f),
            }
        }
    }
    Ok(estimates.into_iter().map(|e| e.expect("points >= l")).collect())
}

// ---------------------------------------------------------------------------
// Hotelling T-squared baseline
// ---------------------------------------------------------------------------

/// Windowed two-sample Hotelling scan: for each admissible split of the L
/// most recent observations, the classic T-squared statistic with pooled
/// covariance; the step score is the maximum over splits.
struct HotellingMonitor {
    l: usize,
    d: usize,
    x_lo: usize,
    x_hi: usize,
    window: VecDeque<Vec<f64>>,
    /// Running sum of outer products over the window, row-major d x d.
    outer: Vec<f64>,
}

impl HotellingMonitor {
    fn new(l: usize, d: usize, n0: usize, n1: usize) -> Self {
        HotellingMonitor {
            l,
            d,
            x_lo: l - n1,
            x_hi: l - n0,
            window: VecDeque::with_capacity(l + 1),
            outer: vec![0.0; d * d],
        }
    }

    fn push(&mut self, x: Vec<f64>) {
        if self.window.len() == self.l {
            let old = self.window.pop_front().unwrap();
            rank1(&mut self.outer, &old, -1.0, self.d);
        }
        rank1(&mut self.outer, &x, 1.0, self.d);
        self.window.push_back(x);
    }

    /// Maximum T-squared over admissible splits, or None while the window
    /// is short or every split's pooled covariance is singular.
    fn scan_max(&self, scratch: &mut HotellingScratch) -> Option<f64> {
        if self.window.len() < self.l {
            return None;
        }
        let (l, d) = (self.l, self.d);
        let total = &mut scratch.total;
        total.fill(0.0);
        for obs in &self.window {
            for (t, v) in total.iter_mut().zip(obs) {
                *t += v;
            }
        }
        let sum1 = &mut scratch.sum1;
        sum1.fill(0.0);
        let mut best: Option<f64> = None;
        for (pos, obs) in self.window.iter().enumerate() {
            for (s, v) in sum1.iter_mut().zip(obs) {
                *s += v;
            }
            let x = pos + 1;
            if x < self.x_lo || x > self.x_hi {
                continue;
            }
            let (n1, n2) = (x as f64, (l - x) as f64);
            for i in 0..d {
                scratch.mean1[i] = sum1[i] / n1;
                scratch.mean2[i] = (total[i] - sum1[i]) / n2;
                scratch.delta[i] = scratch.mean1[i] - scratch.mean2[i];
            }
            // Pooled covariance via S = (Sum xx' - n1 m1 m1' - n2 m2 m2') / (L - 2).
            let s = &mut scratch.cov;
            s.copy_from_slice(&self.outer);
            rank1(s, &scratch.mean1, -n1, d);
            rank1(s, &scratch.mean2, -n2, d);
            let denom = (l - 2) as f64;
            for v in s.iter_mut() {
                *v /= denom;
            }
            if let Some(q) = cholesky_quadform(s, &scratch.delta, d) {
                let t2 = n1 * n2 / l as f64 * q;
                if best.map_or(true, |b| t2 > b) {
                    best = Some(t2);
                }
            }
        }
        best
    }
}

struct HotellingScratch {
    total: Vec<f64>,
    sum1: Vec<f64>,
    mean1: Vec<f64>,
    mean2: Vec<f64>,
    delta: Vec<f64>,
    cov: Vec<f64>,
}

impl HotellingScratch {
    fn new(d: usize) -> Self {
        HotellingScratch {
            total: vec![0.0; d],
            sum1: vec![0.0; d],
            mean1: vec![0.0; d],
            mean2: vec![0.0; d],
            delta: vec![0.0; d],
            cov: vec![0.0; d * d],
        }
    }
}

/// a += scale * v v'
fn rank1(a: &mut [f64], v: &[f64], scale: f64, d: usize) {
    for i in 0..d {
        let vi = scale * v[i];
        let row = &mut a[i * d..(i + 1) * d];
        for (cell, vj) in row.iter_mut().zip(v) {
            *cell += vi * vj;
        }
    }
}

/// delta' S^-1 delta through an in-place Cholesky factorization; None when
/// S is not positive definite. Only the forward substitution is needed:
/// the quadratic form is the squared norm of L^-1 delta.
fn cholesky_quadform(s: &mut [f64], delta: &[f64], d: usize) -> Option<f64> {
    for j in 0..d {
        let mut diag = s[j * d + j];
        for k in 0..j {
            diag -= s[j * d + k] * s[j * d + k];
        }
        if diag <= 1e-12 {
            return None;
        }
        let diag = diag.sqrt();
        s[j * d + j] = diag;
        for i in (j + 1)..d {
            let mut v = s[i * d + j];
            for k in 0..j {
                v -= s[i * d + k] * s[j * d + k];
            }
            s[i * d + j] = v / diag;
        }
    }
    let mut q = 0.0;
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut v = delta[i];
        for k in 0..i {
            v -= s[i * d + k] * y[k];
        }
        y[i] = v / s[i * d + i];
        q += y[i] * y[i];
    }
    Some(q)
}

fn hotelling_check(spec: &SimSpec) -> Result<(), SimError> {
    // The pooled covariance has L - 2 degrees of freedom; beyond that the
    // statistic does not exist and the baseline is reported inapplicable.
    if spec.d + 2 > spec.detector.l {
        return Err(SimError::NotApplicable { d: spec.d, l: spec.detector.l });
    }
    Ok(())
}

fn hotelling_null_maxima(spec: &SimSpec, t_max: u64) -> Result<Vec<f64>, SimError> {
    let det = &spec.detector;
    (0..spec.reps)
        .into_par_iter()
        .map(|rep| -> Result<f64, SimError> {
            let mut gen = StreamGen::null_for_rep(spec, rep);
            let mut mon = HotellingMonitor::new(det.l, spec.d, det.n0, det.n1);
            let mut scratch = HotellingScratch::new(spec.d);
            for _ in 0..det.n_history {
                mon.push(obs_vector(gen.next()));
            }
            let mut best = f64::NEG_INFINITY;
            for _ in 1..t_max {
                mon.push(obs_vector(gen.next()));
                if let Some(t2) = mon.scan_max(&mut scratch) {
                    best = best.max(t2);
                }
            }
            Ok(best)
        })
        .collect()
}

fn hotelling_experiment(spec: &SimSpec, b: f64) -> Result<ExperimentResult, SimError> {
    let det = &spec.detector;
    let last = spec.horizon.min(spec.tau + spec.success_window - 1);
    let records: Vec<RepRecord> = (0..spec.reps)
        .into_par_iter()
        .map(|rep| -> Result<RepRecord, SimError> {
            let mut gen = StreamGen::for_rep(spec, rep);
            let mut mon = HotellingMonitor::new(det.l, spec.d, det.n0, det.n1);
            let mut scratch = HotellingScratch::new(spec.d);
            for _ in 0..det.n_history {
                mon.push(obs_vector(gen.next()));
            }
            let mut detected_at = None;
            for n in det.n_history as u64 + 1..=last {
                mon.push(obs_vector(gen.next()));
                if let Some(t2) = mon.scan_max(&mut scratch) {
                    if t2 > b {
                        detected_at = Some(n);
                        break;
                    }
                }
            }
            let (outcome, lag) = classify(detected_at, spec.tau, spec.success_window);
            Ok(RepRecord { rep, detected_at, outcome, lag })
        })
        .collect::<Result<_, _>>()?;
    Ok(summarize(records))
}

/// Calibrate the Hotelling baseline to the early-stop probability and run
/// the shifted experiment at the calibrated threshold.
pub fn hotelling_scan(
    spec: &SimSpec,
    t_max: u64,
    alpha: f64,
) -> Result<(Calibration, ExperimentResult), SimError> {
    spec.validate()?;
    hotelling_check(spec)?;
    if spec.reps < MIN_CALIBRATION_REPS {
        return Err(SimError::TooFewReps { reps: spec.reps, min: MIN_CALIBRATION_REPS });
    }
    let cal = threshold_from_maxima(hotelling_null_maxima(spec, t_max)?, alpha, t_max)?;
    let result = hotelling_experiment(spec, cal.b)?;
    Ok((cal, result))
}

fn obs_vector(obs: Observation) -> Vec<f64> {
    match obs.payload {
        crate::data::Payload::Vector(v) => v,
        crate::data::Payload::Key(_) => unreachable!("simulation streams are vector valued"),
    }
}

// ---------------------------------------------------------------------------
// k sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepPoint {
    pub k: usize,
    pub calibration: Calibration,
    pub result: ExperimentResult,
}

/// Calibrate and run the spec once per k, holding everything else fixed.
pub fn k_sweep(
    base: &SimSpec,
    ks: &[usize],
    t_max: u64,
    alpha: f64,
) -> Result<Vec<KSweepPoint>, SimError> {
    ks.iter()
        .map(|&k| {
            let mut spec = base.clone();
            spec.detector.k = k;
            let cal = calibrate_mc(&spec, t_max, alpha)?;
            spec.detector.threshold = ThresholdSpec::Fixed(cal.b);
            let result = run_experiment(&spec)?;
            Ok(KSweepPoint { k, calibration: cal, result })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Table1,
    Table2,
    Table3,
    Fig1,
    Fig5,
    Fig7,
}

impl std::str::FromStr for Preset {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "table1" => Ok(Preset::Table1),
            "table2" => Ok(Preset::Table2),
            "table3" => Ok(Preset::Table3),
            "fig1" => Ok(Preset::Fig1),
            "fig5" => Ok(Preset::Fig5),
            "fig7" => Ok(Preset::Fig7),
            other => Err(SimError::UnknownPreset(other.to_string())),
        }
    }
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Table1 => "table1",
            Preset::Table2 => "table2",
            Preset::Table3 => "table3",
            Preset::Fig1 => "fig1",
            Preset::Fig5 => "fig5",
            Preset::Fig7 => "fig7",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// Reduced repetition counts and cell grids sized for a single core.
    Desk,
    /// The full published grids and repetition counts; expensive.
    Paper,
}

impl std::str::FromStr for Scale {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(SimError::UnknownScale(other.to_string())),
        }
    }
}

impl Scale {
    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        }
    }

    fn power_reps(self) -> u64 {
        1_000
    }

    fn calibration_reps(self) -> u64 {
        match self {
            Scale::Desk => 2_000,
            Scale::Paper => 10_000,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellParams {
    pub rule: StoppingRule,
    pub statistic: String,
    pub k: Option<usize>,
    pub d: usize,
    pub l: usize,
    pub n0: usize,
    pub n1: usize,
    pub generator: Option<Generator>,
    pub delta: Option<f64>,
    pub tau: Option<u64>,
    pub gradual_length: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyticThresholds {
    pub asymptotic: f64,
    pub skewness_corrected: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PresetCell {
    pub label: String,
    pub params: CellParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<Calibration>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub analytic: Option<AnalyticThresholds>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<ExperimentResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PresetReport {
    pub schema: String,
    pub preset: String,
    pub scale: String,
    pub seed: u64,
    /// The under-specified knob, recorded in every result file.
    pub shift_direction: String,
    pub cells: Vec<PresetCell>,
}

const DEFAULT_N_HISTORY: usize = 200;
const DEFAULT_TAU: u64 = 400;
const DEFAULT_HORIZON: u64 = 1_200;
const SUCCESS_WINDOW: u64 = 100;
/// Early-stop calibration of the power studies: crossing before the change.
const POWER_T_MAX: u64 = 200;
const POWER_ALPHA: f64 = 0.01;
/// False-discovery calibration of the failure studies.
const FAILURE_T_MAX: u64 = 1_000;
const FAILURE_ALPHA: f64 = 0.05;

fn detector(rule: StoppingRule, k: usize, l: usize, n0: usize) -> DetectorConfig {
    DetectorConfig {
        rule,
        k,
        l,
        n0,
        n1: l - n0,
        threshold: ThresholdSpec::Fixed(f64::INFINITY),
        n_history: DEFAULT_N_HISTORY,
        functional_refresh: false,
        suppression_lookback: 5,
    }
}

fn base_spec(generator: Generator, d: usize, delta: f64, det: DetectorConfig, seed: u64) -> SimSpec {
    SimSpec {
        generator,
        d,
        delta,
        tau: DEFAULT_TAU,
        horizon: DEFAULT_HORIZON,
        reps: 1_000,
        seed,
        detector: det,
        success_window: SUCCESS_WINDOW,
    }
}

fn cell_params(spec: &SimSpec, statistic: &str, with_change: bool) -> CellParams {
    CellParams {
        rule: spec.detector.rule,
        statistic: statistic.to_string(),
        k: (statistic == "knn").then_some(spec.detector.k),
        d: spec.d,
        l: spec.detector.l,
        n0: spec.detector.n0,
        n1: spec.detector.n1,
        generator: with_change.then_some(spec.generator),
        delta: with_change.then_some(spec.delta),
        tau: with_change.then_some(spec.tau),
        gradual_length: match spec.generator {
            Generator::GradualShift { length } if with_change => Some(length),
            _ => None,
        },
    }
}

/// Run one canned experiment preset. Cells the chosen scale cannot afford
/// carry an explanatory note instead of numbers.
pub fn run_preset(preset: Preset, scale: Scale, seed: u64) -> Result<PresetReport, SimError> {
    let cells = match preset {
        Preset::Table1 | Preset::Fig1 => failure_grid(scale, seed)?,
        Preset::Table2 => threshold_table(scale, seed)?,
        Preset::Table3 => power_table(scale, seed)?,
        Preset::Fig5 => k_sweep_grid(scale, seed)?,
        Preset::Fig7 => gradual_grid(scale, seed)?,
    };
    Ok(PresetReport {
        schema: "knnscan.simulate.v1".to_string(),
        preset: preset.as_str().to_string(),
        scale: scale.as_str().to_string(),
        seed,
        shift_direction: "equal spread: delta/sqrt(d) added to every coordinate".to_string(),
        cells,
    })
}

/// Detection-delay and failure-rate grid shared by the failure table and
/// the delay curves: all three rules, k in {1, 3}, a ladder of shifts.
fn failure_grid(scale: Scale, seed: u64) -> Result<Vec<PresetCell>, SimError> {
    let d = 10;
    let l = 200;
    let n0 = 3;
    let deltas = [1.5, 2.0, 3.0, 4.0, 5.0];
    let mut cells = Vec::new();
    for &k in &[1usize, 3] {
        for rule in [StoppingRule::T1, StoppingRule::T2, StoppingRule::T3] {
            let mut spec = base_spec(
                Generator::GaussianShift,
                d,
                0.0,
                detector(rule, k, l, n0),
                seed,
            );
            spec.reps = scale.calibration_reps();
            let cal = calibrate_mc(&spec, FAILURE_T_MAX, FAILURE_ALPHA)?;
            spec.detector.threshold = ThresholdSpec::Fixed(cal.b);
            spec.reps = scale.power_reps();
            for &delta in &deltas {
                spec.delta = delta;
                let result = run_experiment(&spec)?;
                cells.push(PresetCell {
                    label: format!("{} {}-NN delta={delta}", rule.as_str(), k),
                    params: cell_params(&spec, "knn", true),
                    calibration: Some(cal),
                    analytic: None,
                    result: Some(result),
                    note: None,
                });
            }
        }
    }
    Ok(cells)
}

/// Monte Carlo, asymptotic, and skewness-corrected thresholds over the
/// (d, k, n0) grid at the standing false-discovery operating point.
fn threshold_table(scale: Scale, seed: u64) -> Result<Vec<PresetCell>, SimError> {
    let l = 200;
    let ks = [1usize, 3, 5];
    let ds: &[usize] = match scale {
        Scale::Desk => &[10, 100, 1000],
        Scale::Paper => &[10, 100, 1000, 10000],
    };
    let n0s = [3usize, 10];
    let mut cells = Vec::new();
    for &d in ds {
        // One functional pass per dimension serves every k.
        let estimates = estimate_functionals(d, l, &ks, 10_000, seed ^ 0x7ab1e2)?;
        for (slot, &k) in ks.iter().enumerate() {
            // One null-stream pass per (d, k) serves both n0 columns.
            let cfgs: Vec<ScanConfig> = n0s
                .iter()
                .map(|&n0| ScanConfig::new(k, l, n0, l - n0))
                .collect::<Result<_, _>>()?;
            let mut spec = base_spec(
                Generator::GaussianShift,
                d,
                0.0,
                detector(StoppingRule::T3, k, l, 3),
                seed,
            );
            spec.reps = scale.calibration_reps();
            let per_rep = windowed_null_maxima(&spec, &cfgs, FAILURE_T_MAX)?;
            for (ci, &n0) in n0s.iter().enumerate() {
                let maxima: Vec<f64> = per_rep.iter().map(|row| row[ci]).collect();
                let cal = threshold_from_maxima(maxima, FAILURE_ALPHA, FAILURE_T_MAX)?;
                let req = ArlRequest {
                    b: 0.0,
                    l,
                    n0,
                    n1: l - n0,
                    functionals: &estimates[slot],
                    skewness_corrected: false,
                };
                let asymptotic = solve_threshold(10_000.0, &req)?;
                let corrected = solve_threshold(
                    10_000.0,
                    &ArlRequest { skewness_corrected: true, ..req },
                )?;
                spec.detector.n0 = n0;
                spec.detector.n1 = l - n0;
                cells.push(PresetCell {
                    label: format!("d={d} {k}-NN n0={n0}"),
                    params: cell_params(&spec, "knn", false),
                    calibration: Some(cal),
                    analytic: Some(AnalyticThresholds {
                        asymptotic,
                        skewness_corrected: corrected,
                    }),
                    result: None,
                    note: None,
                });
            }
        }
    }
    Ok(cells)
}

/// Power comparison against the Hotelling baseline at matched early-stop
/// probability.
fn power_table(scale: Scale, seed: u64) -> Result<Vec<PresetCell>, SimError> {
    let l = 200;
    let n0 = 3;
    // (generator, d, delta)
    let mut scenarios: Vec<(Generator, usize, f64)> = vec![
        (Generator::GaussianShift, 10, 0.7),
        (Generator::GaussianShift, 100, 1.8),
        (Generator::GaussianShift, 1000, 2.7),
        (Generator::LognormalShift, 10, 1.5),
        (Generator::LognormalShift, 100, 2.0),
    ];
    if scale == Scale::Paper {
        scenarios.insert(3, (Generator::GaussianShift, 10000, 5.0));
    }
    let mut cells = Vec::new();
    for (generator, d, delta) in scenarios {
        for &k in &[1usize, 3, 5] {
            let mut spec = base_spec(generator, d, delta, detector(StoppingRule::T3, k, l, n0), seed);
            spec.reps = scale.calibration_reps();
            let cal = calibrate_mc(&spec, POWER_T_MAX, POWER_ALPHA)?;
            spec.detector.threshold = ThresholdSpec::Fixed(cal.b);
            spec.reps = scale.power_reps();
            let result = run_experiment(&spec)?;
            cells.push(PresetCell {
                label: format!("{:?} d={d} delta={delta} {k}-NN", generator),
                params: cell_params(&spec, "knn", true),
                calibration: Some(cal),
                analytic: None,
                result: Some(result),
                note: None,
            });
        }
        let mut spec = base_spec(generator, d, delta, detector(StoppingRule::T3, 1, l, n0), seed);
        let label = format!("{:?} d={d} delta={delta} hotelling", generator);
        let params = cell_params(&spec, "hotelling", true);
        let cell = if d + 2 > l {
            // The published dashes: no pooled covariance in high dimension.
            PresetCell {
                label,
                params,
                calibration: None,
                analytic: None,
                result: None,
                note: Some("not applicable: d exceeds the pooled covariance budget".to_string()),
            }
        } else if scale == Scale::Desk && d > 10 {
            PresetCell {
                label,
                params,
                calibration: None,
                analytic: None,
                result: None,
                note: Some(
                    "skipped at desk scale (cubic in d per split); run --scale paper".to_string(),
                ),
            }
        } else {
            spec.reps = scale.calibration_reps();
            let cal = threshold_from_maxima(
                hotelling_null_maxima(&spec, POWER_T_MAX)?,
                POWER_ALPHA,
                POWER_T_MAX,
            )?;
            spec.reps = scale.power_reps();
            let result = hotelling_experiment(&spec, cal.b)?;
            PresetCell {
                label,
                params,
                calibration: Some(cal),
                analytic: None,
                result: Some(result),
                note: None,
            }
        };
        cells.push(cell);
    }
    Ok(cells)
}

fn k_sweep_grid(scale: Scale, seed: u64) -> Result<Vec<PresetCell>, SimError> {
    let l = 50;
    let n0 = 3;
    let ks = [1usize, 2, 3, 5, 7, 10, 15, 20, 30, 40];
    let scenarios: &[(usize, f64)] = match scale {
        Scale::Desk => &[(10, 1.7), (100, 2.7)],
        Scale::Paper => &[(10, 1.7), (100, 2.7), (1000, 4.5), (10000, 8.0)],
    };
    let mut cells = Vec::new();
    for &(d, delta) in scenarios {
        let mut spec = base_spec(
            Generator::GaussianShift,
            d,
            delta,
            detector(StoppingRule::T3, 1, l, n0),
            seed,
        );
        spec.reps = scale.calibration_reps();
        let mut sweep_spec = spec.clone();
        sweep_spec.reps = scale.power_reps();
        for &k in &ks {
            let mut cal_spec = spec.clone();
            cal_spec.detector.k = k;
            let cal = calibrate_mc(&cal_spec, POWER_T_MAX, POWER_ALPHA)?;
            let mut run_spec = sweep_spec.clone();
            run_spec.detector.k = k;
            run_spec.detector.threshold = ThresholdSpec::Fixed(cal.b);
            let result = run_experiment(&run_spec)?;
            cells.push(PresetCell {
                label: format!("d={d} delta={delta} k={k}"),
                params: cell_params(&run_spec, "knn", true),
                calibration: Some(cal),
                analytic: None,
                result: Some(result),
                note: None,
            });
        }
    }
    Ok(cells)
}

fn gradual_grid(scale: Scale, seed: u64) -> Result<Vec<PresetCell>, SimError> {
    let (d, delta, k, l, n0) = (1000, 3.0, 5, 200, 3);
    let lengths: &[u64] = &[1, 5, 10, 15, 20, 25, 30];
    let mut spec = base_spec(
        Generator::GaussianShift,
        d,
        delta,
        detector(StoppingRule::T3, k, l, n0),
        seed,
    );
    spec.reps = scale.calibration_reps();
    let cal = calibrate_mc(&spec, POWER_T_MAX, POWER_ALPHA)?;
    spec.detector.threshold = ThresholdSpec::Fixed(cal.b);
    spec.reps = scale.power_reps();
    let mut cells = Vec::new();
    for &length in lengths {
        spec.generator = Generator::GradualShift { length };
        let result = run_experiment(&spec)?;
        cells.push(PresetCell {
            label: format!("gradual length {length}"),
            params: cell_params(&spec, "knn", true),
            calibration: Some(cal),
            analytic: None,
            result: Some(result),
            note: None,
        });
    }
    Ok(cells)
}
