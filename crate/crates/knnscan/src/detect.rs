//! Streaming detector: stopping rules, warmup from history, and the
//! post-processing that turns raw threshold crossings into valid detections.
//!
//! Three rules share one scaffold. The windowed rule scans splits of the L
//! most recent observations held in a sliding graph; the two unwindowed
//! rules grow their graph over the whole history each step, differing only
//! in how far back candidate splits reach. A raw event fires whenever the
//! maximal standardized score clears the threshold; the post-processor then
//! suppresses echoes of one crossing and enforces a minimum spacing between
//! surviving detections.

use crate::arl::{solve_threshold, ArlError, ArlRequest, FunctionalEstimates};
use crate::data::{DistanceSpec, Observation};
use crate::nngraph::{GraphError, WindowGraph};
use crate::scan::{zmax_with, ScanConfig, ScanError, VarianceMode};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoppingRule {
    /// Scan every split of the full history: t in [n0, n - n0].
    T1,
    /// Scan only recent splits of the full history: t in [n - n1, n - n0].
    T2,
    /// Scan recent splits of the L most recent observations.
    T3,
}

impl StoppingRule {
    pub fn as_str(self) -> &'static str {
        match self {
            StoppingRule::T1 => "t1",
            StoppingRule::T2 => "t2",
            StoppingRule::T3 => "t3",
        }
    }
}

/// How the detection threshold is fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdSpec {
    Fixed(f64),
    /// Solve the analytic run-length equation for this target at warmup
    /// (windowed rule only; the analytic formula is tied to a fixed L).
    TargetArl(f64),
}

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub rule: StoppingRule,
    pub k: usize,
    /// Window length; used by the windowed rule and by event spacing.
    pub l: usize,
    pub n0: usize,
    pub n1: usize,
    pub threshold: ThresholdSpec,
    /// Length of the change-free history the detector is warmed on.
    pub n_history: usize,
    /// Fold each non-event window into the functional estimates.
    pub functional_refresh: bool,
    /// How many immediately preceding steps silence a new crossing.
    pub suppression_lookback: usize,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        if self.n0 == 0 || self.n0 >= self.n1 {
            return Err(DetectError::BadOffsets { n0: self.n0, n1: self.n1 });
        }
        if self.rule == StoppingRule::T3 {
            if self.n1 + self.n0 > self.l {
                return Err(DetectError::BadOffsets { n0: self.n0, n1: self.n1 });
            }
            if self.n_history < self.l {
                return Err(DetectError::HistoryShorterThanWindow {
                    n_history: self.n_history,
                    l: self.l,
                });
            }
        }
        Ok(())
    }
}

/// Validity level of a detection, refined by post-processing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventStatus {
    /// Threshold crossing as observed.
    Raw,
    /// Survived same-event suppression.
    Candidate,
    /// Survived suppression and minimum spacing.
    Valid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    /// Time of the crossing (newest observation index).
    pub n: u64,
    /// Argmax split: estimated last index of the pre-change regime.
    pub t_hat: u64,
    pub zmax: f64,
    /// Threshold in force when the event fired.
    pub b: f64,
    pub rule: StoppingRule,
    pub status: EventStatus,
}

/// Everything one step reports: the scan summary (absent when every split
/// was degenerate) and the raw event if the threshold was crossed.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub n: u64,
    pub zmax: Option<(f64, u64)>,
    pub event: Option<DetectionEvent>,
}

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("offsets must satisfy 0 < n0 < n1 (and n0 + n1 <= L for the windowed rule), got n0={n0}, n1={n1}")]
    BadOffsets { n0: usize, n1: usize },
    #[error("windowed rule needs history >= window: history {n_history} < L {l}")]
    HistoryShorterThanWindow { n_history: usize, l: usize },
    #[error("history has {have} observations, config requires {need}")]
    InsufficientHistory { have: usize, need: usize },
    #[error("rule {rule} has no fixed window, so a target run length cannot be solved analytically; give an explicit threshold")]
    AnalyticThresholdUnsupported { rule: &'static str },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Scan(#[from] ScanError),
    #[error(transparent)]
    Arl(#[from] ArlError),
}

/// A warmed detector ready to consume the live stream.
pub struct DetectorState {
    cfg: DetectorConfig,
    graph: WindowGraph,
    estimates: Option<FunctionalEstimates>,
    b: f64,
}

impl DetectorState {
    pub fn threshold(&self) -> f64 {
        self.b
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn estimates(&self) -> Option<&FunctionalEstimates> {
        self.estimates.as_ref()
    }

    /// Newest observation index absorbed so far.
    pub fn time(&self) -> Option<u64> {
        self.graph.newest_index()
    }
}

/// Build detector state from change-free history: fill the graph, average
/// functionals over every complete history window, and resolve the
/// threshold. Deterministic in its inputs.
pub fn warmup(
    cfg: DetectorConfig,
    spec: DistanceSpec,
    history: &[Observation],
) -> Result<DetectorState, DetectError> {
    cfg.validate()?;
    if history.len() < cfg.n_history {
        return Err(DetectError::InsufficientHistory {
            have: history.len(),
            need: cfg.n_history,
        });
    }

    let mut graph = match cfg.rule {
        StoppingRule::T3 => WindowGraph::sliding(cfg.l, cfg.k, spec)?,
        _ => WindowGraph::growing(cfg.k, spec)?,
    };

    let mut estimates: Option<FunctionalEstimates> = None;
    for obs in history {
        graph.push(obs.clone())?;
        if cfg.rule == StoppingRule::T3 && graph.is_ready() {
            let f = graph.functionals()?;
            match estimates.as_mut() {
                None => estimates = Some(FunctionalEstimates::from_window(&f)),
                Some(e) => e.update(&f),
            }
        }
    }

    let b = match cfg.threshold {
        ThresholdSpec::Fixed(b) => b,
        ThresholdSpec::TargetArl(target) => {
            if cfg.rule != StoppingRule::T3 {
                return Err(DetectError::AnalyticThresholdUnsupported {
                    rule: cfg.rule.as_str(),
                });
            }
            let est = estimates.as_ref().expect("windowed warmup always estimates");
            solve_threshold(
                target,
                &ArlRequest {
                    b: 0.0,
                    l: cfg.l,
                    n0: cfg.n0,
                    n1: cfg.n1,
                    functionals: est,
                    skewness_corrected: true,
                },
            )?
        }
    };

    Ok(DetectorState { cfg, graph, estimates, b })
}

/// Absorb one observation and scan. Returns the step summary; the embedded
/// event, when present, is always `Raw`.
pub fn step(state: &mut DetectorState, obs: Observation) -> Result<StepOutcome, DetectError> {
    state.graph.push(obs)?;
    let n = state.graph.newest_index().unwrap();
    let count = state.graph.len();

    let scan_cfg = match state.cfg.rule {
        StoppingRule::T3 => ScanConfig::new(state.cfg.k, state.cfg.l, state.cfg.n0, state.cfg.n1)?,
        StoppingRule::T1 => {
            if count < 2 * state.cfg.n0 + 1 {
                return Ok(StepOutcome { n, zmax: None, event: None });
            }
            ScanConfig::new(state.cfg.k, count, state.cfg.n0, count - state.cfg.n0)?
        }
        StoppingRule::T2 => {
            let n1 = state.cfg.n1.min(count.saturating_sub(state.cfg.n0));
            if n1 <= state.cfg.n0 {
                return Ok(StepOutcome { n, zmax: None, event: None });
            }
            ScanConfig::new(state.cfg.k, count, state.cfg.n0, n1)?
        }
    };

    let outcome = match zmax_with(&state.graph, &scan_cfg, VarianceMode::Conditional, None) {
        Ok(o) => o,
        // A window where every split is degenerate carries no evidence;
        // report the step without a score rather than aborting the stream.
        Err(ScanError::AllDegenerate) => {
            maybe_refresh(state)?;
            return Ok(StepOutcome { n, zmax: None, event: None });
        }
        Err(e) => return Err(e.into()),
    };

    let event = if outcome.max_z > state.b {
        Some(DetectionEvent {
            n,
            t_hat: outcome.argmax_t,
            zmax: outcome.max_z,
            b: state.b,
            rule: state.cfg.rule,
            status: EventStatus::Raw,
        })
    } else {
        maybe_refresh(state)?;
        None
    };

    Ok(StepOutcome {
        n,
        zmax: Some((outcome.max_z, outcome.argmax_t)),
        event,
    })
}

fn maybe_refresh(state: &mut DetectorState) -> Result<(), DetectError> {
    if !state.cfg.functional_refresh || state.cfg.rule != StoppingRule::T3 {
        return Ok(());
    }
    if !state.graph.is_ready() {
        return Ok(());
    }
    let f = state.graph.functionals()?;
    match state.estimates.as_mut() {
        None => state.estimates = Some(FunctionalEstimates::from_window(&f)),
        Some(e) => e.update(&f),
    }
    // A threshold tied to a target run length tracks the refreshed
    // estimates; a fixed threshold never moves.
    if let ThresholdSpec::TargetArl(target) = state.cfg.threshold {
        let est = state.estimates.as_ref().unwrap();
        state.b = solve_threshold(
            target,
            &ArlRequest {
                b: 0.0,
                l: state.cfg.l,
                n0: state.cfg.n0,
                n1: state.cfg.n1,
                functionals: est,
                skewness_corrected: true,
            },
        )?;
    }
    Ok(())
}

/// Refine raw events: a crossing within `suppression_lookback` steps of an
/// earlier crossing echoes the same disturbance and stays raw; survivors
/// become candidates; a candidate within L/2 - n0 of the previous valid
/// detection is dropped, the rest are valid. Every input event is returned
/// with its final status.
pub fn postprocess(events: &[DetectionEvent], cfg: &DetectorConfig) -> Vec<DetectionEvent> {
    let lookback = cfg.suppression_lookback as u64;
    let spacing = (cfg.l / 2).saturating_sub(cfg.n0) as u64;
    let mut out = Vec::with_capacity(events.len());
    let mut last_valid: Option<u64> = None;
    for (i, ev) in events.iter().enumerate() {
        let mut refined = ev.clone();
        let echoed = events[..i]
            .iter()
            .rev()
            .take_while(|p| p.n + lookback >= ev.n)
            .any(|p| p.n < ev.n);
        if !echoed {
            refined.status = EventStatus::Candidate;
            let spaced = match last_valid {
                Some(prev) => ev.n - prev > spacing,
                None => true,
            };
            if spaced {
                refined.status = EventStatus::Valid;
                last_valid = Some(ev.n);
            }
        }
        out.push(refined);
    }
    out
}
