//! Streaming change-point detection from k-nearest-neighbor scan statistics.
//!
//! The pipeline: observations arrive one at a time; a sliding window of the
//! L most recent points maintains a directed k-NN graph; the number of graph
//! edges crossing each candidate split is standardized into a scan statistic
//! whose maximum is compared against a threshold chosen analytically from an
//! average-run-length formula (with an optional skewness correction that
//! matters a great deal at finite L). A simulation lab reproduces the
//! calibration and power studies that justify the defaults.
//!
//! Module layout:
//!
//! - [`data`]: observations and distance metrics
//! - [`nngraph`]: the incremental window graph and its motif counts
//! - [`twosample`]: the two-sample k-NN test (statistic, exact permutation
//!   moments, standardized score)
//! - [`scan`]: the windowed scan statistic and its maximization over splits
//! - [`normal`]: standard normal density/CDF helpers
//! - [`arl`]: the analytic average-run-length machinery and threshold solver
//! - [`detect`]: stopping rules, streaming detector state, event post-processing
//! - [`sim`]: data generators, Monte Carlo calibration, experiment harness
//! - [`cli`]: command-line surface and file formats

pub mod arl;
pub mod cli;
pub mod data;
pub mod detect;
pub mod nngraph;
pub mod normal;
pub mod scan;
pub mod sim;
pub mod twosample;
