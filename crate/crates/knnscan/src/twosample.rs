//! Two-sample test on the k-NN graph.
//!
//! The statistic is twice the number of directed k-NN edges joining the two
//! groups. Under random relabeling (the permutation null) its expectation
//! and variance have closed forms in the group sizes and two observed graph
//! sums; both are exact for any finite graph, so the standardized score
//! needs no asymptotics to be centered and scaled correctly. Small values
//! of the raw statistic indicate separation, hence the sign flip in
//! [`LabeledSample::z_score`]: larger Z means stronger evidence the groups
//! differ.

use crate::nngraph::{GraphError, WindowGraph};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Group membership, by window position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    First,
    Second,
}

#[derive(Debug, Error)]
pub enum TwoSampleError {
    #[error("label vector has length {labels}, graph holds {residents}")]
    LabelLength { labels: usize, residents: usize },
    #[error("each group needs at least one member (n1={n1}, n2={n2})")]
    EmptyGroup { n1: usize, n2: usize },
    #[error("moments need at least 4 observations, got {0}")]
    TooSmall(usize),
    #[error("zero permutation variance: the graph cannot distinguish any relabeling")]
    DegenerateVariance,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Exact permutation moments of the cross-edge statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub expectation: f64,
    pub variance: f64,
}

/// Full test output as reported by the CLI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestSummary {
    pub statistic: u64,
    pub expectation: f64,
    pub variance: f64,
    pub z: f64,
}

/// A window graph with a binary labeling of its residents.
pub struct LabeledSample<'g> {
    graph: &'g WindowGraph,
    labels: Vec<Group>,
    n1: usize,
    n2: usize,
}

impl<'g> LabeledSample<'g> {
    /// Labels are given by window position, oldest resident first.
    pub fn new(graph: &'g WindowGraph, labels: Vec<Group>) -> Result<Self, TwoSampleError> {
        if labels.len() != graph.len() {
            return Err(TwoSampleError::LabelLength {
                labels: labels.len(),
                residents: graph.len(),
            });
        }
        let n1 = labels.iter().filter(|&&g| g == Group::First).count();
        let n2 = labels.len() - n1;
        if n1 == 0 || n2 == 0 {
            return Err(TwoSampleError::EmptyGroup { n1, n2 });
        }
        Ok(LabeledSample { graph, labels, n1, n2 })
    }

    pub fn group_sizes(&self) -> (usize, usize) {
        (self.n1, self.n2)
    }

    /// The raw statistic: sum over ordered pairs of (A+_ij + A+_ji) b_ij,
    /// i.e. twice the number of directed edges crossing the labeling.
    pub fn cross_count(&self) -> Result<u64, TwoSampleError> {
        Ok(2 * self.directed_crossings(&self.labels)?)
    }

    fn directed_crossings(&self, labels: &[Group]) -> Result<u64, TwoSampleError> {
        let mut crossings = 0u64;
        for (pi, pj) in self.graph.edge_positions()? {
            if labels[pi] != labels[pj] {
                crossings += 1;
            }
        }
        Ok(crossings)
    }

    /// Exact expectation and variance of the statistic under uniform random
    /// relabeling with the group sizes fixed.
    pub fn moments(&self) -> Result<Moments, TwoSampleError> {
        let n = self.graph.len();
        if n < 4 {
            return Err(TwoSampleError::TooSmall(n));
        }
        let f = self.graph.functionals()?;
        let k = f.k as f64;
        let nf = n as f64;
        let n1 = self.n1 as f64;
        let n2 = self.n2 as f64;

        let expectation = 4.0 * k * n1 * n2 / (nf - 1.0);

        let mutual = f.mutual_sum as f64;
        // The variance formula's three-index sum runs over all (i, j, l)
        // including j = l, which adds one edge count per edge on top of the
        // distinct-pair shared-neighbor sum.
        let shared_all = f.shared_sum as f64 + nf * k;
        let h = 4.0 * (n1 - 1.0) * (n2 - 1.0) / ((nf - 2.0) * (nf - 3.0));
        let variance = 4.0 * n1 * n2 / (nf - 1.0)
            * (h * (mutual / nf + k - 2.0 * k * k / (nf - 1.0))
                + (1.0 - h) * (shared_all / nf - k * k));
        Ok(Moments { expectation, variance })
    }

    /// Standardized score, negated so separation scores positive.
    pub fn z_score(&self) -> Result<f64, TwoSampleError> {
        Ok(self.summary()?.z)
    }

    pub fn summary(&self) -> Result<TestSummary, TwoSampleError> {
        let statistic = self.cross_count()?;
        let m = self.moments()?;
        if m.variance <= 0.0 {
            return Err(TwoSampleError::DegenerateVariance);
        }
        let z = -(statistic as f64 - m.expectation) / m.variance.sqrt();
        Ok(TestSummary {
            statistic,
            expectation: m.expectation,
            variance: m.variance,
            z,
        })
    }

    /// Monte Carlo permutation p-value: the fraction of random relabelings
    /// whose statistic is at most the observed one (small statistic means
    /// separation), with the observed labeling counted once.
    pub fn permutation_pvalue(&self, draws: usize, seed: u64) -> Result<f64, TwoSampleError> {
        let observed = self.cross_count()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels = self.labels.clone();
        let mut at_most = 0u64;
        for _ in 0..draws {
            labels.shuffle(&mut rng);
            if 2 * self.directed_crossings(&labels)? <= observed {
                at_most += 1;
            }
        }
        Ok((at_most + 1) as f64 / (draws + 1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DistanceSpec, Observation};

    fn graph_of(points: &[f64], k: usize) -> WindowGraph {
        let mut g = WindowGraph::sliding(points.len(), k, DistanceSpec::Euclidean).unwrap();
        for (i, &x) in points.iter().enumerate() {
            g.push(Observation::vector(i as u64, vec![x])).unwrap();
        }
        g
    }

    fn labels(pattern: &[u8]) -> Vec<Group> {
        pattern
            .iter()
            .map(|&b| if b == 1 { Group::First } else { Group::Second })
            .collect()
    }

    #[test]
    fn crossing_count_by_hand() {
        // Edges: 0->1, 1->0, 2->1, 3->2; only 2->1 crosses (1,1,2,2).
        let g = graph_of(&[0.0, 1.0, 3.0, 7.0], 1);
        let s = LabeledSample::new(&g, labels(&[1, 1, 2, 2])).unwrap();
        assert_eq!(s.cross_count().unwrap(), 2);
    }

    #[test]
    fn empty_group_rejected() {
        let g = graph_of(&[0.0, 1.0, 3.0, 7.0], 1);
        let err = LabeledSample::new(&g, labels(&[1, 1, 1, 1])).err().unwrap();
        assert!(matches!(err, TwoSampleError::EmptyGroup { n1: 4, n2: 0 }));
    }

    #[test]
    fn complete_graph_statistic_and_degeneracy() {
        // k = n-1: every cross pair contributes both directions, so the
        // statistic is 4 n1 n2 for every labeling and the variance is zero.
        let g = graph_of(&[0.0, 1.0, 3.0, 7.0, 9.0], 4);
        let s = LabeledSample::new(&g, labels(&[1, 1, 2, 2, 2])).unwrap();
        assert_eq!(s.cross_count().unwrap(), 4 * 2 * 3);
        let m = s.moments().unwrap();
        assert!(m.variance.abs() < 1e-9);
        assert!(matches!(
            s.summary(),
            Err(TwoSampleError::DegenerateVariance)
        ));
    }

    #[test]
    fn expectation_for_balanced_four_points() {
        let g = graph_of(&[0.0, 1.0, 3.0, 7.0], 1);
        let s = LabeledSample::new(&g, labels(&[1, 2, 1, 2])).unwrap();
        let m = s.moments().unwrap();
        assert!((m.expectation - 16.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn label_swap_symmetry() {
        let g = graph_of(&[0.0, 1.5, 3.0, 4.1, 7.0, 8.2, 9.0], 2);
        let a = LabeledSample::new(&g, labels(&[1, 1, 2, 1, 2, 2, 2])).unwrap();
        let b = LabeledSample::new(&g, labels(&[2, 2, 1, 2, 1, 1, 1])).unwrap();
        assert_eq!(a.cross_count().unwrap(), b.cross_count().unwrap());
        assert_eq!(a.moments().unwrap(), b.moments().unwrap());
    }

    #[test]
    fn z_sign_convention() {
        // Two tight clusters far apart: every point's neighbors stay within
        // its own cluster, the statistic collapses to zero, Z is positive.
        let g = graph_of(&[0.0, 0.1, 0.2, 100.0, 100.1, 100.2], 2);
        let s = LabeledSample::new(&g, labels(&[1, 1, 1, 2, 2, 2])).unwrap();
        assert_eq!(s.cross_count().unwrap(), 0);
        assert!(s.z_score().unwrap() > 0.0);
    }

    #[test]
    fn permutation_pvalue_detects_separation() {
        let pts: Vec<f64> = (0..10)
            .map(|i| if i < 5 { i as f64 * 0.1 } else { 50.0 + i as f64 * 0.1 })
            .collect();
        let g = graph_of(&pts, 2);
        let s = LabeledSample::new(&g, labels(&[1, 1, 1, 1, 1, 2, 2, 2, 2, 2])).unwrap();
        let p = s.permutation_pvalue(400, 7).unwrap();
        assert!(p < 0.05, "p = {p}");
        // A shuffled labeling should not look significant.
        let t = LabeledSample::new(&g, labels(&[1, 2, 1, 2, 1, 2, 1, 2, 1, 2])).unwrap();
        let p2 = t.permutation_pvalue(400, 7).unwrap();
        assert!(p2 > 0.05, "p2 = {p2}");
    }
}
