//! Observation model and distance computation.
//!
//! Every other module consumes observations through [`distance`], so the
//! contract here is deliberately small: payloads are either dense real
//! vectors or opaque keys resolved against a precomputed table, and every
//! metric is symmetric, nonnegative, and deterministic.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

/// What an observation carries: a dense vector, or a key into a
/// precomputed distance table.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Vector(Vec<f64>),
    Key(String),
}

impl Payload {
    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            Payload::Vector(v) => Some(v),
            Payload::Key(_) => None,
        }
    }
}

/// One time-indexed observation. Indices within a stream are strictly
/// increasing with no gaps; all vector payloads share one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub index: u64,
    pub payload: Payload,
}

impl Observation {
    pub fn vector(index: u64, values: Vec<f64>) -> Self {
        Observation {
            index,
            payload: Payload::Vector(values),
        }
    }

    pub fn keyed(index: u64, key: impl Into<String>) -> Self {
        Observation {
            index,
            payload: Payload::Key(key.into()),
        }
    }
}

/// Symmetric lookup table for precomputed distances, keyed by observation
/// key pairs. Pairs are stored under a canonical (sorted) order.
#[derive(Debug, Clone, Default)]
pub struct DistanceTable {
    entries: HashMap<(String, String), f64>,
}

impl DistanceTable {
    pub fn new() -> Self {
        Self::default()
    }

    fn canonical(a: &str, b: &str) -> (String, String) {
        if a <= b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        }
    }

    pub fn insert(&mut self, a: &str, b: &str, d: f64) {
        self.entries.insert(Self::canonical(a, b), d);
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        if a == b {
            return Some(0.0);
        }
        self.entries.get(&Self::canonical(a, b)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Distance metric selection. Adjacency payloads are flattened row-major
/// 0/1 vectors of length `side * side`.
#[derive(Debug, Clone)]
pub enum DistanceSpec {
    /// Plain L2 distance between vectors.
    Euclidean,
    /// Each vector is divided by its (positive) sum, then L2.
    NormalizedCountL2,
    /// Squared Frobenius difference of two adjacency matrices: the number
    /// of differing entries for 0/1 matrices.
    AdjacencyFrobenius { side: usize },
    /// Squared Frobenius difference divided by the geometric mean of the
    /// two Frobenius norms.
    AdjacencyFrobeniusNormalized { side: usize },
    /// Lookup in a complete pairwise table by observation key.
    Precomputed { table: Arc<DistanceTable> },
}

#[derive(Debug, Error, PartialEq)]
pub enum DistanceError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("observation {index}: normalized-count-l2 requires a positive vector sum")]
    NonPositiveSum { index: u64 },
    #[error("observation {index}: normalized adjacency distance requires a nonzero matrix")]
    ZeroAdjacency { index: u64 },
    #[error("observation {index}: adjacency payload has length {len}, expected {expected}")]
    AdjacencyShape {
        index: u64,
        len: usize,
        expected: usize,
    },
    #[error("no precomputed distance for pair ({a}, {b})")]
    MissingPair { a: String, b: String },
    #[error("observation {index}: payload kind does not match the metric")]
    PayloadKind { index: u64 },
}

fn vector_of<'a>(obs: &'a Observation) -> Result<&'a [f64], DistanceError> {
    obs.payload
        .as_vector()
        .ok_or(DistanceError::PayloadKind { index: obs.index })
}

fn squared_l2(a: &[f64], b: &[f64]) -> Result<f64, DistanceError> {
    if a.len() != b.len() {
        return Err(DistanceError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc)
}

fn check_adjacency(obs: &Observation, side: usize) -> Result<&[f64], DistanceError> {
    let v = vector_of(obs)?;
    let expected = side * side;
    if v.len() != expected {
        return Err(DistanceError::AdjacencyShape {
            index: obs.index,
            len: v.len(),
            expected,
        });
    }
    Ok(v)
}

/// Distance between two observations under `spec`. Symmetric, nonnegative,
/// deterministic; zero iff the payloads are identical under the metric.
pub fn distance(a: &Observation, b: &Observation, spec: &DistanceSpec) -> Result<f64, DistanceError> {
    match spec {
        DistanceSpec::Euclidean => Ok(squared_l2(vector_of(a)?, vector_of(b)?)?.sqrt()),
        DistanceSpec::NormalizedCountL2 => {
            let va = vector_of(a)?;
            let vb = vector_of(b)?;
            if va.len() != vb.len() {
                return Err(DistanceError::DimensionMismatch {
                    left: va.len(),
                    right: vb.len(),
                });
            }
            let sa: f64 = va.iter().sum();
            let sb: f64 = vb.iter().sum();
            if !(sa > 0.0) {
                return Err(DistanceError::NonPositiveSum { index: a.index });
            }
            if !(sb > 0.0) {
                return Err(DistanceError::NonPositiveSum { index: b.index });
            }
            let mut acc = 0.0;
            for (x, y) in va.iter().zip(vb) {
                let d = x / sa - y / sb;
                acc += d * d;
            }
            Ok(acc.sqrt())
        }
        DistanceSpec::AdjacencyFrobenius { side } => {
            let va = check_adjacency(a, *side)?;
            let vb = check_adjacency(b, *side)?;
            squared_l2(va, vb)
        }
        DistanceSpec::AdjacencyFrobeniusNormalized { side } => {
            let va = check_adjacency(a, *side)?;
            let vb = check_adjacency(b, *side)?;
            let na: f64 = va.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 {
                return Err(DistanceError::ZeroAdjacency { index: a.index });
            }
            if nb == 0.0 {
                return Err(DistanceError::ZeroAdjacency { index: b.index });
            }
            Ok(squared_l2(va, vb)? / (na * nb))
        }
        DistanceSpec::Precomputed { table } => match (&a.payload, &b.payload) {
            (Payload::Key(ka), Payload::Key(kb)) => {
                table.get(ka, kb).ok_or_else(|| DistanceError::MissingPair {
                    a: ka.clone(),
                    b: kb.clone(),
                })
            }
            (Payload::Key(_), _) => Err(DistanceError::PayloadKind { index: b.index }),
            _ => Err(DistanceError::PayloadKind { index: a.index }),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn vec_obs(index: u64, v: &[f64]) -> Observation {
        Observation::vector(index, v.to_vec())
    }

    #[test]
    fn euclidean_pythagorean() {
        let a = vec_obs(0, &[0.0, 0.0]);
        let b = vec_obs(1, &[3.0, 4.0]);
        assert_eq!(distance(&a, &b, &DistanceSpec::Euclidean).unwrap(), 5.0);
    }

    #[test]
    fn euclidean_dimension_mismatch() {
        let a = vec_obs(0, &[0.0, 0.0]);
        let b = vec_obs(1, &[1.0]);
        assert_eq!(
            distance(&a, &b, &DistanceSpec::Euclidean),
            Err(DistanceError::DimensionMismatch { left: 2, right: 1 })
        );
    }

    #[test]
    fn adjacency_identical_is_zero() {
        let m = vec_obs(0, &[0.0, 1.0, 1.0, 0.0]);
        let spec = DistanceSpec::AdjacencyFrobenius { side: 2 };
        assert_eq!(distance(&m, &m, &spec).unwrap(), 0.0);
    }

    #[test]
    fn adjacency_counts_differing_entries() {
        let a = vec_obs(0, &[1.0, 0.0, 0.0, 1.0]);
        let b = vec_obs(1, &[0.0, 1.0, 0.0, 1.0]);
        let spec = DistanceSpec::AdjacencyFrobenius { side: 2 };
        assert_eq!(distance(&a, &b, &spec).unwrap(), 2.0);
    }

    #[test]
    fn normalized_adjacency_worked_example() {
        // 4x4 matrices with disjoint supports: 2 edges vs 8 edges differ in
        // 10 entries; the norms are sqrt(2) and sqrt(8).
        let mut a = vec![0.0; 16];
        a[1] = 1.0;
        a[2] = 1.0;
        let mut b = vec![0.0; 16];
        for i in [4, 5, 6, 7, 8, 9, 10, 11] {
            b[i] = 1.0;
        }
        let oa = Observation::vector(0, a);
        let ob = Observation::vector(1, b);
        let spec = DistanceSpec::AdjacencyFrobeniusNormalized { side: 4 };
        let d = distance(&oa, &ob, &spec).unwrap();
        assert!((d - 2.5).abs() < 1e-12, "got {d}");
    }

    #[test]
    fn normalized_adjacency_rejects_zero_matrix() {
        let a = vec_obs(0, &[0.0; 4]);
        let b = vec_obs(1, &[1.0, 0.0, 0.0, 0.0]);
        let spec = DistanceSpec::AdjacencyFrobeniusNormalized { side: 2 };
        assert_eq!(
            distance(&a, &b, &spec),
            Err(DistanceError::ZeroAdjacency { index: 0 })
        );
    }

    #[test]
    fn normalized_count_rejects_zero_sum() {
        let a = vec_obs(0, &[0.0, 0.0]);
        let b = vec_obs(1, &[1.0, 2.0]);
        assert_eq!(
            distance(&a, &b, &DistanceSpec::NormalizedCountL2),
            Err(DistanceError::NonPositiveSum { index: 0 })
        );
    }

    #[test]
    fn normalized_count_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let v: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..5.0)).collect();
            let w: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..5.0)).collect();
            let c: f64 = rng.random_range(0.5..10.0);
            let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
            let d1 = distance(
                &vec_obs(0, &v),
                &vec_obs(1, &w),
                &DistanceSpec::NormalizedCountL2,
            )
            .unwrap();
            let d2 = distance(
                &vec_obs(0, &scaled),
                &vec_obs(1, &w),
                &DistanceSpec::NormalizedCountL2,
            )
            .unwrap();
            assert!((d1 - d2).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetry_across_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let specs = [
            DistanceSpec::Euclidean,
            DistanceSpec::NormalizedCountL2,
            DistanceSpec::AdjacencyFrobenius { side: 3 },
            DistanceSpec::AdjacencyFrobeniusNormalized { side: 3 },
        ];
        for _ in 0..200 {
            let v: Vec<f64> = (0..9).map(|_| f64::from(rng.random_range(0..2u32))).collect();
            let w: Vec<f64> = (0..9).map(|_| f64::from(rng.random_range(0..2u32))).collect();
            for spec in &specs {
                let a = vec_obs(0, &v);
                let b = vec_obs(1, &w);
                let ab = distance(&a, &b, spec);
                let ba = distance(&b, &a, spec);
                match (ab, ba) {
                    (Ok(x), Ok(y)) => {
                        assert_eq!(x, y);
                        assert!(x >= 0.0);
                    }
                    (Err(_), Err(_)) => {}
                    other => panic!("asymmetric error behavior: {other:?}"),
                }
            }
        }
    }

    #[test]
    fn precomputed_lookup_and_missing_pair() {
        let mut table = DistanceTable::new();
        table.insert("a", "b", 1.5);
        let spec = DistanceSpec::Precomputed {
            table: Arc::new(table),
        };
        let a = Observation::keyed(0, "a");
        let b = Observation::keyed(1, "b");
        let c = Observation::keyed(2, "c");
        assert_eq!(distance(&a, &b, &spec).unwrap(), 1.5);
        assert_eq!(distance(&b, &a, &spec).unwrap(), 1.5);
        assert_eq!(
            distance(&a, &c, &spec),
            Err(DistanceError::MissingPair {
                a: "a".into(),
                b: "c".into()
            })
        );
    }
}
