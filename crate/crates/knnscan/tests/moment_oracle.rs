//! Exhaustive permutation oracles for the window statistic's moments.
//!
//! For small windows every group assignment can be enumerated, so the exact
//! permutation distribution of the cross statistic is computable by brute
//! force on graphs built by the real pipeline. The closed-form expectation,
//! the two variance forms, and the third-moment formula must reproduce those
//! enumerated values to near machine precision; nothing here is sampled.

use itertools::Itertools;
use knnscan::arl::{gamma, third_moment_r, FunctionalEstimates};
use knnscan::data::{DistanceSpec, Observation};
use knnscan::nngraph::WindowGraph;
use knnscan::scan::{e_r, var_r, var_r_pq, VarianceMode};
use knnscan::twosample::{Group, LabeledSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-9;

/// A ready window over random plane points; generic positions, so neighbor
/// ties have probability zero and the graph is the pipeline's own output.
fn random_graph(l: usize, k: usize, seed: u64) -> WindowGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = WindowGraph::sliding(l, k, DistanceSpec::Euclidean).unwrap();
    for i in 0..l {
        let v: Vec<f64> = (0..2).map(|_| rng.random()).collect();
        g.push(Observation::vector(i as u64 + 1, v)).unwrap();
    }
    assert!(g.is_ready());
    g
}

/// The full permutation distribution of R at group size x: one value per
/// subset, where each directed edge across the boundary counts twice.
fn enumerate_r(edges: &[(usize, usize)], l: usize, x: usize) -> Vec<f64> {
    (0..l)
        .combinations(x)
        .map(|subset| {
            let mut first = vec![false; l];
            for &i in &subset {
                first[i] = true;
            }
            let crossings = edges.iter().filter(|(a, b)| first[*a] != first[*b]).count();
            (2 * crossings) as f64
        })
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn close(label: &str, got: f64, want: f64) {
    let scale = want.abs().max(1.0);
    assert!(
        (got - want).abs() <= TOL * scale,
        "{label}: formula {got} vs enumeration {want} (diff {})",
        got - want
    );
}

#[test]
fn enumerated_moments_match_the_closed_forms() {
    for &l in &[6usize, 8, 9] {
        for &k in &[1usize, 2] {
            for seed in 0..3u64 {
                let g = random_graph(l, k, 1_000 * l as u64 + 10 * k as u64 + seed);
                let edges = g.edge_positions().unwrap();
                assert_eq!(edges.len(), l * k);
                let f = g.functionals().unwrap();
                let est = FunctionalEstimates::from_window(&f);

                for x in 2..=l - 2 {
                    let rs = enumerate_r(&edges, l, x);
                    let m1 = mean(&rs);
                    let var = mean(&rs.iter().map(|r| (r - m1) * (r - m1)).collect::<Vec<_>>());
                    let tag = format!("L={l} k={k} seed={seed} x={x}");

                    close(&format!("{tag} E(R)"), e_r(k, l, x).unwrap(), m1);
                    close(
                        &format!("{tag} Var(R) from counts"),
                        var_r(&f, l, x, VarianceMode::Conditional).unwrap(),
                        var,
                    );
                    // The per-node-rate form is the same number on one graph.
                    close(
                        &format!("{tag} Var(R) from rates"),
                        var_r_pq(k, l, x, est.pkl, est.qkl).unwrap(),
                        var,
                    );

                    if x >= 3 && x + 3 <= l {
                        let m3 = mean(&rs.iter().map(|r| r * r * r).collect::<Vec<_>>());
                        close(
                            &format!("{tag} E(R^3)"),
                            third_moment_r(&est, l, x).unwrap(),
                            m3,
                        );
                        // Skewness follows from the three enumerated moments.
                        let g3 = (m1.powi(3) + 3.0 * m1 * var - m3) / var.powf(1.5);
                        close(&format!("{tag} gamma"), gamma(&est, l, x).unwrap(), g3);
                    }
                }
            }
        }
    }
}

/// Smallest closed-form check a reader can confirm by hand: four points,
/// one neighbor each, balanced groups, E(R) = 4 * 1 * 2 * 2 / 3.
#[test]
fn four_point_expectation_is_sixteen_thirds() {
    let g = random_graph(4, 1, 7);
    let edges = g.edge_positions().unwrap();
    let rs = enumerate_r(&edges, 4, 2);
    assert_eq!(rs.len(), 6);
    close("E(R) at L=4", 16.0 / 3.0, mean(&rs));
    close("e_r at L=4", e_r(1, 4, 2).unwrap(), 16.0 / 3.0);
    close(
        "Var(R) at L=4",
        var_r(&g.functionals().unwrap(), 4, 2, VarianceMode::Conditional).unwrap(),
        mean(&rs.iter().map(|r| (r - 16.0 / 3.0) * (r - 16.0 / 3.0)).collect::<Vec<_>>()),
    );
}

/// The labeled two-sample view must agree with the same enumeration: its
/// moments are the x = n1 slice of the permutation distribution.
#[test]
fn two_sample_moments_match_the_enumeration() {
    for &(n1, n2, k) in &[(3usize, 5usize, 1usize), (4, 4, 2), (2, 7, 1)] {
        let l = n1 + n2;
        let g = random_graph(l, k, 40 + l as u64 + k as u64);
        let edges = g.edge_positions().unwrap();
        let rs = enumerate_r(&edges, l, n1);
        let m1 = mean(&rs);
        let var = mean(&rs.iter().map(|r| (r - m1) * (r - m1)).collect::<Vec<_>>());

        let labels: Vec<Group> = (0..l)
            .map(|i| if i < n1 { Group::First } else { Group::Second })
            .collect();
        let sample = LabeledSample::new(&g, labels).unwrap();
        let moments = sample.moments().unwrap();
        close("two-sample E", moments.expectation, m1);
        close("two-sample Var", moments.variance, var);

        // The realized statistic is one point of the enumerated support.
        let x = sample.cross_count().unwrap() as f64;
        assert!(rs.contains(&x), "realized {x} not in the support");

        // And the reported z is that point standardized, sign flipped so
        // that fewer cross edges means stronger evidence.
        let z = sample.summary().unwrap().z;
        close("two-sample z", z, -(x - m1) / var.sqrt());
    }
}

/// Frozen corner of the third-moment coefficients: at L=6, x=3 the
/// formula's last term has weight 8*3*2*1*3*2*1/(6*5*4*3*2*1) = 0.4.
/// A graph whose every triple is three mutual edges would be needed to see
/// the coefficient alone, so instead freeze the whole moment on one fixed
/// integer geometry where the enumeration is easy to audit.
#[test]
fn third_moment_on_a_frozen_line() {
    // Six points on a line; 1-NN edges pair up neighbors deterministically:
    // 0.0, 1.0, 2.5, 4.5, 7.0, 10.0 -> each points at its left neighbor
    // except the first two, which point at each other... the enumeration
    // below does not care, it just needs a fixed, tie-free geometry.
    let coords = [0.0, 1.0, 2.5, 4.5, 7.0, 10.0];
    let mut g = WindowGraph::sliding(6, 1, DistanceSpec::Euclidean).unwrap();
    for (i, &c) in coords.iter().enumerate() {
        g.push(Observation::vector(i as u64 + 1, vec![c])).unwrap();
    }
    let edges = g.edge_positions().unwrap();
    let rs = enumerate_r(&edges, 6, 3);
    let est = FunctionalEstimates::from_window(&g.functionals().unwrap());
    close(
        "frozen third moment",
        third_moment_r(&est, 6, 3).unwrap(),
        mean(&rs.iter().map(|r| r * r * r).collect::<Vec<_>>()),
    );
}
