//! Named networks and seeded random instances shared by tests, the `verify`
//! suites and the acceptance harness.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::loss::Labels;
use crate::netgraph::{Batch, NetworkTopology};

/// Layered shapes used for generic-rank checks.
pub const RANK_SHAPES: [&[usize]; 5] = [&[2, 2, 1], &[3, 2, 4, 1], &[2, 3, 3, 2], &[4, 4, 1], &[2, 2, 2, 1]];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The 2-2-2-1 network with 10 weights and 8 paths. Edge `k` (0-based) is
/// the paper-style `w_{k+1}`: `w1..w4` into the first hidden layer, `w5..w8`
/// into the second, `w9, w10` into the output.
pub fn figure2() -> NetworkTopology {
    NetworkTopology::layered(&[2, 2, 2, 1], false).expect("valid layered shape")
}

pub fn figure2_with_weights(w: &[f64; 10]) -> (NetworkTopology, Vec<f64>) {
    (figure2(), w.to_vec())
}

/// `x -> h -> y`.
pub fn chain() -> NetworkTopology {
    NetworkTopology::layered(&[1, 1, 1], false).expect("valid layered shape")
}

pub fn uniform_weights(topology: &NetworkTopology, rng: &mut impl Rng, lo: f64, hi: f64) -> Vec<f64> {
    (0..topology.num_edges()).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn uniform_inputs(n: usize, dim: usize, rng: &mut impl Rng, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, dim, |_, _| rng.random_range(lo..hi))
}

/// Layered net with mixed-sign weights in `(-1.5, 1.5)` and `n` inputs in
/// `(-2, 2)`.
pub fn random_instance(widths: &[usize], bias: bool, seed: u64, n: usize) -> (NetworkTopology, Vec<f64>, DMatrix<f64>) {
    let t = NetworkTopology::layered(widths, bias).expect("valid layered shape");
    let mut r = rng(seed);
    let w = uniform_weights(&t, &mut r, -1.5, 1.5);
    let x = uniform_inputs(n, widths[0], &mut r, -2.0, 2.0);
    (t, w, x)
}

/// [`random_instance`] plus real-valued targets in `(-1, 1)`.
pub fn random_labeled(widths: &[usize], bias: bool, seed: u64, n: usize) -> (NetworkTopology, Vec<f64>, Batch) {
    let (t, w, x) = random_instance(widths, bias, seed, n);
    let mut r = rng(seed ^ 0x5eed);
    let y = uniform_inputs(n, t.outputs().len(), &mut r, -1.0, 1.0);
    let batch = Batch::new(x, Some(Labels::Targets(y))).expect("finite batch");
    (t, w, batch)
}

/// Draws instances until every internal node is active on at least one and
/// inactive on at least one example, and no `|z|` is within `margin` of a
/// kink relative to the largest `|z|`. Returns the seed offset used too.
pub fn random_instance_away_from_kinks(
    widths: &[usize],
    bias: bool,
    seed: u64,
    n: usize,
    margin: f64,
) -> (NetworkTopology, Vec<f64>, DMatrix<f64>) {
    for attempt in 0..10_000u64 {
        let (t, w, x) = random_instance(widths, bias, seed.wrapping_mul(10_007).wrapping_add(attempt), n);
        let z = crate::netgraph::forward(&t, &w, &x).expect("finite instance").z;
        let scale = z.amax();
        let ok = t.internal_nodes().all(|v| {
            let col = z.column(v);
            col.iter().any(|&a| a > 0.0) && col.iter().any(|&a| a < 0.0) && col.iter().all(|&a| a.abs() >= margin * scale)
        });
        if ok {
            return (t, w, x);
        }
    }
    panic!("no admissible instance found for shape {widths:?}");
}

/// A 2-2-1 network with positive weights and a fixed batch on which both
/// hidden units are active. Used to show that plain SGD and SGD on
/// normalized weights are not invariant to node-wise rescaling.
pub fn negative_control_221() -> (NetworkTopology, Vec<f64>, Batch) {
    let t = NetworkTopology::layered(&[2, 2, 1], false).expect("valid layered shape");
    let w = vec![1.0, 0.5, 0.3, 1.2, 0.8, -0.6];
    let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.2, 0.3, 1.0, 0.8, 0.9, 0.5, 0.1]);
    let y = DMatrix::from_row_slice(4, 1, &[1.0, -1.0, 0.5, 0.0]);
    (t, w, Batch::new(x, Some(Labels::Targets(y))).expect("finite batch"))
}

/// A 2-2-1 network whose first hidden unit is dead on the positive orthant
/// (all incoming weights negative), with other weights in `[0.5, 1.5]`.
pub fn dead_unit_221(seed: u64) -> (NetworkTopology, Vec<f64>, usize) {
    let t = NetworkTopology::layered(&[2, 2, 1], false).expect("valid layered shape");
    let mut r = rng(seed);
    let mut w = uniform_weights(&t, &mut r, 0.5, 1.5);
    let dead = t.node_index("h1_0").expect("node exists");
    for &e in t.incoming(dead) {
        w[e] = -w[e];
    }
    (t, w, dead)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figure2_edges_follow_one_based_numbering() {
        let t = figure2();
        let name = |e: usize| (t.id(t.edge(e).src).to_string(), t.id(t.edge(e).dst).to_string());
        assert_eq!(name(0), ("x0".into(), "h1_0".into()));
        assert_eq!(name(1), ("x1".into(), "h1_0".into()));
        assert_eq!(name(4), ("h1_0".into(), "h2_0".into()));
        assert_eq!(name(6), ("h1_0".into(), "h2_1".into()));
        assert_eq!(name(8), ("h2_0".into(), "y0".into()));
        assert_eq!(name(9), ("h2_1".into(), "y0".into()));
    }

    #[test]
    fn away_from_kinks_has_mixed_patterns() {
        let (t, w, x) = random_instance_away_from_kinks(&[2, 3, 1], true, 4, 16, 1e-3);
        let z = crate::netgraph::forward(&t, &w, &x).unwrap().z;
        for v in t.internal_nodes() {
            assert!(z.column(v).iter().any(|&a| a > 0.0));
        }
    }
}
