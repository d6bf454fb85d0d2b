//! Path view of a ReLU network: `f(x)[v] = sum_{p ending at v} pi_p(w) * phi_p(x)`
//! with `pi_p` the product of weights on `p` and `phi_p(x) = g_p(x) * x[head(p)]`.
//!
//! The path-Jacobian `J[p, e] = d pi_p / d w_e` governs which weight
//! directions can change the function; its generic rank is
//! `|E| - |V_internal|`, one lost dimension per node-wise rescaling.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{backprop, forward, NetworkTopology, NodeKind};

pub const DEFAULT_PATH_LIMIT: usize = 100_000;
pub const DEFAULT_RANK_TOL: f64 = 1e-8;
/// Probes with some `|z_v|` below this are redrawn.
pub const KINK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Path {
    pub edges: Vec<usize>,
    pub head: usize,
    pub tail: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathSet {
    pub paths: Vec<Path>,
    pub num_edges: usize,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Indices of the paths ending at output node `v`.
    pub fn ending_at(&self, v: usize) -> Vec<usize> {
        (0..self.paths.len()).filter(|&p| self.paths[p].tail == v).collect()
    }
}

/// Number of source-to-output paths, saturating.
pub fn count_paths(topology: &NetworkTopology) -> u128 {
    let nv = topology.num_nodes();
    let mut to_output = vec![0u128; nv];
    for v in (0..nv).rev() {
        to_output[v] = if topology.kind(v) == NodeKind::Output {
            1
        } else {
            topology
                .outgoing(v)
                .iter()
                .fold(0u128, |acc, &e| acc.saturating_add(to_output[topology.edge(e).dst]))
        };
    }
    (0..nv)
        .filter(|&v| topology.kind(v).is_source())
        .fold(0u128, |acc, v| acc.saturating_add(to_output[v]))
}

/// All source-to-output paths, sorted lexicographically by edge indices.
pub fn enumerate_paths(topology: &NetworkTopology, limit: usize) -> Result<PathSet> {
    let count = count_paths(topology);
    if count > limit as u128 {
        return Err(Error::PathLimit { count, limit });
    }
    let mut paths = Vec::with_capacity(count as usize);
    let mut stack: Vec<(usize, usize, Vec<usize>)> = (0..topology.num_nodes())
        .filter(|&v| topology.kind(v).is_source())
        .map(|v| (v, v, Vec::new()))
        .collect();
    while let Some((head, node, edges)) = stack.pop() {
        if topology.kind(node) == NodeKind::Output {
            paths.push(Path { edges, head, tail: node });
            continue;
        }
        for &e in topology.outgoing(node) {
            let mut next = edges.clone();
            next.push(e);
            stack.push((head, topology.edge(e).dst, next));
        }
    }
    paths.sort_by(|a, b| a.edges.cmp(&b.edges));
    Ok(PathSet { paths, num_edges: topology.num_edges() })
}

/// `pi_p(w)` for every path.
pub fn path_values(path_set: &PathSet, weights: &[f64]) -> Vec<f64> {
    path_set.paths.iter().map(|p| p.edges.iter().map(|&e| weights[e]).product()).collect()
}

/// `phi(x)` for a single input.
pub fn path_features(path_set: &PathSet, topology: &NetworkTopology, weights: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let inputs = DMatrix::from_row_slice(1, x.len(), x);
    let acts = forward(topology, weights, &inputs)?;
    Ok(path_set
        .paths
        .iter()
        .map(|p| {
            let open = p.edges.iter().all(|&e| {
                let v = topology.edge(e).dst;
                topology.kind(v) != NodeKind::Internal || acts.z[(0, v)] > 0.0
            });
            if open {
                acts.h[(0, p.head)]
            } else {
                0.0
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathJacobian {
    /// `|Pi| x |E|`, `J[p, e] = d pi_p / d w_e`.
    pub j: DMatrix<f64>,
    pub pi: Vec<f64>,
    /// 0/1 path-edge incidence, `|Pi| x |E|`.
    pub incidence: DMatrix<f64>,
}

impl PathJacobian {
    /// Rows of `J` for the given paths.
    pub fn rows(&self, paths: &[usize]) -> DMatrix<f64> {
        self.j.select_rows(paths)
    }
}

/// Entries are products over `E(p) \ {e}`, so zero weights are fine.
pub fn path_jacobian(path_set: &PathSet, weights: &[f64]) -> PathJacobian {
    let np = path_set.len();
    let ne = path_set.num_edges;
    let mut j = DMatrix::zeros(np, ne);
    let mut incidence = DMatrix::zeros(np, ne);
    for (p, path) in path_set.paths.iter().enumerate() {
        for (k, &e) in path.edges.iter().enumerate() {
            incidence[(p, e)] = 1.0;
            j[(p, e)] = path
                .edges
                .iter()
                .enumerate()
                .filter(|&(m, _)| m != k)
                .map(|(_, &f)| weights[f])
                .product();
        }
    }
    PathJacobian { j, pi: path_values(path_set, weights), incidence }
}

/// Singular values above `rel_tol * sigma_max`.
pub fn numerical_rank(matrix: &DMatrix<f64>, rel_tol: f64) -> usize {
    if matrix.is_empty() {
        return 0;
    }
    let sv = singular_values(matrix);
    let max = sv.iter().fold(0.0_f64, |m, &s| m.max(s));
    if !(max > 0.0) {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// Singular values via the square `R` factor of a QR decomposition. The
/// direct SVD of some tall, finite matrices returns NaN; the reduced problem
/// has the same singular values and has not been seen to fail. A symmetric
/// eigen-decomposition of `R^T R` is the last resort.
fn singular_values(matrix: &DMatrix<f64>) -> Vec<f64> {
    let reduced = if matrix.nrows() > matrix.ncols() {
        matrix.clone().qr().r()
    } else if matrix.ncols() > matrix.nrows() {
        matrix.transpose().qr().r()
    } else {
        matrix.clone()
    };
    let sv = nalgebra::SVD::new_unordered(reduced.clone(), false, false).singular_values;
    if sv.iter().all(|s| s.is_finite()) {
        return sv.iter().copied().collect();
    }
    let gram = reduced.transpose() * &reduced;
    gram.symmetric_eigenvalues().iter().map(|&l| l.max(0.0).sqrt()).collect()
}

/// `|E| - |V_internal|`.
pub fn generic_rank_prediction(topology: &NetworkTopology) -> usize {
    topology.num_edges().saturating_sub(topology.num_internal())
}

/// Per-output gradient rows `d f(x)[k] / dw` for one input.
pub fn output_jacobian(topology: &NetworkTopology, weights: &[f64], x: &[f64]) -> Result<DMatrix<f64>> {
    let inputs = DMatrix::from_row_slice(1, x.len(), x);
    let acts = forward(topology, weights, &inputs)?;
    let k_out = topology.outputs().len();
    let mut jac = DMatrix::zeros(k_out, topology.num_edges());
    for k in 0..k_out {
        let mut delta = DMatrix::zeros(1, k_out);
        delta[(0, k)] = 1.0;
        let row = backprop(topology, weights, &acts, &delta);
        jac.row_mut(k).copy_from_slice(&row);
    }
    Ok(jac)
}

fn stacked_jacobian(topology: &NetworkTopology, weights: &[f64], probes: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k_out = topology.outputs().len();
    let mut stacked = DMatrix::zeros(probes.nrows() * k_out, topology.num_edges());
    for i in 0..probes.nrows() {
        let x: Vec<f64> = probes.row(i).iter().copied().collect();
        let jac = output_jacobian(topology, weights, &x)?;
        stacked.rows_mut(i * k_out, k_out).copy_from(&jac);
    }
    Ok(stacked)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegreesOfFreedom {
    pub d_g: usize,
    pub dim_null: usize,
    pub probe_count: usize,
    pub warning: Option<String>,
}

/// Rank of the per-output Jacobians stacked over `probes`: an estimate of
/// `d_G(w)`, with `dim N(w) = |E| - d_G(w)`.
pub fn degrees_of_freedom(
    topology: &NetworkTopology,
    weights: &[f64],
    probes: &DMatrix<f64>,
    rel_tol: f64,
) -> Result<DegreesOfFreedom> {
    if probes.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let stacked = stacked_jacobian(topology, weights, probes)?;
    let d_g = numerical_rank(&stacked, rel_tol);
    let ne = topology.num_edges();
    let warning = (probes.nrows() < ne)
        .then(|| format!("only {} probes for {ne} weights; d_G may be underestimated", probes.nrows()));
    Ok(DegreesOfFreedom { d_g, dim_null: ne - d_g, probe_count: probes.nrows(), warning })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricSpec {
    /// `m(z, z') = ||z - z'||^2`, Hessian `2 I` at `z = z'`.
    #[default]
    SquaredDistance,
}

impl MetricSpec {
    pub fn hessian(&self, dim: usize) -> DMatrix<f64> {
        match self {
            MetricSpec::SquaredDistance => DMatrix::identity(dim, dim) * 2.0,
        }
    }
}

/// `F(w) = (1/n) sum_i J_i^T H J_i` and its numerical rank `d_{G,D}(w)`.
pub fn distribution_fisher(
    topology: &NetworkTopology,
    weights: &[f64],
    inputs: &DMatrix<f64>,
    metric: MetricSpec,
    rel_tol: f64,
) -> Result<(DMatrix<f64>, usize)> {
    let n = inputs.nrows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let ne = topology.num_edges();
    let hess = metric.hessian(topology.outputs().len());
    let mut f = DMatrix::zeros(ne, ne);
    for i in 0..n {
        let x: Vec<f64> = inputs.row(i).iter().copied().collect();
        let jac = output_jacobian(topology, weights, &x)?;
        f += jac.transpose() * &hess * &jac;
    }
    f /= n as f64;
    let rank = numerical_rank(&f, rel_tol);
    Ok((f, rank))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeRegime {
    /// Standard normal inputs.
    Gaussian,
    /// Absolute values of standard normal inputs.
    PositiveOrthant,
}

/// `count` probe inputs, each redrawn while any internal `|z_v| < KINK_TOL`.
pub fn sample_probes<R: Rng + ?Sized>(
    topology: &NetworkTopology,
    weights: &[f64],
    count: usize,
    regime: ProbeRegime,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let dim = topology.inputs().len();
    let mut probes = DMatrix::zeros(count, dim);
    for i in 0..count {
        let mut accepted = false;
        for _ in 0..1000 {
            let x: Vec<f64> = (0..dim)
                .map(|_| {
                    let s: f64 = rng.sample(StandardNormal);
                    match regime {
                        ProbeRegime::Gaussian => s,
                        ProbeRegime::PositiveOrthant => s.abs(),
                    }
                })
                .collect();
            let z = forward(topology, weights, &DMatrix::from_row_slice(1, dim, &x))?.z;
            if topology.internal_nodes().all(|v| z[(0, v)].abs() >= KINK_TOL) {
                probes.row_mut(i).copy_from_slice(&x);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::InvalidArgument("could not draw a probe away from ReLU kinks".into()));
        }
    }
    Ok(probes)
}

/// Candidates drawn per requested probe by [`sample_probes_stratified`].
pub const STRATIFIED_POOL_FACTOR: usize = 100;

/// `count` probes picked from a pool of `STRATIFIED_POOL_FACTOR * count`
/// kink-free draws, taking them round-robin over the activation patterns of
/// the internal nodes (patterns in order of first appearance). Within one
/// pattern the Jacobian is linear in `x`, so spreading probes over patterns
/// recovers `d_G` far more often than the same number of i.i.d. draws,
/// which tend to miss patterns of small probability.
pub fn sample_probes_stratified<R: Rng + ?Sized>(
    topology: &NetworkTopology,
    weights: &[f64],
    count: usize,
    regime: ProbeRegime,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let pool = sample_probes(topology, weights, count * STRATIFIED_POOL_FACTOR, regime, rng)?;
    let z = forward(topology, weights, &pool)?.z;
    let internal: Vec<usize> = topology.internal_nodes().collect();
    let mut groups: Vec<(Vec<bool>, Vec<usize>)> = Vec::new();
    for i in 0..pool.nrows() {
        let pattern: Vec<bool> = internal.iter().map(|&v| z[(i, v)] > 0.0).collect();
        match groups.iter_mut().find(|(p, _)| *p == pattern) {
            Some((_, rows)) => rows.push(i),
            None => groups.push((pattern, vec![i])),
        }
    }
    let mut picked = Vec::with_capacity(count);
    let mut round = 0;
    while picked.len() < count {
        for (_, rows) in &groups {
            if let Some(&i) = rows.get(round) {
                picked.push(i);
                if picked.len() == count {
                    break;
                }
            }
        }
        round += 1;
    }
    Ok(pool.select_rows(&picked))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub rank_rel_tol: f64,
    pub kink_tol: f64,
}

/// Summary written by `ddp analyze`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub paths: u128,
    #[serde(rename = "rank_J")]
    pub rank_j: usize,
    pub predicted_rank: usize,
    #[serde(rename = "d_G")]
    pub d_g: usize,
    #[serde(rename = "dim_N")]
    pub dim_n: usize,
    #[serde(rename = "d_GD")]
    pub d_gd: usize,
    pub probe_count: usize,
    pub tolerances: Tolerances,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warning: Option<String>,
}

/// Path count, rank of `J(w)`, `d_G(w)` on `4 |E|` stratified Gaussian
/// probes drawn from `rng`, and `d_{G,D}(w)` on `data`.
pub fn analyze<R: Rng + ?Sized>(
    topology: &NetworkTopology,
    weights: &[f64],
    data: &DMatrix<f64>,
    path_limit: usize,
    rel_tol: f64,
    rng: &mut R,
) -> Result<AnalysisReport> {
    let path_set = enumerate_paths(topology, path_limit)?;
    let jac = path_jacobian(&path_set, weights);
    let rank_j = numerical_rank(&jac.j, rel_tol);
    let probes = sample_probes_stratified(topology, weights, 4 * topology.num_edges(), ProbeRegime::Gaussian, rng)?;
    let dof = degrees_of_freedom(topology, weights, &probes, rel_tol)?;
    let (_, d_gd) = distribution_fisher(topology, weights, data, MetricSpec::SquaredDistance, rel_tol)?;
    Ok(AnalysisReport {
        paths: path_set.len() as u128,
        rank_j,
        predicted_rank: generic_rank_prediction(topology),
        d_g: dof.d_g,
        dim_n: dof.dim_null,
        d_gd,
        probe_count: dof.probe_count,
        tolerances: Tolerances { rank_rel_tol: rel_tol, kink_tol: KINK_TOL },
        warning: dof.warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;
    use crate::netgraph::predict;

    #[test]
    fn chain_has_one_path() {
        let t = instances::chain();
        let ps = enumerate_paths(&t, 10).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps.paths[0].edges, vec![0, 1]);
        assert_eq!(generic_rank_prediction(&t), 1);
    }

    #[test]
    fn figure2_counts() {
        let t = instances::figure2();
        assert_eq!(enumerate_paths(&t, 100).unwrap().len(), 8);
        assert_eq!(generic_rank_prediction(&t), 6);
    }

    #[test]
    fn layered_count_is_product_of_widths() {
        let t = NetworkTopology::layered(&[3, 2, 4, 1], false).unwrap();
        assert_eq!(count_paths(&t), 3 * 2 * 4);
        assert_eq!(enumerate_paths(&t, 100).unwrap().len(), 24);
        assert_eq!(generic_rank_prediction(&t), 12);
    }

    #[test]
    fn limit_reports_count() {
        let t = NetworkTopology::layered(&[10, 10, 10, 10, 10, 1], false).unwrap();
        match enumerate_paths(&t, 1000) {
            Err(Error::PathLimit { count, limit }) => {
                assert_eq!(count, 100_000);
                assert_eq!(limit, 1000);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn enumeration_is_lexicographic() {
        let t = NetworkTopology::layered(&[2, 3, 2], true).unwrap();
        let ps = enumerate_paths(&t, 1000).unwrap();
        for pair in ps.paths.windows(2) {
            assert!(pair[0].edges < pair[1].edges);
        }
    }

    #[test]
    fn rank_basics() {
        assert_eq!(numerical_rank(&DMatrix::identity(5, 5), 1e-8), 5);
        let u = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let v = DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 0.5, 2.0]);
        assert_eq!(numerical_rank(&(u * v.transpose()), 1e-8), 1);
        assert_eq!(numerical_rank(&DMatrix::zeros(3, 3), 1e-8), 0);
    }

    #[test]
    fn single_edge() {
        let t = NetworkTopology::layered(&[1, 1], false).unwrap();
        let ps = enumerate_paths(&t, 10).unwrap();
        let j = path_jacobian(&ps, &[0.3]);
        assert_eq!(j.j.as_slice(), &[1.0]);
        let mut r = instances::rng(0);
        let probes = sample_probes(&t, &[0.3], 4, ProbeRegime::Gaussian, &mut r).unwrap();
        assert_eq!(degrees_of_freedom(&t, &[0.3], &probes, 1e-8).unwrap().d_g, 1);
    }

    #[test]
    fn features_in_positive_regime_are_heads() {
        let t = instances::figure2();
        let ps = enumerate_paths(&t, 100).unwrap();
        let w = vec![1.0; 10];
        let phi = path_features(&ps, &t, &w, &[0.4, 0.7]).unwrap();
        for (p, f) in ps.paths.iter().zip(&phi) {
            let x = if t.id(p.head) == "x0" { 0.4 } else { 0.7 };
            assert_eq!(*f, x);
        }
    }

    #[test]
    fn dead_unit_zeroes_its_paths() {
        let (t, w, dead) = instances::dead_unit_221(3);
        let ps = enumerate_paths(&t, 100).unwrap();
        let phi = path_features(&ps, &t, &w, &[0.5, 1.5]).unwrap();
        for (p, f) in ps.paths.iter().zip(&phi) {
            let through = p.edges.iter().any(|&e| t.edge(e).dst == dead);
            assert_eq!(*f == 0.0, through);
        }
    }

    #[test]
    fn reconstruction_with_bias() {
        let (t, w, x) = instances::random_instance(&[3, 3, 2], true, 17, 5);
        let ps = enumerate_paths(&t, 1000).unwrap();
        let pi = path_values(&ps, &w);
        let f = predict(&t, &w, &x).unwrap();
        for i in 0..5 {
            let xi: Vec<f64> = x.row(i).iter().copied().collect();
            let phi = path_features(&ps, &t, &w, &xi).unwrap();
            for (k, &v) in t.outputs().iter().enumerate() {
                let s: f64 = ps.ending_at(v).iter().map(|&p| pi[p] * phi[p]).sum();
                assert!((s - f[(i, k)]).abs() <= 1e-12 * f[(i, k)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn jacobian_factorization() {
        let (t, w, _) = instances::random_instance(&[2, 3, 2], true, 2, 1);
        let ps = enumerate_paths(&t, 1000).unwrap();
        let jac = path_jacobian(&ps, &w);
        let inv_w = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(w.len(), w.iter().map(|x| 1.0 / x)));
        let pi = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&jac.pi));
        let factored = pi * &jac.incidence * inv_w;
        assert!((factored - &jac.j).abs().max() <= 1e-12);
    }

    #[test]
    fn zero_weights_are_fine() {
        let t = instances::chain();
        let ps = enumerate_paths(&t, 10).unwrap();
        let j = path_jacobian(&ps, &[0.0, 2.0]);
        assert_eq!(j.j.as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn fisher_degenerate_batch() {
        let (t, w, _) = instances::random_instance(&[2, 3, 2], false, 4, 1);
        let x = DMatrix::from_fn(6, 2, |_, j| [0.7, -0.2][j]);
        let (f, rank) = distribution_fisher(&t, &w, &x, MetricSpec::SquaredDistance, 1e-8).unwrap();
        assert!(rank <= 2);
        let jac = output_jacobian(&t, &w, &[0.7, -0.2]).unwrap();
        assert!((f - jac.transpose() * jac * 2.0).abs().max() < 1e-12);
    }

    #[test]
    fn report_uses_documented_keys() {
        let t = instances::chain();
        let mut r = instances::rng(0);
        let data = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, -1.0]);
        let report = analyze(&t, &[1.0, 1.0], &data, 100, 1e-8, &mut r).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        for key in ["paths", "rank_J", "predicted_rank", "d_G", "dim_N", "d_GD", "probe_count", "tolerances"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(report.paths, 1);
        assert_eq!(report.rank_j, 1);
    }

    #[test]
    fn rank_survives_matrix_that_breaks_direct_svd() {
        // path features of this draw made nalgebra's direct SVD return NaN
        let t = NetworkTopology::layered(&[2, 3, 3, 2], false).unwrap();
        let ps = enumerate_paths(&t, 1000).unwrap();
        let mut rng = instances::rng(2564);
        let w = instances::uniform_weights(&t, &mut rng, -1.5, 1.5);
        let probes = sample_probes(&t, &w, 50 * t.num_edges(), ProbeRegime::Gaussian, &mut rng).unwrap();
        let phi = DMatrix::from_fn(probes.nrows(), ps.len(), |i, j| {
            let x: Vec<f64> = probes.row(i).iter().copied().collect();
            path_features(&ps, &t, &w, &x).unwrap()[j]
        });
        let rank = numerical_rank(&phi, DEFAULT_RANK_TOL);
        assert!(rank <= ps.len());
        assert_eq!(rank, numerical_rank(&phi.transpose(), DEFAULT_RANK_TOL));
    }
}
