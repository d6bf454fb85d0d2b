//! Per-node complexity `gamma_v` and the network measure `gamma_net`.
//!
//! With `R_v = alpha * S + (1 - alpha) * diag(gamma^2 of fan-in)`, where `S`
//! is the fan-in covariance or second moment, the squared node complexity
//! obeys the forward recursion
//!
//! ```text
//! gamma_v^2 = alpha * S(z_v) + (1 - alpha) * sum_{u -> v} gamma_u^2 * w_{u->v}^2
//! ```
//!
//! and `gamma_net^2` is the sum over output nodes. `alpha = 0` gives the
//! l2 path regularizer.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{forward, ActivationRecord, NetworkTopology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SMode {
    /// Centered: `(1/n) sum (z - mean z)^2`.
    Variance,
    /// Uncentered: `(1/n) sum z^2`.
    SecondMoment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexityConfig {
    pub alpha: f64,
    pub s_mode: SMode,
    #[serde(default = "default_input_gamma_sq")]
    pub input_gamma_sq: f64,
    #[serde(default = "default_kappa_floor")]
    pub kappa_floor: f64,
}

fn default_input_gamma_sq() -> f64 {
    1.0
}

fn default_kappa_floor() -> f64 {
    1e-6
}

impl Default for ComplexityConfig {
    fn default() -> Self {
        Self::path_norm()
    }
}

impl ComplexityConfig {
    pub fn new(alpha: f64, s_mode: SMode) -> Result<Self> {
        let config = Self {
            alpha,
            s_mode,
            input_gamma_sq: default_input_gamma_sq(),
            kappa_floor: default_kappa_floor(),
        };
        config.validate()?;
        Ok(config)
    }

    /// `alpha = 0`: the data-independent path norm.
    pub fn path_norm() -> Self {
        Self {
            alpha: 0.0,
            s_mode: SMode::SecondMoment,
            input_gamma_sq: default_input_gamma_sq(),
            kappa_floor: default_kappa_floor(),
        }
    }

    /// `alpha = 1`, second moment: the diagonal natural-gradient geometry.
    pub fn second_moment() -> Self {
        Self { alpha: 1.0, s_mode: SMode::SecondMoment, ..Self::path_norm() }
    }

    /// `alpha = 1`, variance: the Batch-Normalization geometry.
    pub fn variance() -> Self {
        Self { alpha: 1.0, s_mode: SMode::Variance, ..Self::path_norm() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("complexity.alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.kappa_floor > 0.0 && self.kappa_floor.is_finite()) {
            return Err(Error::config("complexity.kappa_floor", "must be positive"));
        }
        if !(self.input_gamma_sq > 0.0 && self.input_gamma_sq.is_finite()) {
            return Err(Error::config("complexity.input_gamma_sq", "must be positive"));
        }
        Ok(())
    }
}

/// Empirical `S` of one column with 1/n normalisation.
pub(crate) fn column_moment(values: impl Iterator<Item = f64> + Clone, mode: SMode) -> f64 {
    let n = values.clone().count() as f64;
    match mode {
        SMode::SecondMoment => values.map(|z| z * z).sum::<f64>() / n,
        SMode::Variance => {
            let mean = values.clone().sum::<f64>() / n;
            values.map(|z| (z - mean) * (z - mean)).sum::<f64>() / n
        }
    }
}

/// Squared complexity per node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeGamma {
    pub gamma_sq: Vec<f64>,
}

impl NodeGamma {
    pub fn get(&self, v: usize) -> f64 {
        self.gamma_sq[v]
    }
}

/// Runs the `gamma^2` recursion over precomputed activations.
pub fn gamma_from_activations(
    topology: &NetworkTopology,
    weights: &[f64],
    acts: &ActivationRecord,
    config: &ComplexityConfig,
) -> Result<NodeGamma> {
    config.validate()?;
    if weights.len() != topology.num_edges() {
        return Err(Error::DimensionMismatch {
            what: "weight vector",
            expected: topology.num_edges(),
            got: weights.len(),
        });
    }
    let n = acts.len();
    if n == 0 && config.alpha > 0.0 {
        return Err(Error::EmptyBatch);
    }
    let nv = topology.num_nodes();
    let mut gamma_sq = vec![0.0; nv];
    for v in 0..nv {
        if topology.kind(v).is_source() {
            gamma_sq[v] = config.input_gamma_sq;
            continue;
        }
        let mut structural = 0.0;
        for &e in topology.incoming(v) {
            let src = topology.edge(e).src;
            structural += gamma_sq[src] * weights[e] * weights[e];
        }
        let data = if config.alpha > 0.0 {
            column_moment(acts.z.column(v).iter().copied(), config.s_mode)
        } else {
            0.0
        };
        gamma_sq[v] = config.alpha * data + (1.0 - config.alpha) * structural;
    }
    Ok(NodeGamma { gamma_sq })
}

/// Forward pass plus the `gamma^2` recursion on the batch.
pub fn gamma_forward(
    topology: &NetworkTopology,
    weights: &[f64],
    inputs: &DMatrix<f64>,
    config: &ComplexityConfig,
) -> Result<NodeGamma> {
    if inputs.nrows() == 0 && config.alpha > 0.0 {
        return Err(Error::EmptyBatch);
    }
    let acts = forward(topology, weights, inputs)?;
    gamma_from_activations(topology, weights, &acts, config)
}

/// `gamma_net^2 = sum over outputs of gamma_v^2`.
pub fn gamma_net(node_gamma: &NodeGamma, topology: &NetworkTopology) -> f64 {
    topology.outputs().iter().map(|&v| node_gamma.gamma_sq[v]).sum()
}

/// Convenience: `gamma_net^2` straight from weights and a batch.
pub fn gamma_net_of(
    topology: &NetworkTopology,
    weights: &[f64],
    inputs: &DMatrix<f64>,
    config: &ComplexityConfig,
) -> Result<f64> {
    Ok(gamma_net(&gamma_forward(topology, weights, inputs, config)?, topology))
}

/// Empirical fan-in moment matrices (`C` or `M`) for every non-source node,
/// indexed in the node's incoming-edge order.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSecondMoments {
    pub per_node: Vec<Option<DMatrix<f64>>>,
}

impl NodeSecondMoments {
    pub fn estimate(topology: &NetworkTopology, acts: &ActivationRecord, mode: SMode) -> Result<Self> {
        let n = acts.len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let per_node = (0..topology.num_nodes())
            .map(|v| {
                if topology.kind(v).is_source() {
                    return None;
                }
                let fan_in: Vec<usize> = topology.incoming(v).iter().map(|&e| topology.edge(e).src).collect();
                let mut h = acts.h.select_columns(&fan_in);
                if mode == SMode::Variance {
                    for mut col in h.column_iter_mut() {
                        let mean = col.mean();
                        col.add_scalar_mut(-mean);
                    }
                }
                Some(h.transpose() * &h / n as f64)
            })
            .collect();
        Ok(Self { per_node })
    }

    /// Symmetric and PSD up to `tol` (smallest eigenvalue >= -tol).
    pub fn is_psd(&self, tol: f64) -> bool {
        self.per_node.iter().flatten().all(|m| {
            let sym = (m - m.transpose()).abs().max() <= tol;
            sym && m.clone().symmetric_eigenvalues().min() >= -tol
        })
    }
}

/// The fan-in matrix `R_v = alpha * (C or M) + (1 - alpha) * diag(gamma^2)`.
pub fn estimate_r(
    topology: &NetworkTopology,
    acts: &ActivationRecord,
    node_gamma: &NodeGamma,
    v: usize,
    config: &ComplexityConfig,
) -> Result<DMatrix<f64>> {
    config.validate()?;
    if acts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let incoming = topology.incoming(v);
    if incoming.is_empty() {
        return Err(Error::InvalidArgument(format!("node `{}` has no fan-in", topology.id(v))));
    }
    let diag = DVector::from_iterator(
        incoming.len(),
        incoming.iter().map(|&e| node_gamma.gamma_sq[topology.edge(e).src]),
    );
    let mut r = DMatrix::from_diagonal(&diag) * (1.0 - config.alpha);
    if config.alpha > 0.0 {
        let moments = NodeSecondMoments::estimate(topology, acts, config.s_mode)?;
        let m = moments.per_node[v].as_ref().expect("non-source node has moments");
        r += m * config.alpha;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::WeightVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_setup(widths: &[usize], bias: bool, seed: u64, n: usize) -> (NetworkTopology, WeightVector, DMatrix<f64>) {
        let t = NetworkTopology::layered(widths, bias).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = WeightVector::init(&t, &mut rng);
        let x = DMatrix::from_fn(n, widths[0], |_, _| rng.random_range(-2.0..2.0));
        (t, w, x)
    }

    #[test]
    fn alpha_zero_chain_is_path_norm() {
        let t = NetworkTopology::layered(&[1, 1, 1], false).unwrap();
        let (a, b) = (1.5, -0.7);
        let x = DMatrix::from_element(3, 1, 0.3);
        let g = gamma_forward(&t, &[a, b], &x, &ComplexityConfig::path_norm()).unwrap();
        let h = t.node_index("h1_0").unwrap();
        let y = t.outputs()[0];
        assert_eq!(g.get(h), a * a);
        assert_eq!(g.get(y), a * a * b * b);
        assert_eq!(gamma_net(&g, &t), a * a * b * b);
    }

    #[test]
    fn alpha_one_second_moment_is_mean_squared_preactivation() {
        let (t, w, x) = random_setup(&[3, 4, 2], true, 1, 20);
        let acts = forward(&t, &w, &x).unwrap();
        let g = gamma_forward(&t, &w, &x, &ComplexityConfig::second_moment()).unwrap();
        for v in 0..t.num_nodes() {
            if t.kind(v).is_source() {
                assert_eq!(g.get(v), 1.0);
                continue;
            }
            // direct oracle: mean of z_v^2 over the batch
            let oracle = (0..20).map(|i| acts.z[(i, v)].powi(2)).sum::<f64>() / 20.0;
            assert!((g.get(v) - oracle).abs() <= 1e-14 * oracle.max(1.0));
        }
    }

    #[test]
    fn recursion_matches_matrix_assembly() {
        for (alpha, mode) in [(0.5, SMode::SecondMoment), (0.5, SMode::Variance), (0.0, SMode::Variance), (1.0, SMode::Variance)] {
            let (t, w, x) = random_setup(&[2, 3, 1], true, 7, 10);
            let config = ComplexityConfig::new(alpha, mode).unwrap();
            let acts = forward(&t, &w, &x).unwrap();
            let g = gamma_from_activations(&t, &w, &acts, &config).unwrap();
            for v in 0..t.num_nodes() {
                if t.kind(v).is_source() {
                    continue;
                }
                let r = estimate_r(&t, &acts, &g, v, &config).unwrap();
                let wv = DVector::from_iterator(t.incoming(v).len(), t.incoming(v).iter().map(|&e| w[e]));
                let quad = (wv.transpose() * &r * &wv)[(0, 0)];
                assert!((quad - g.get(v)).abs() <= 1e-12 * g.get(v).max(1e-300), "{alpha} {mode:?}");
            }
        }
    }

    #[test]
    fn alpha_zero_r_is_pure_diagonal() {
        let (t, w, x) = random_setup(&[2, 3, 1], false, 2, 5);
        let acts = forward(&t, &w, &x).unwrap();
        let config = ComplexityConfig::path_norm();
        let g = gamma_from_activations(&t, &w, &acts, &config).unwrap();
        let y = t.outputs()[0];
        let r = estimate_r(&t, &acts, &g, y, &config).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let src = t.edge(t.incoming(y)[i]).src;
                let expected = if i == j { g.get(src) } else { 0.0 };
                assert_eq!(r[(i, j)], expected);
            }
        }
    }

    #[test]
    fn first_layer_second_moment_is_input_gram() {
        let (t, w, x) = random_setup(&[3, 2, 1], false, 4, 6);
        let acts = forward(&t, &w, &x).unwrap();
        let config = ComplexityConfig::second_moment();
        let g = gamma_from_activations(&t, &w, &acts, &config).unwrap();
        let h = t.node_index("h1_0").unwrap();
        let r = estimate_r(&t, &acts, &g, h, &config).unwrap();
        let gram = x.transpose() * &x / 6.0;
        assert!((r - gram).abs().max() < 1e-15);
    }

    #[test]
    fn bias_row_of_covariance_is_zero() {
        let (t, w, x) = random_setup(&[2, 2, 1], true, 5, 8);
        let acts = forward(&t, &w, &x).unwrap();
        let config = ComplexityConfig::variance();
        let g = gamma_from_activations(&t, &w, &acts, &config).unwrap();
        let h = t.node_index("h1_0").unwrap();
        let r = estimate_r(&t, &acts, &g, h, &config).unwrap();
        let b = t.incoming(h).iter().position(|&e| Some(t.edge(e).src) == t.bias()).unwrap();
        for j in 0..r.ncols() {
            assert_eq!(r[(b, j)], 0.0);
            assert_eq!(r[(j, b)], 0.0);
        }
    }

    #[test]
    fn moments_are_psd() {
        let (t, w, x) = random_setup(&[3, 4, 3, 2], true, 9, 12);
        let acts = forward(&t, &w, &x).unwrap();
        for mode in [SMode::Variance, SMode::SecondMoment] {
            assert!(NodeSecondMoments::estimate(&t, &acts, mode).unwrap().is_psd(1e-10));
        }
    }

    #[test]
    fn dead_node_has_zero_variance_complexity() {
        let t = NetworkTopology::layered(&[2, 2, 1], false).unwrap();
        let h0 = t.node_index("h1_0").unwrap();
        let mut w = vec![0.5; t.num_edges()];
        for &e in t.incoming(h0) {
            w[e] = -1.0;
        }
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.5, 0.1, 3.0, 1.0]);
        let g = gamma_forward(&t, &w, &x, &ComplexityConfig::variance()).unwrap();
        // z_h0 is negative on every example, so h = 0, but z itself varies;
        // the downstream dead contribution is what vanishes.
        let acts = forward(&t, &w, &x).unwrap();
        assert!(acts.h.column(h0).iter().all(|&v| v == 0.0));
        assert!(g.get(h0) > 0.0);
    }

    #[test]
    fn zero_weights_give_zero_gamma_net() {
        let t = NetworkTopology::layered(&[2, 3, 1], true).unwrap();
        let x = DMatrix::from_element(4, 2, 1.0);
        for config in [ComplexityConfig::path_norm(), ComplexityConfig::variance(), ComplexityConfig::second_moment()] {
            let w = vec![0.0; t.num_edges()];
            assert_eq!(gamma_net_of(&t, &w, &x, &config).unwrap(), 0.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(ComplexityConfig::new(1.5, SMode::Variance).is_err());
        assert!(ComplexityConfig::new(-0.1, SMode::Variance).is_err());
        let mut c = ComplexityConfig::path_norm();
        c.kappa_floor = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_batch_with_data_term_is_an_error() {
        let t = NetworkTopology::layered(&[1, 1, 1], false).unwrap();
        let x = DMatrix::zeros(0, 1);
        assert!(matches!(
            gamma_forward(&t, &[1.0, 1.0], &x, &ComplexityConfig::variance()),
            Err(Error::EmptyBatch)
        ));
        assert!(gamma_forward(&t, &[1.0, 1.0], &x, &ComplexityConfig::path_norm()).is_ok());
    }
}
