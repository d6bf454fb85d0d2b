//! DDP-SGD: per-edge curvature `kappa_e = 1/2 d^2 gamma_net^2 / d w_e^2` and
//! the diagonally rescaled update `w_e <- w_e - eta / kappa_e * dL/dw_e`.
//!
//! With the activation pattern held fixed, `gamma_net^2` is a quadratic
//! function of any single weight `w_{u->v}`, which gives
//!
//! ```text
//! kappa_{u->v} = (1 - alpha) * dgamma_v * gamma_u^2
//!              + alpha * sum_{x >= v} dgamma_x * S_i(h_u^(i) * T_i[v][x])
//! ```
//!
//! where `dgamma_x = d gamma_net^2 / d gamma_x^2` and `T_i[v][x] = dz_x/dz_v`
//! on example `i`. The second-moment part is carried by the per-example
//! second-order adjoint `dzz`; variance mode subtracts the squared means.

use nalgebra::DMatrix;

use crate::complexity::{gamma_from_activations, ComplexityConfig, NodeGamma, SMode};
use crate::error::{Error, Result};
use crate::loss::LossSpec;
use crate::netgraph::{
    apply_node_rescaling, forward, function_distance, loss_gradient, ActivationRecord, Batch, NetworkTopology,
    NodeKind, WeightVector,
};

/// Per-edge curvature. `raw` is the exact second derivative, `values` the
/// floored copy used for division.
#[derive(Debug, Clone, PartialEq)]
pub struct KappaVector {
    pub values: Vec<f64>,
    pub raw: Vec<f64>,
    pub floor: f64,
}

impl KappaVector {
    pub fn ones(len: usize) -> Self {
        Self { values: vec![1.0; len], raw: vec![1.0; len], floor: 0.0 }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `dgamma[v] = d gamma_net^2 / d gamma_v^2` and, per example, the symmetric
/// matrix `dzz[i][(a, b)] = d gamma_net^2 / d(z_a^(i) z_b^(i))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderAdjoint {
    pub dgamma: Vec<f64>,
    pub dzz: Vec<DMatrix<f64>>,
}

pub fn dgamma_backward(topology: &NetworkTopology, weights: &[f64], alpha: f64) -> Vec<f64> {
    let mut dgamma = vec![0.0; topology.num_nodes()];
    for v in (0..topology.num_nodes()).rev() {
        if topology.kind(v) == NodeKind::Output {
            dgamma[v] = 1.0;
            continue;
        }
        let mut acc = 0.0;
        for &e in topology.outgoing(v) {
            acc += dgamma[topology.edge(e).dst] * weights[e] * weights[e];
        }
        dgamma[v] = (1.0 - alpha) * acc;
    }
    dgamma
}

fn gate(topology: &NetworkTopology, acts: &ActivationRecord, i: usize, a: usize) -> f64 {
    match topology.kind(a) {
        NodeKind::Internal => {
            if acts.z[(i, a)] > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        _ => 1.0,
    }
}

/// Per-example downstream Jacobians `T_i[a][x] = dz_x / dz_a` (and
/// `dz_x / dh_a` for source nodes). `T_i[a][a] = 1`.
pub fn downstream_jacobians(
    topology: &NetworkTopology,
    weights: &[f64],
    acts: &ActivationRecord,
) -> Vec<DMatrix<f64>> {
    let nv = topology.num_nodes();
    (0..acts.len())
        .map(|i| {
            let mut t = DMatrix::<f64>::zeros(nv, nv);
            for a in (0..nv).rev() {
                t[(a, a)] = 1.0;
                let g = gate(topology, acts, i, a);
                if g == 0.0 {
                    continue;
                }
                for &e in topology.outgoing(a) {
                    let c = topology.edge(e).dst;
                    let w = weights[e];
                    for x in c..nv {
                        let tc = t[(c, x)];
                        if tc != 0.0 {
                            t[(a, x)] += w * tc;
                        }
                    }
                }
            }
            t
        })
        .collect()
}

/// Reverse propagation of `dgamma` and the per-example `dzz` blocks.
///
/// `dzz(a, b)` for `a < b` in topological order expands only `a`:
/// `dzz(a, b) = g_a * sum_{c in out(a)} w_{a->c} dzz(c, b)`, and on the
/// diagonal `dzz(a, a) = alpha/n * dgamma_a + g_a * sum_c w_{a->c} dzz(a, c)`.
/// On layered networks this coincides with the symmetric pairwise recursion
/// over `out(a) x out(b)`.
pub fn second_order_adjoint(
    topology: &NetworkTopology,
    weights: &[f64],
    acts: &ActivationRecord,
    config: &ComplexityConfig,
) -> SecondOrderAdjoint {
    let nv = topology.num_nodes();
    let dgamma = dgamma_backward(topology, weights, config.alpha);
    let n = acts.len().max(1) as f64;
    let inject: Vec<f64> = (0..nv)
        .map(|v| if topology.kind(v).is_source() { 0.0 } else { config.alpha / n * dgamma[v] })
        .collect();
    let dzz = (0..acts.len())
        .map(|i| {
            let mut q = DMatrix::<f64>::zeros(nv, nv);
            for a in (0..nv).rev() {
                let g = gate(topology, acts, i, a);
                if g != 0.0 {
                    for b in (a + 1)..nv {
                        let mut acc = 0.0;
                        for &e in topology.outgoing(a) {
                            acc += weights[e] * q[(topology.edge(e).dst, b)];
                        }
                        q[(a, b)] = g * acc;
                        q[(b, a)] = q[(a, b)];
                    }
                }
                let mut diag = inject[a];
                if g != 0.0 {
                    for &e in topology.outgoing(a) {
                        diag += weights[e] * q[(a, topology.edge(e).dst)];
                    }
                }
                q[(a, a)] = diag;
            }
            q
        })
        .collect();
    SecondOrderAdjoint { dgamma, dzz }
}

/// `kappa` from a precomputed forward pass and node complexities.
pub fn kappa_from_activations(
    topology: &NetworkTopology,
    weights: &[f64],
    acts: &ActivationRecord,
    node_gamma: &NodeGamma,
    config: &ComplexityConfig,
) -> Result<KappaVector> {
    config.validate()?;
    let n = acts.len();
    if n == 0 && config.alpha > 0.0 {
        return Err(Error::EmptyBatch);
    }
    let mut raw = vec![0.0; topology.num_edges()];
    if config.alpha == 0.0 {
        let dgamma = dgamma_backward(topology, weights, 0.0);
        for (e, edge) in topology.edges().iter().enumerate() {
            raw[e] = dgamma[edge.dst] * node_gamma.gamma_sq[edge.src];
        }
    } else {
        let adjoint = second_order_adjoint(topology, weights, acts, config);
        let jacobians = (config.s_mode == SMode::Variance).then(|| downstream_jacobians(topology, weights, acts));
        let nv = topology.num_nodes();
        for (e, edge) in topology.edges().iter().enumerate() {
            let (u, v) = (edge.src, edge.dst);
            let mut k = (1.0 - config.alpha) * adjoint.dgamma[v] * node_gamma.gamma_sq[u];
            for i in 0..n {
                let hu = acts.h[(i, u)];
                k += adjoint.dzz[i][(v, v)] * hu * hu;
            }
            if let Some(t) = &jacobians {
                for x in v..nv {
                    if topology.kind(x).is_source() || adjoint.dgamma[x] == 0.0 {
                        continue;
                    }
                    let mean = (0..n).map(|i| acts.h[(i, u)] * t[i][(v, x)]).sum::<f64>() / n as f64;
                    k -= config.alpha * adjoint.dgamma[x] * mean * mean;
                }
            }
            if !k.is_finite() {
                return Err(Error::NonFinite { node: topology.id(v).to_string() });
            }
            raw[e] = k;
        }
    }
    let floor = config.kappa_floor;
    let values = raw.iter().map(|&k| k.max(floor)).collect();
    Ok(KappaVector { values, raw, floor })
}

/// `kappa_e` for every edge, estimated on `inputs`.
pub fn kappa(
    topology: &NetworkTopology,
    weights: &[f64],
    inputs: &DMatrix<f64>,
    config: &ComplexityConfig,
) -> Result<KappaVector> {
    config.validate()?;
    if inputs.nrows() == 0 && config.alpha > 0.0 {
        return Err(Error::EmptyBatch);
    }
    let acts = forward(topology, weights, inputs)?;
    let node_gamma = gamma_from_activations(topology, weights, &acts, config)?;
    kappa_from_activations(topology, weights, &acts, &node_gamma, config)
}

/// `w_e - eta / kappa_e * grad_e`.
pub fn ddp_sgd_step(weights: &[f64], grad: &[f64], kappa: &KappaVector, eta: f64) -> Result<WeightVector> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {eta}")));
    }
    for (what, len) in [("gradient", grad.len()), ("kappa", kappa.values.len())] {
        if len != weights.len() {
            return Err(Error::DimensionMismatch { what, expected: weights.len(), got: len });
        }
    }
    let out = weights
        .iter()
        .zip(grad)
        .zip(&kappa.values)
        .map(|((w, g), k)| w - eta / k * g)
        .collect();
    WeightVector::new(out)
}

/// One DDP-SGD step on `batch` (gradient and curvature from the same batch).
pub fn ddp_sgd_update(
    topology: &NetworkTopology,
    weights: &[f64],
    batch: &Batch,
    loss: LossSpec,
    config: &ComplexityConfig,
    eta: f64,
) -> Result<WeightVector> {
    let grad = loss_gradient(topology, weights, batch, loss)?;
    let k = kappa(topology, weights, batch.inputs(), config)?;
    ddp_sgd_step(weights, &grad, &k, eta)
}

/// Distance between the networks reached by one DDP-SGD step from `w` and
/// from the rescaled `T(w)`, measured over `probes`.
#[allow(clippy::too_many_arguments)]
pub fn verify_rescaling_invariance(
    topology: &NetworkTopology,
    weights: &[f64],
    batch: &Batch,
    loss: LossSpec,
    config: &ComplexityConfig,
    eta: f64,
    v: usize,
    rho: f64,
    probes: &DMatrix<f64>,
) -> Result<f64> {
    let rescaled = apply_node_rescaling(weights, topology, v, rho)?;
    let a = ddp_sgd_update(topology, weights, batch, loss, config, eta)?;
    let b = ddp_sgd_update(topology, &rescaled, batch, loss, config, eta)?;
    function_distance(topology, &a, &b, probes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complexity::gamma_net_of;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain() -> NetworkTopology {
        NetworkTopology::layered(&[1, 1, 1], false).unwrap()
    }

    #[test]
    fn chain_path_norm_kappa() {
        let (a, b) = (1.3, -0.4);
        let x = DMatrix::from_element(2, 1, 1.0);
        let k = kappa(&chain(), &[a, b], &x, &ComplexityConfig::path_norm()).unwrap();
        assert_eq!(k.raw, vec![b * b, a * a]);
    }

    #[test]
    fn chain_step_divides_by_b_squared() {
        let b = 2.0;
        let k = kappa(&chain(), &[1.0, b], &DMatrix::zeros(0, 1), &ComplexityConfig::path_norm()).unwrap();
        let w = ddp_sgd_step(&[1.0, b], &[0.4, 0.0], &k, 0.5).unwrap();
        assert_eq!(w[0], 1.0 - 0.5 * 0.4 / (b * b));
        assert_eq!(w[1], b);
    }

    #[test]
    fn trivial_steps() {
        let w = [0.3, -1.0, 2.0];
        let unchanged = ddp_sgd_step(&w, &[0.0; 3], &KappaVector::ones(3), 0.1).unwrap();
        assert_eq!(unchanged.as_slice(), &w);
        let g = [1.0, 2.0, -3.0];
        let sgd = ddp_sgd_step(&w, &g, &KappaVector::ones(3), 0.1).unwrap();
        for e in 0..3 {
            assert_eq!(sgd[e], w[e] - 0.1 * g[e]);
        }
        assert!(ddp_sgd_step(&w, &g, &KappaVector::ones(3), 0.0).is_err());
        assert!(ddp_sgd_step(&w, &g, &KappaVector::ones(2), 0.1).is_err());
    }

    #[test]
    fn chain_second_moment_kappa_closed_form() {
        // gamma^2 = mean((b * relu(a x))^2); with a, b > 0 and x > 0 it is a^2 b^2 mean(x^2)
        let (a, b) = (0.7, 1.9);
        let x = DMatrix::from_row_slice(3, 1, &[0.5, 1.0, 2.0]);
        let mx2 = (0.25 + 1.0 + 4.0) / 3.0;
        let k = kappa(&chain(), &[a, b], &x, &ComplexityConfig::second_moment()).unwrap();
        assert!((k.raw[0] - b * b * mx2).abs() < 1e-14);
        assert!((k.raw[1] - a * a * mx2).abs() < 1e-14);
    }

    fn random_instance(widths: &[usize], bias: bool, seed: u64, n: usize) -> (NetworkTopology, Vec<f64>, DMatrix<f64>) {
        let t = NetworkTopology::layered(widths, bias).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..t.num_edges()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let x = DMatrix::from_fn(n, widths[0], |_, _| rng.random_range(-2.0..2.0));
        (t, w, x)
    }

    #[test]
    fn dzz_matches_jacobian_closed_form() {
        let (t, w, x) = random_instance(&[2, 3, 3, 2], true, 11, 5);
        let config = ComplexityConfig::new(0.4, SMode::SecondMoment).unwrap();
        let acts = forward(&t, &w, &x).unwrap();
        let adj = second_order_adjoint(&t, &w, &acts, &config);
        let jac = downstream_jacobians(&t, &w, &acts);
        let nv = t.num_nodes();
        for i in 0..5 {
            for a in 0..nv {
                for b in 0..nv {
                    let closed: f64 = (0..nv)
                        .filter(|&x| !t.kind(x).is_source())
                        .map(|x| 0.4 / 5.0 * adj.dgamma[x] * jac[i][(a, x)] * jac[i][(b, x)])
                        .sum();
                    assert!((adj.dzz[i][(a, b)] - closed).abs() < 1e-13, "{i} {a} {b}");
                }
            }
        }
    }

    #[test]
    fn dgamma_is_nonnegative() {
        let (t, w, _) = random_instance(&[3, 4, 2], true, 3, 1);
        for alpha in [0.0, 0.3, 1.0] {
            assert!(dgamma_backward(&t, &w, alpha).iter().all(|&d| d >= 0.0));
        }
    }

    fn quadratic_fit_kappa(t: &NetworkTopology, w: &[f64], x: &DMatrix<f64>, config: &ComplexityConfig, e: usize) -> f64 {
        // gamma_net^2 is exactly quadratic in one weight on a fixed pattern
        let h = 1e-3;
        let eval = |d: f64| {
            let mut wp = w.to_vec();
            wp[e] += d;
            gamma_net_of(t, &wp, x, config).unwrap()
        };
        (eval(h) - 2.0 * eval(0.0) + eval(-h)) / (2.0 * h * h)
    }

    #[test]
    fn kappa_matches_second_difference_on_skip_connections() {
        // a DAG with a skip edge x0 -> y and h1 -> h2 inside one layer
        use crate::netgraph::{EdgeSpec, NodeSpec, TopologyDoc};
        let node = |id: &str, kind| NodeSpec { id: id.into(), kind };
        let edge = |s: &str, d: &str| EdgeSpec { src: s.into(), dst: d.into() };
        let doc = TopologyDoc {
            nodes: vec![
                node("x0", NodeKind::Input),
                node("x1", NodeKind::Input),
                node("h1", NodeKind::Internal),
                node("h2", NodeKind::Internal),
                node("y", NodeKind::Output),
            ],
            edges: vec![
                edge("x0", "h1"),
                edge("x1", "h1"),
                edge("x1", "h2"),
                edge("h1", "h2"),
                edge("h1", "y"),
                edge("h2", "y"),
                edge("x0", "y"),
            ],
        };
        let t = NetworkTopology::from_doc(&doc).unwrap();
        let w = vec![0.8, 0.6, -0.3, 1.1, 0.7, -0.9, 0.5];
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, 0.3, 1.2, 2.0, 0.1, 0.7, 0.9]);
        for mode in [SMode::Variance, SMode::SecondMoment] {
            for alpha in [0.0, 0.5, 1.0] {
                let config = ComplexityConfig::new(alpha, mode).unwrap();
                let k = kappa(&t, &w, &x, &config).unwrap();
                for e in 0..t.num_edges() {
                    let fd = quadratic_fit_kappa(&t, &w, &x, &config, e);
                    assert!((k.raw[e] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{mode:?} {alpha} edge {e}: {} vs {fd}", k.raw[e]);
                }
            }
        }
    }

    #[test]
    fn floor_applies_to_dead_edges() {
        let t = NetworkTopology::layered(&[1, 1, 1], false).unwrap();
        let x = DMatrix::from_element(3, 1, 1.0);
        let k = kappa(&t, &[-1.0, 1.0], &x, &ComplexityConfig::variance()).unwrap();
        assert!(k.values.iter().all(|&v| v >= k.floor));
        assert_eq!(k.values[1], k.floor);
    }

    #[test]
    fn rescaling_by_one_is_exact() {
        let (t, w, x) = random_instance(&[2, 3, 1], true, 5, 8);
        let y = DMatrix::from_fn(8, 1, |i, _| i as f64 * 0.1);
        let batch = Batch::new(x.clone(), Some(crate::loss::Labels::Targets(y))).unwrap();
        let h = t.node_index("h1_1").unwrap();
        let d = verify_rescaling_invariance(&t, &w, &batch, LossSpec::Squared, &ComplexityConfig::variance(), 0.1, h, 1.0, &x)
            .unwrap();
        assert_eq!(d, 0.0);
    }
}
