//! DDP-Normalization: training in the `w~` parametrization where each
//! internal node divides its pre-activation by
//!
//! ```text
//! gamma~_v^2 = (1 - alpha) * sum_u c_u * w~_{u->v}^2 + alpha * S(z~_v)
//! ```
//!
//! with `z~_v = sum_u w~_{u->v} h_u` and `c_u` the upstream complexity: 1 for
//! internal nodes (already normalized) and `input_gamma_sq` for inputs and
//! bias. Output nodes are left unnormalized. `alpha = 1` in variance mode is
//! Batch-Normalization without the affine parameters.
//!
//! Batch statistics are treated as functions of `w~`, so gradients carry the
//! full cross-example coupling.

use std::ops::Range;

use nalgebra::DMatrix;

use crate::complexity::{column_moment, ComplexityConfig, SMode};
use crate::error::{Error, Result};
use crate::loss::{Labels, LossSpec};
use crate::netgraph::{Batch, NetworkTopology, NodeKind, WeightVector};

/// `gamma~_v^2` per node; `None` for nodes that are not normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct TildeGamma(pub Vec<Option<f64>>);

impl TildeGamma {
    pub fn get(&self, v: usize) -> Option<f64> {
        self.0[v]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedParams {
    pub tilde_w: WeightVector,
}

/// Where the normalizer's data statistic comes from.
#[derive(Debug, Clone)]
pub enum Stats<'a> {
    /// Computed on these rows of the input matrix.
    Rows(Range<usize>),
    /// Fixed per-node values of `S(z~_v)` (e.g. running averages).
    Fixed(&'a [f64]),
}

/// Everything the normalized forward pass produces, `n x |V|` matrices.
#[derive(Debug, Clone)]
pub struct NormalizedForward {
    pub z_tilde: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub gamma_sq: TildeGamma,
    /// `S(z~_v)` as used in `gamma~_v^2`, internal nodes only.
    pub stats: Vec<Option<f64>>,
}

impl NormalizedForward {
    pub fn outputs(&self, topology: &NetworkTopology) -> DMatrix<f64> {
        self.z.select_columns(topology.outputs())
    }
}

fn upstream_weight(topology: &NetworkTopology, u: usize, config: &ComplexityConfig) -> f64 {
    if topology.kind(u).is_source() {
        config.input_gamma_sq
    } else {
        1.0
    }
}

fn structural(topology: &NetworkTopology, tilde_w: &[f64], v: usize, config: &ComplexityConfig) -> f64 {
    topology
        .incoming(v)
        .iter()
        .map(|&e| upstream_weight(topology, topology.edge(e).src, config) * tilde_w[e] * tilde_w[e])
        .sum()
}

fn check(topology: &NetworkTopology, tilde_w: &[f64], inputs: &DMatrix<f64>, config: &ComplexityConfig) -> Result<()> {
    config.validate()?;
    if tilde_w.len() != topology.num_edges() {
        return Err(Error::DimensionMismatch { what: "weight vector", expected: topology.num_edges(), got: tilde_w.len() });
    }
    if inputs.ncols() != topology.inputs().len() {
        return Err(Error::DimensionMismatch { what: "input width", expected: topology.inputs().len(), got: inputs.ncols() });
    }
    Ok(())
}

/// Normalized forward pass over `inputs` with statistics from `stats`.
pub fn normalized_forward(
    topology: &NetworkTopology,
    tilde_w: &[f64],
    inputs: &DMatrix<f64>,
    config: &ComplexityConfig,
    stats: Stats<'_>,
) -> Result<NormalizedForward> {
    check(topology, tilde_w, inputs, config)?;
    let n = inputs.nrows();
    let nv = topology.num_nodes();
    match &stats {
        Stats::Rows(r) if config.alpha > 0.0 && (r.is_empty() || r.end > n) => return Err(Error::EmptyBatch),
        Stats::Fixed(s) if s.len() != nv => {
            return Err(Error::DimensionMismatch { what: "running statistics", expected: nv, got: s.len() })
        }
        _ => {}
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut z_tilde = DMatrix::<f64>::zeros(n, nv);
    let mut z = DMatrix::<f64>::zeros(n, nv);
    let mut h = DMatrix::<f64>::zeros(n, nv);
    let mut gamma_sq = vec![None; nv];
    let mut used_stats = vec![None; nv];
    for (j, &v) in topology.inputs().iter().enumerate() {
        for m in [&mut z_tilde, &mut z, &mut h] {
            m.set_column(v, &inputs.column(j));
        }
    }
    if let Some(b) = topology.bias() {
        for m in [&mut z_tilde, &mut z, &mut h] {
            m.column_mut(b).fill(1.0);
        }
    }
    let eps_sq = config.kappa_floor * config.kappa_floor;
    for v in 0..nv {
        let kind = topology.kind(v);
        if kind.is_source() {
            continue;
        }
        for i in 0..n {
            let mut acc = 0.0;
            for &e in topology.incoming(v) {
                acc += tilde_w[e] * h[(i, topology.edge(e).src)];
            }
            if !acc.is_finite() {
                return Err(Error::NonFinite { node: topology.id(v).to_string() });
            }
            z_tilde[(i, v)] = acc;
        }
        if kind == NodeKind::Output {
            z.set_column(v, &z_tilde.column(v));
            h.set_column(v, &z_tilde.column(v));
            continue;
        }
        let s = if config.alpha > 0.0 {
            match &stats {
                Stats::Rows(r) => column_moment(z_tilde.column(v).rows_range(r.clone()).iter().copied(), config.s_mode),
                Stats::Fixed(s) => s[v],
            }
        } else {
            0.0
        };
        let g2 = (1.0 - config.alpha) * structural(topology, tilde_w, v, config) + config.alpha * s;
        if !(g2 > eps_sq) {
            return Err(Error::DegenerateNormalization { node: topology.id(v).to_string(), gamma_sq: g2 });
        }
        let inv = 1.0 / g2.sqrt();
        for i in 0..n {
            let zv = z_tilde[(i, v)] * inv;
            z[(i, v)] = zv;
            h[(i, v)] = zv.max(0.0);
        }
        gamma_sq[v] = Some(g2);
        used_stats[v] = Some(s);
    }
    Ok(NormalizedForward { z_tilde, z, h, gamma_sq: TildeGamma(gamma_sq), stats: used_stats })
}

/// `gamma~_v^2` for every internal node, statistics on the whole batch.
pub fn tilde_gamma(
    topology: &NetworkTopology,
    tilde_w: &[f64],
    inputs: &DMatrix<f64>,
    config: &ComplexityConfig,
) -> Result<TildeGamma> {
    let rows = 0..inputs.nrows();
    Ok(normalized_forward(topology, tilde_w, inputs, config, Stats::Rows(rows))?.gamma_sq)
}

/// Standard weights computing the same function: incoming weights of each
/// internal node divided by `gamma~_v`, output weights unchanged.
pub fn realize_weights(topology: &NetworkTopology, tilde_w: &[f64], tilde_gamma: &TildeGamma) -> Result<WeightVector> {
    let mut w = tilde_w.to_vec();
    for v in topology.internal_nodes() {
        let g2 = tilde_gamma.0[v].ok_or_else(|| Error::InvalidArgument(format!("no gamma for node `{}`", topology.id(v))))?;
        if !(g2 > 0.0) {
            return Err(Error::DegenerateNormalization { node: topology.id(v).to_string(), gamma_sq: g2 });
        }
        let g = g2.sqrt();
        for &e in topology.incoming(v) {
            w[e] /= g;
        }
    }
    WeightVector::new(w)
}

/// Rescales `w~` so that `gamma~_v = 1` at every internal node on `inputs`.
/// The result is a fixed point of `realize_weights` and computes the same
/// function.
pub fn balance_to_unit_gamma(
    topology: &NetworkTopology,
    tilde_w: &[f64],
    inputs: &DMatrix<f64>,
    config: &ComplexityConfig,
) -> Result<WeightVector> {
    let g = tilde_gamma(topology, tilde_w, inputs, config)?;
    realize_weights(topology, tilde_w, &g)
}

/// Loss on `loss_rows` and its exact gradient with respect to `w~`, with the
/// normalizer statistics computed on `stats_rows` of the same input matrix.
pub fn ddpnorm_loss_and_gradient_rows(
    topology: &NetworkTopology,
    tilde_w: &[f64],
    inputs: &DMatrix<f64>,
    labels: &Labels,
    loss_rows: Range<usize>,
    stats_rows: Range<usize>,
    loss: LossSpec,
    config: &ComplexityConfig,
) -> Result<(f64, Vec<f64>)> {
    if loss_rows.is_empty() || loss_rows.end > inputs.nrows() {
        return Err(Error::EmptyBatch);
    }
    let fwd = normalized_forward(topology, tilde_w, inputs, config, Stats::Rows(stats_rows.clone()))?;
    let nv = topology.num_nodes();
    let n = inputs.nrows();
    let outputs = fwd.outputs(topology).rows_range(loss_rows.clone()).into_owned();
    let (value, delta) = loss.mean_loss_and_delta(&outputs, labels)?;

    // dh accumulates dL/dh; it becomes dL/dz~ once a node is processed
    let mut dh = DMatrix::<f64>::zeros(n, nv);
    for (k, &v) in topology.outputs().iter().enumerate() {
        for (j, i) in loss_rows.clone().enumerate() {
            dh[(i, v)] = delta[(j, k)];
        }
    }
    let n_stats = stats_rows.len() as f64;
    let mut grad = vec![0.0; topology.num_edges()];
    for v in (0..nv).rev() {
        let kind = topology.kind(v);
        if kind.is_source() {
            continue;
        }
        let mut dz_tilde: Vec<f64> = (0..n).map(|i| dh[(i, v)]).collect();
        let mut d_g2 = 0.0;
        if kind == NodeKind::Internal {
            let g2 = fwd.gamma_sq.0[v].expect("internal nodes are normalized");
            let g = g2.sqrt();
            let mut dot = 0.0;
            for i in 0..n {
                let dz = if fwd.z[(i, v)] > 0.0 { dz_tilde[i] } else { 0.0 };
                dot += dz * fwd.z_tilde[(i, v)];
                dz_tilde[i] = dz / g;
            }
            d_g2 = -dot / (2.0 * g2 * g);
            if config.alpha > 0.0 {
                let col = fwd.z_tilde.column(v);
                let mean = match config.s_mode {
                    SMode::Variance => col.rows_range(stats_rows.clone()).sum() / n_stats,
                    SMode::SecondMoment => 0.0,
                };
                let scale = d_g2 * config.alpha * 2.0 / n_stats;
                for i in stats_rows.clone() {
                    dz_tilde[i] += scale * (col[i] - mean);
                }
            }
        }
        for &e in topology.incoming(v) {
            let u = topology.edge(e).src;
            let mut g = 0.0;
            for i in 0..n {
                g += dz_tilde[i] * fwd.h[(i, u)];
            }
            if kind == NodeKind::Internal {
                g += d_g2 * 2.0 * (1.0 - config.alpha) * upstream_weight(topology, u, config) * tilde_w[e];
            }
            grad[e] = g;
            if !topology.kind(u).is_source() {
                for i in 0..n {
                    dh[(i, u)] += tilde_w[e] * dz_tilde[i];
                }
            }
        }
    }
    Ok((value, grad))
}

/// Batch loss and its gradient with respect to `w~`, statistics and loss on
/// the same batch.
pub fn ddpnorm_loss_and_gradient(
    topology: &NetworkTopology,
    tilde_w: &[f64],
    batch: &Batch,
    loss: LossSpec,
    config: &ComplexityConfig,
) -> Result<(f64, Vec<f64>)> {
    let labels = batch.labels().ok_or(Error::MissingLabels)?;
    let n = batch.len();
    ddpnorm_loss_and_gradient_rows(topology, tilde_w, batch.inputs(), labels, 0..n, 0..n, loss, config)
}

pub fn ddpnorm_gradient(
    topology: &NetworkTopology,
    tilde_w: &[f64],
    batch: &Batch,
    loss: LossSpec,
    config: &ComplexityConfig,
) -> Result<Vec<f64>> {
    ddpnorm_loss_and_gradient(topology, tilde_w, batch, loss, config).map(|(_, g)| g)
}

/// Gradient with statistics from a separate batch: the loss signal comes
/// from `batch`, the normalizer from `stats_inputs`.
pub fn ddpnorm_loss_and_gradient_held_out(
    topology: &NetworkTopology,
    tilde_w: &[f64],
    batch: &Batch,
    stats_inputs: &DMatrix<f64>,
    loss: LossSpec,
    config: &ComplexityConfig,
) -> Result<(f64, Vec<f64>)> {
    let labels = batch.labels().ok_or(Error::MissingLabels)?;
    let n = batch.len();
    if stats_inputs.ncols() != batch.inputs().ncols() {
        return Err(Error::DimensionMismatch {
            what: "statistics batch width",
            expected: batch.inputs().ncols(),
            got: stats_inputs.ncols(),
        });
    }
    let m = stats_inputs.nrows();
    let mut all = DMatrix::zeros(n + m, batch.inputs().ncols());
    all.rows_mut(0, n).copy_from(batch.inputs());
    all.rows_mut(n, m).copy_from(stats_inputs);
    ddpnorm_loss_and_gradient_rows(topology, tilde_w, &all, labels, 0..n, n..n + m, loss, config)
}

/// `w~ - eta * grad`.
pub fn sgd_step_tilde(tilde_w: &[f64], grad: &[f64], eta: f64) -> Result<NormalizedParams> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {eta}")));
    }
    if grad.len() != tilde_w.len() {
        return Err(Error::DimensionMismatch { what: "gradient", expected: tilde_w.len(), got: grad.len() });
    }
    let tilde_w = WeightVector::new(tilde_w.iter().zip(grad).map(|(w, g)| w - eta * g).collect())?;
    Ok(NormalizedParams { tilde_w })
}

/// Exponential moving average of `S(z~_v)` for evaluation-time normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub values: Vec<f64>,
    pub decay: f64,
}

impl RunningStats {
    pub const DEFAULT_DECAY: f64 = 0.9;

    /// Initial values from one statistics pass over `inputs`.
    pub fn from_pass(
        topology: &NetworkTopology,
        tilde_w: &[f64],
        inputs: &DMatrix<f64>,
        config: &ComplexityConfig,
    ) -> Result<Self> {
        let fwd = normalized_forward(topology, tilde_w, inputs, config, Stats::Rows(0..inputs.nrows()))?;
        Ok(Self { values: fwd.stats.iter().map(|s| s.unwrap_or(0.0)).collect(), decay: Self::DEFAULT_DECAY })
    }

    pub fn update(&mut self, batch_stats: &[Option<f64>]) {
        for (r, s) in self.values.iter_mut().zip(batch_stats) {
            if let Some(s) = s {
                *r = self.decay * *r + (1.0 - self.decay) * s;
            }
        }
    }

    /// `gamma~_v^2` implied by the running statistics.
    pub fn tilde_gamma(&self, topology: &NetworkTopology, tilde_w: &[f64], config: &ComplexityConfig) -> Result<TildeGamma> {
        let mut out = vec![None; topology.num_nodes()];
        for v in topology.internal_nodes() {
            let g2 = (1.0 - config.alpha) * structural(topology, tilde_w, v, config) + config.alpha * self.values[v];
            if !(g2 > config.kappa_floor * config.kappa_floor) {
                return Err(Error::DegenerateNormalization { node: topology.id(v).to_string(), gamma_sq: g2 });
            }
            out[v] = Some(g2);
        }
        Ok(TildeGamma(out))
    }

    /// Network outputs using the running statistics.
    pub fn predict(
        &self,
        topology: &NetworkTopology,
        tilde_w: &[f64],
        inputs: &DMatrix<f64>,
        config: &ComplexityConfig,
    ) -> Result<DMatrix<f64>> {
        Ok(normalized_forward(topology, tilde_w, inputs, config, Stats::Fixed(&self.values))?.outputs(topology))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complexity::gamma_forward;
    use crate::netgraph::{function_distance, predict};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(widths: &[usize], seed: u64, n: usize) -> (NetworkTopology, Vec<f64>, Batch) {
        let t = NetworkTopology::layered(widths, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..t.num_edges()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = DMatrix::from_fn(n, widths[0], |_, _| rng.random_range(-2.0..2.0));
        let y = DMatrix::from_fn(n, *widths.last().unwrap(), |_, _| rng.random_range(-1.0..1.0));
        (t, w, Batch::new(x, Some(Labels::Targets(y))).unwrap())
    }

    #[test]
    fn worked_example_single_hidden_node() {
        let t = NetworkTopology::layered(&[2, 1, 1], false).unwrap();
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let config = ComplexityConfig::new(0.5, SMode::Variance).unwrap();
        let w = [1.0, 1.0, 1.0];
        let g = tilde_gamma(&t, &w, &x, &config).unwrap();
        let h = t.node_index("h1_0").unwrap();
        // z~ is identically 1 here, so the variance term vanishes
        assert_eq!(g.get(h), Some(0.5 * 2.0));
        let y = t.outputs()[0];
        assert_eq!(g.get(y), None);
        // z~ = (1, 2): variance 0.25
        let g = tilde_gamma(&t, &[1.0, 2.0, 1.0], &x, &config).unwrap();
        assert_eq!(g.get(h), Some(0.5 * 5.0 + 0.5 * 0.25));
    }

    #[test]
    fn alpha_one_variance_is_batch_variance() {
        let (t, w, batch) = instance(&[3, 4, 1], 2, 16);
        let fwd = normalized_forward(&t, &w, batch.inputs(), &ComplexityConfig::variance(), Stats::Rows(0..16)).unwrap();
        for v in t.internal_nodes() {
            let col = fwd.z_tilde.column(v);
            let mean = col.mean();
            let var = col.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / 16.0;
            assert!((fwd.gamma_sq.get(v).unwrap() - var).abs() < 1e-14 * var.max(1.0));
        }
    }

    #[test]
    fn alpha_zero_is_weight_norm() {
        let (t, w, batch) = instance(&[3, 4, 1], 3, 4);
        let g = tilde_gamma(&t, &w, batch.inputs(), &ComplexityConfig::path_norm()).unwrap();
        for v in t.internal_nodes() {
            let norm: f64 = t.incoming(v).iter().map(|&e| w[e] * w[e]).sum();
            assert_eq!(g.get(v), Some(norm));
        }
    }

    #[test]
    fn realized_weights_have_unit_gamma_and_same_function() {
        for config in [ComplexityConfig::second_moment(), ComplexityConfig::variance(), ComplexityConfig::new(0.3, SMode::Variance).unwrap()] {
            let (t, w, batch) = instance(&[2, 3, 3, 1], 4, 12);
            let fwd = normalized_forward(&t, &w, batch.inputs(), &config, Stats::Rows(0..12)).unwrap();
            let realized = realize_weights(&t, &w, &fwd.gamma_sq).unwrap();
            let f = predict(&t, &realized, batch.inputs()).unwrap();
            assert!((f - fwd.outputs(&t)).abs().max() < 1e-12);
            let g = gamma_forward(&t, &realized, batch.inputs(), &config).unwrap();
            for v in t.internal_nodes() {
                assert!((g.get(v) - 1.0).abs() < 1e-10, "{config:?}");
            }
            let again = balance_to_unit_gamma(&t, &realized, batch.inputs(), &config).unwrap();
            for (a, b) in again.iter().zip(realized.iter()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn incoming_scale_leaves_function_unchanged() {
        let (t, w, batch) = instance(&[2, 3, 1], 5, 10);
        let config = ComplexityConfig::new(0.5, SMode::SecondMoment).unwrap();
        let v = t.node_index("h1_2").unwrap();
        let mut scaled = w.clone();
        for &e in t.incoming(v) {
            scaled[e] *= 7.0;
        }
        let rows = Stats::Rows(0..10);
        let a = normalized_forward(&t, &w, batch.inputs(), &config, rows.clone()).unwrap().outputs(&t);
        let b = normalized_forward(&t, &scaled, batch.inputs(), &config, rows).unwrap().outputs(&t);
        assert!((a - b).abs().max() < 1e-12);
    }

    #[test]
    fn gradient_orthogonal_at_internal_nodes() {
        for (seed, alpha, mode) in [(1, 1.0, SMode::Variance), (2, 0.5, SMode::SecondMoment), (3, 0.0, SMode::Variance)] {
            let (t, w, batch) = instance(&[3, 4, 2], seed, 9);
            let config = ComplexityConfig::new(alpha, mode).unwrap();
            let grad = ddpnorm_gradient(&t, &w, &batch, LossSpec::Squared, &config).unwrap();
            for v in t.internal_nodes() {
                let inc = t.incoming(v);
                let dot: f64 = inc.iter().map(|&e| w[e] * grad[e]).sum();
                let nw: f64 = inc.iter().map(|&e| w[e] * w[e]).sum::<f64>().sqrt();
                let ng: f64 = inc.iter().map(|&e| grad[e] * grad[e]).sum::<f64>().sqrt();
                assert!(dot.abs() <= 1e-8 * nw * ng.max(1e-300), "{alpha} {mode:?}");
            }
        }
    }

    #[test]
    fn output_weights_are_not_orthogonal_in_general() {
        let (t, w, batch) = instance(&[3, 4, 1], 8, 9);
        let grad = ddpnorm_gradient(&t, &w, &batch, LossSpec::Squared, &ComplexityConfig::variance()).unwrap();
        let y = t.outputs()[0];
        let dot: f64 = t.incoming(y).iter().map(|&e| w[e] * grad[e]).sum();
        assert!(dot.abs() > 1e-6);
    }

    #[test]
    fn held_out_stats_keep_orthogonality() {
        let (t, w, batch) = instance(&[2, 3, 1], 6, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let stats = DMatrix::from_fn(11, 2, |_, _| rng.random_range(-2.0..2.0));
        let (_, grad) =
            ddpnorm_loss_and_gradient_held_out(&t, &w, &batch, &stats, LossSpec::Squared, &ComplexityConfig::variance()).unwrap();
        for v in t.internal_nodes() {
            let dot: f64 = t.incoming(v).iter().map(|&e| w[e] * grad[e]).sum();
            assert!(dot.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_output_delta_gives_zero_gradient() {
        let (t, w, batch) = instance(&[2, 3, 1], 7, 6);
        let config = ComplexityConfig::variance();
        let fwd = normalized_forward(&t, &w, batch.inputs(), &config, Stats::Rows(0..6)).unwrap();
        let exact = Batch::new(batch.inputs().clone(), Some(Labels::Targets(fwd.outputs(&t)))).unwrap();
        let grad = ddpnorm_gradient(&t, &w, &exact, LossSpec::Squared, &config).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn step_grows_norm_by_pythagoras() {
        let (t, w, batch) = instance(&[3, 3, 1], 10, 8);
        let grad = ddpnorm_gradient(&t, &w, &batch, LossSpec::Squared, &ComplexityConfig::variance()).unwrap();
        let eta = 0.3;
        let next = sgd_step_tilde(&w, &grad, eta).unwrap();
        for v in t.internal_nodes() {
            let sq = |x: &[f64]| t.incoming(v).iter().map(|&e| x[e] * x[e]).sum::<f64>();
            let expected = sq(&w) + eta * eta * sq(&grad);
            assert!((sq(&next.tilde_w) - expected).abs() <= 1e-10 * expected);
        }
        let same = sgd_step_tilde(&w, &vec![0.0; w.len()], eta).unwrap();
        assert_eq!(same.tilde_w.as_slice(), w.as_slice());
    }

    #[test]
    fn degenerate_normalizer_is_an_error() {
        let t = NetworkTopology::layered(&[1, 1, 1], true).unwrap();
        let x = DMatrix::from_element(4, 1, 2.0);
        // constant input: zero variance at the hidden node
        let w = vec![1.0, 0.0, 1.0, 0.0];
        let r = tilde_gamma(&t, &w, &x, &ComplexityConfig::variance());
        assert!(matches!(r, Err(Error::DegenerateNormalization { .. })));
    }

    #[test]
    fn running_stats_reproduce_batch_statistics_at_init() {
        let (t, w, batch) = instance(&[2, 3, 1], 12, 10);
        let config = ComplexityConfig::variance();
        let rs = RunningStats::from_pass(&t, &w, batch.inputs(), &config).unwrap();
        let a = rs.predict(&t, &w, batch.inputs(), &config).unwrap();
        let b = normalized_forward(&t, &w, batch.inputs(), &config, Stats::Rows(0..10)).unwrap().outputs(&t);
        assert!((a - b).abs().max() < 1e-12);
        let realized = realize_weights(&t, &w, &tilde_gamma(&t, &w, batch.inputs(), &config).unwrap()).unwrap();
        assert!(function_distance(&t, &realized, &realized, batch.inputs()).unwrap() == 0.0);
    }
}
