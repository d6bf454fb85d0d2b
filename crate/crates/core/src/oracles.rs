//! Brute-force reference computations used to check the analytic code:
//! finite differences, per-output Jacobians by a separate backward sweep,
//! the diagonal Fisher of the Gaussian model, and path-enumeration sums.
//!
//! Nothing here reuses the derivative code of `netgraph`, `ddpsgd` or
//! `ddpnorm`; only plain forward passes are shared.

use nalgebra::DMatrix;

use crate::complexity::{gamma_net_of, ComplexityConfig};
use crate::ddpnorm::{normalized_forward, Stats};
use crate::error::{Error, Result};
use crate::loss::LossSpec;
use crate::netgraph::{batch_loss, forward, Batch, NetworkTopology, NodeKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteDiffSpec {
    /// Fixed step; `None` picks `eps^(1/3) * max(1, |w|)` for first and
    /// `eps^(1/4) * max(1, |w|)` for second differences.
    pub step: Option<f64>,
    /// Minimum `|z_v|` at internal nodes, relative to the batch activation
    /// scale, for a test point to be admissible.
    pub kink_margin: f64,
}

impl Default for FiniteDiffSpec {
    fn default() -> Self {
        Self { step: None, kink_margin: 1e-4 }
    }
}

impl FiniteDiffSpec {
    pub fn with_step(step: f64) -> Self {
        Self { step: Some(step), ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if let Some(h) = self.step {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
            }
        }
        if !(self.kink_margin > 0.0) {
            return Err(Error::InvalidArgument("kink margin must be positive".into()));
        }
        Ok(())
    }

    fn first_step(&self, w: f64) -> f64 {
        self.step.unwrap_or(f64::EPSILON.cbrt() * w.abs().max(1.0))
    }

    fn second_step(&self, w: f64) -> f64 {
        self.step.unwrap_or(f64::EPSILON.powf(0.25) * w.abs().max(1.0))
    }
}

/// Central first differences of a scalar function, one coordinate at a time.
pub fn finite_difference_gradient<F>(f: F, w: &[f64], spec: &FiniteDiffSpec) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    spec.validate()?;
    let mut x = w.to_vec();
    let mut out = Vec::with_capacity(w.len());
    for e in 0..w.len() {
        let h = spec.first_step(w[e]);
        x[e] = w[e] + h;
        let plus = f(&x)?;
        x[e] = w[e] - h;
        let minus = f(&x)?;
        x[e] = w[e];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Central second differences `(f(w+h) - 2 f(w) + f(w-h)) / h^2` per coordinate.
pub fn finite_difference_curvature<F>(f: F, w: &[f64], spec: &FiniteDiffSpec) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    spec.validate()?;
    let center = f(w)?;
    let mut x = w.to_vec();
    let mut out = Vec::with_capacity(w.len());
    for e in 0..w.len() {
        let h = spec.second_step(w[e]);
        x[e] = w[e] + h;
        let plus = f(&x)?;
        x[e] = w[e] - h;
        let minus = f(&x)?;
        x[e] = w[e];
        out.push((plus - 2.0 * center + minus) / (h * h));
    }
    Ok(out)
}

/// Sign pattern of all internal pre-activations.
fn pattern(z: &DMatrix<f64>, topology: &NetworkTopology) -> Vec<bool> {
    let internal: Vec<usize> = topology.internal_nodes().collect();
    let mut out = Vec::with_capacity(z.nrows() * internal.len());
    for i in 0..z.nrows() {
        for &v in &internal {
            out.push(z[(i, v)] > 0.0);
        }
    }
    out
}

fn check_margin(z: &DMatrix<f64>, topology: &NetworkTopology, margin: f64) -> Result<()> {
    let scale = z.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for v in topology.internal_nodes() {
        for i in 0..z.nrows() {
            if z[(i, v)].abs() < margin * scale {
                return Err(Error::InadmissiblePoint(format!(
                    "|z| = {:e} at node `{}`, example {i}, is within the kink margin",
                    z[(i, v)].abs(),
                    topology.id(v)
                )));
            }
        }
    }
    Ok(())
}

/// Wraps `f` so that any evaluation whose activation pattern differs from
/// the base point's is rejected.
fn pattern_guard<'a, F, P>(f: F, pattern_of: P, base: Vec<bool>) -> impl Fn(&[f64]) -> Result<f64> + 'a
where
    F: Fn(&[f64]) -> Result<f64> + 'a,
    P: Fn(&[f64]) -> Result<Vec<bool>> + 'a,
{
    move |w| {
        if pattern_of(w)? != base {
            return Err(Error::InadmissiblePoint("finite-difference step crosses a ReLU kink".into()));
        }
        f(w)
    }
}

/// Whether `weights` sit at least the kink margin away from every ReLU kink
/// on `inputs`.
pub fn check_admissible(topology: &NetworkTopology, weights: &[f64], inputs: &DMatrix<f64>, spec: &FiniteDiffSpec) -> Result<()> {
    check_margin(&forward(topology, weights, inputs)?.z, topology, spec.kink_margin)
}

/// Finite-difference gradient of the mean batch loss.
pub fn fd_loss_gradient(
    topology: &NetworkTopology,
    weights: &[f64],
    batch: &Batch,
    loss: LossSpec,
    spec: &FiniteDiffSpec,
) -> Result<Vec<f64>> {
    let acts = forward(topology, weights, batch.inputs())?;
    check_margin(&acts.z, topology, spec.kink_margin)?;
    let base = pattern(&acts.z, topology);
    let pattern_of = |w: &[f64]| Ok(pattern(&forward(topology, w, batch.inputs())?.z, topology));
    let f = |w: &[f64]| batch_loss(topology, w, batch, loss);
    finite_difference_gradient(pattern_guard(f, pattern_of, base), weights, spec)
}

/// `1/2` times the second difference of `gamma_net^2` along each weight.
pub fn fd_kappa(
    topology: &NetworkTopology,
    weights: &[f64],
    inputs: &DMatrix<f64>,
    config: &ComplexityConfig,
    spec: &FiniteDiffSpec,
) -> Result<Vec<f64>> {
    let acts = forward(topology, weights, inputs)?;
    check_margin(&acts.z, topology, spec.kink_margin)?;
    let base = pattern(&acts.z, topology);
    let pattern_of = |w: &[f64]| Ok(pattern(&forward(topology, w, inputs)?.z, topology));
    let f = |w: &[f64]| gamma_net_of(topology, w, inputs, config);
    let curv = finite_difference_curvature(pattern_guard(f, pattern_of, base), weights, spec)?;
    Ok(curv.into_iter().map(|c| 0.5 * c).collect())
}

/// Finite-difference gradient of the DDP-Normalized batch loss with respect
/// to `w~` (statistics on the same batch).
pub fn fd_ddpnorm_gradient(
    topology: &NetworkTopology,
    tilde_w: &[f64],
    batch: &Batch,
    loss: LossSpec,
    config: &ComplexityConfig,
    spec: &FiniteDiffSpec,
) -> Result<Vec<f64>> {
    let labels = batch.labels().ok_or(Error::MissingLabels)?;
    let n = batch.len();
    let run = |w: &[f64]| normalized_forward(topology, w, batch.inputs(), config, Stats::Rows(0..n));
    let fwd = run(tilde_w)?;
    check_margin(&fwd.z, topology, spec.kink_margin)?;
    let base = pattern(&fwd.z, topology);
    let pattern_of = |w: &[f64]| Ok(pattern(&run(w)?.z, topology));
    let f = |w: &[f64]| loss.mean_loss(&run(w)?.outputs(topology), labels);
    finite_difference_gradient(pattern_guard(f, pattern_of, base), tilde_w, spec)
}

/// `d f(x)[k] / d w_e` for a single input `x`, rows in output order.
pub fn per_output_jacobian(topology: &NetworkTopology, weights: &[f64], x: &[f64]) -> Result<DMatrix<f64>> {
    let inputs = DMatrix::from_row_slice(1, x.len(), x);
    let acts = forward(topology, weights, &inputs)?;
    let nv = topology.num_nodes();
    let outputs = topology.outputs();
    let mut jac = DMatrix::zeros(outputs.len(), topology.num_edges());
    for (k, &out) in outputs.iter().enumerate() {
        // sensitivity of output `out` to each node's pre-activation
        let mut sens = vec![0.0; nv];
        sens[out] = 1.0;
        for a in (0..out).rev() {
            if topology.kind(a) != NodeKind::Internal || acts.z[(0, a)] <= 0.0 {
                continue;
            }
            sens[a] = topology
                .outgoing(a)
                .iter()
                .map(|&e| weights[e] * sens[topology.edge(e).dst])
                .sum();
        }
        for (e, edge) in topology.edges().iter().enumerate() {
            jac[(k, e)] = sens[edge.dst] * acts.h[(0, edge.src)];
        }
    }
    Ok(jac)
}

/// `F[e,e] = (1/n) sum_i sum_k (d f(x_i)[k] / d w_e)^2`.
pub fn diagonal_fisher_gaussian(topology: &NetworkTopology, weights: &[f64], inputs: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = inputs.nrows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut diag = vec![0.0; topology.num_edges()];
    for i in 0..n {
        let x: Vec<f64> = inputs.row(i).iter().copied().collect();
        let jac = per_output_jacobian(topology, weights, &x)?;
        for (e, d) in diag.iter_mut().enumerate() {
            *d += jac.column(e).norm_squared();
        }
    }
    Ok(diag.into_iter().map(|d| d / n as f64).collect())
}

/// Calls `visit` with the edge list of every source-to-output path, by
/// depth-first search. Fails once more than `limit` paths are seen.
fn for_each_path(topology: &NetworkTopology, limit: usize, mut visit: impl FnMut(&[usize])) -> Result<()> {
    fn dfs(
        topology: &NetworkTopology,
        node: usize,
        stack: &mut Vec<usize>,
        seen: &mut usize,
        limit: usize,
        visit: &mut dyn FnMut(&[usize]),
    ) -> Result<()> {
        if topology.kind(node) == NodeKind::Output {
            *seen += 1;
            if *seen > limit {
                return Err(Error::PathLimit { count: *seen as u128, limit });
            }
            visit(stack);
            return Ok(());
        }
        for &e in topology.outgoing(node) {
            stack.push(e);
            dfs(topology, topology.edge(e).dst, stack, seen, limit, visit)?;
            stack.pop();
        }
        Ok(())
    }
    let mut seen = 0;
    let mut stack = Vec::new();
    for s in 0..topology.num_nodes() {
        if topology.kind(s).is_source() {
            dfs(topology, s, &mut stack, &mut seen, limit, &mut visit)?;
        }
    }
    Ok(())
}

/// `sum over paths through `edge` of prod_{e' != edge} w_{e'}^2`.
pub fn brute_force_path_kappa(topology: &NetworkTopology, weights: &[f64], edge: usize, limit: usize) -> Result<f64> {
    let mut total = 0.0;
    for_each_path(topology, limit, |p| {
        if p.contains(&edge) {
            total += p.iter().filter(|&&e| e != edge).map(|&e| weights[e] * weights[e]).product::<f64>();
        }
    })?;
    Ok(total)
}

/// [`brute_force_path_kappa`] for every edge in one enumeration.
pub fn brute_force_path_kappa_all(topology: &NetworkTopology, weights: &[f64], limit: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; topology.num_edges()];
    for_each_path(topology, limit, |p| {
        for &edge in p {
            out[edge] += p.iter().filter(|&&e| e != edge).map(|&e| weights[e] * weights[e]).product::<f64>();
        }
    })?;
    Ok(out)
}

/// The l2 path regularizer `sum_p prod_{e in p} w_e^2`.
pub fn brute_force_path_regularizer(topology: &NetworkTopology, weights: &[f64], limit: usize) -> Result<f64> {
    let mut total = 0.0;
    for_each_path(topology, limit, |p| {
        total += p.iter().map(|&e| weights[e] * weights[e]).product::<f64>();
    })?;
    Ok(total)
}
