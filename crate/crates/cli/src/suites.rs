//! Property suites behind `ddp verify`. Each runs seeded random instances
//! and reports the worst error per trial against a fixed tolerance.

use std::fmt;
use std::str::FromStr;

use ddp_core::complexity::{ComplexityConfig, SMode};
use ddp_core::ddpnorm::ddpnorm_gradient;
use ddp_core::ddpsgd::{ddp_sgd_update, kappa, verify_rescaling_invariance};
use ddp_core::error::Result;
use ddp_core::instances::{self, RANK_SHAPES};
use ddp_core::netgraph::{apply_node_rescaling, function_distance, loss_gradient, output_scale, predict, NetworkTopology};
use ddp_core::oracles::{
    brute_force_path_kappa_all, diagonal_fisher_gaussian, fd_ddpnorm_gradient, fd_loss_gradient, FiniteDiffSpec,
};
use ddp_core::paths::{enumerate_paths, generic_rank_prediction, numerical_rank, path_features, path_jacobian, path_values};
use ddp_core::LossSpec;
use nalgebra::DMatrix;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Orthogonality,
    NatgradEquivalence,
    PathsgdEquivalence,
    Rescaling,
    Rank,
    Gradcheck,
    Reconstruction,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Orthogonality,
        Suite::NatgradEquivalence,
        Suite::PathsgdEquivalence,
        Suite::Rescaling,
        Suite::Rank,
        Suite::Gradcheck,
        Suite::Reconstruction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Orthogonality => "orthogonality",
            Suite::NatgradEquivalence => "natgrad-equivalence",
            Suite::PathsgdEquivalence => "pathsgd-equivalence",
            Suite::Rescaling => "rescaling",
            Suite::Rank => "rank",
            Suite::Gradcheck => "gradcheck",
            Suite::Reconstruction => "reconstruction",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Suite::Orthogonality => 1e-8,
            Suite::NatgradEquivalence => 1e-8,
            Suite::PathsgdEquivalence => 1e-10,
            Suite::Rescaling => 1e-8,
            Suite::Rank => 0.0,
            Suite::Gradcheck => 1e-5,
            Suite::Reconstruction => 1e-10,
        }
    }

    pub fn run(self, seed: u64, trials: usize) -> Result<SuiteReport> {
        let mut results = Vec::with_capacity(trials);
        for trial in 0..trials {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(trial as u64);
            let max_error = match self {
                Suite::Orthogonality => orthogonality_trial(s)?,
                Suite::NatgradEquivalence => natgrad_trial(s)?,
                Suite::PathsgdEquivalence => pathsgd_trial(s)?,
                Suite::Rescaling => rescaling_trial(s)?,
                Suite::Rank => rank_trial(s)? as f64,
                Suite::Gradcheck => gradcheck_trial(s)?,
                Suite::Reconstruction => reconstruction_trial(s)?,
            };
            let tolerance = self.tolerance();
            results.push(TrialResult { trial, max_error, tolerance, passed: max_error <= tolerance });
        }
        let passed = results.iter().all(|r| r.passed);
        Ok(SuiteReport { suite: self, seed, trials: results, passed })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| format!("unknown suite `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seed: u64,
    pub trials: Vec<TrialResult>,
    pub passed: bool,
}

/// `|a - b| / |b|`, with `|b|` bounded below by `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y, floor)).fold(0.0, f64::max)
}

const SHAPES: [&[usize]; 4] = [&[2, 3, 1], &[3, 4, 2], &[2, 3, 3, 1], &[4, 3, 2]];
const GEOMETRIES: [(f64, SMode); 6] = [
    (0.0, SMode::Variance),
    (0.0, SMode::SecondMoment),
    (0.5, SMode::Variance),
    (0.5, SMode::SecondMoment),
    (1.0, SMode::Variance),
    (1.0, SMode::SecondMoment),
];

fn pick<T: Copy>(items: &[T], seed: u64) -> T {
    items[(seed % items.len() as u64) as usize]
}

/// Worst `|<w~_v, g_v>| / (||w~_v|| ||g_v||)` over internal nodes, plus the
/// relative Pythagoras defect of one step.
pub fn orthogonality_trial(seed: u64) -> Result<f64> {
    let shape = pick(&SHAPES, seed);
    let (alpha, mode) = pick(&GEOMETRIES, seed / 4);
    let config = ComplexityConfig::new(alpha, mode)?;
    let (t, w, batch) = instances::random_labeled(shape, true, seed, 16);
    let grad = ddpnorm_gradient(&t, &w, &batch, LossSpec::Squared, &config)?;
    let eta = 0.1;
    let next = ddp_core::ddpnorm::sgd_step_tilde(&w, &grad, eta)?;
    let mut worst = 0.0_f64;
    for v in t.internal_nodes() {
        let inc = t.incoming(v);
        let dot: f64 = inc.iter().map(|&e| w[e] * grad[e]).sum();
        let sq = |x: &[f64]| inc.iter().map(|&e| x[e] * x[e]).sum::<f64>();
        let denom = (sq(&w) * sq(&grad)).sqrt();
        if denom > 0.0 {
            worst = worst.max(dot.abs() / denom);
        }
        let expected = sq(&w) + eta * eta * sq(&grad);
        worst = worst.max(rel_err(sq(&next.tilde_w), expected, f64::MIN_POSITIVE));
    }
    Ok(worst)
}

pub fn natgrad_trial(seed: u64) -> Result<f64> {
    let shape = pick(&SHAPES, seed);
    let (t, w, x) = instances::random_instance(shape, seed.is_multiple_of(2), seed, 64);
    let k = kappa(&t, &w, &x, &ComplexityConfig::second_moment())?;
    let f = diagonal_fisher_gaussian(&t, &w, &x)?;
    Ok(max_rel_err(&k.raw, &f, 1e-300))
}

pub fn pathsgd_trial(seed: u64) -> Result<f64> {
    let shape = pick(&SHAPES, seed);
    let (t, w, x) = instances::random_instance(shape, seed.is_multiple_of(2), seed, 4);
    let k = kappa(&t, &w, &x, &ComplexityConfig::path_norm())?;
    let oracle = brute_force_path_kappa_all(&t, &w, 10_000)?;
    Ok(max_rel_err(&k.raw, &oracle, 1e-300))
}

/// Worst of: model invariance under rescaling, and one-step DDP-SGD
/// invariance, relative to the largest output before or after the step, for
/// every rho and geometry.
pub fn rescaling_trial(seed: u64) -> Result<f64> {
    let shape = pick(&SHAPES, seed);
    let (t, w, x) = instances::random_instance_away_from_kinks(shape, true, seed, 16, 1e-3);
    let mut r = instances::rng(seed ^ 0xabc);
    let y = instances::uniform_inputs(16, t.outputs().len(), &mut r, -1.0, 1.0);
    let batch = ddp_core::Batch::new(x, Some(ddp_core::Labels::Targets(y)))?;
    let probes = instances::uniform_inputs(64, shape[0], &mut r, -2.0, 2.0);
    let internal: Vec<usize> = t.internal_nodes().collect();
    let v = pick(&internal, seed / 3);
    let scale = output_scale(&t, &w, &probes)?.max(f64::MIN_POSITIVE);
    let mut worst = 0.0_f64;
    for rho in [0.1, 0.5, 2.0, 10.0] {
        let rescaled = apply_node_rescaling(&w, &t, v, rho)?;
        worst = worst.max(function_distance(&t, &w, &rescaled, &probes)? / scale);
        for (alpha, mode) in GEOMETRIES {
            // the floor breaks invariance once rho^2 * kappa drops below it
            let config = ComplexityConfig { kappa_floor: 1e-12, ..ComplexityConfig::new(alpha, mode)? };
            let d = verify_rescaling_invariance(&t, &w, &batch, LossSpec::Squared, &config, 0.05, v, rho, &probes)?;
            let stepped = ddp_sgd_update(&t, &w, &batch, LossSpec::Squared, &config, 0.05)?;
            worst = worst.max(d / scale.max(output_scale(&t, &stepped, &probes)?));
        }
    }
    Ok(worst)
}

/// `|numerical rank - predicted rank|`, maximised over the shape set.
pub fn rank_trial(seed: u64) -> Result<usize> {
    let mut worst = 0;
    let mut r = instances::rng(seed);
    for shape in RANK_SHAPES {
        let t = NetworkTopology::layered(shape, false)?;
        let w = instances::uniform_weights(&t, &mut r, 0.5, 1.5);
        let ps = enumerate_paths(&t, 100_000)?;
        let rank = numerical_rank(&path_jacobian(&ps, &w).j, 1e-8);
        worst = worst.max(rank.abs_diff(generic_rank_prediction(&t)));
    }
    Ok(worst)
}

/// Relative error of the analytic loss and DDP-Normalization gradients
/// against central differences, over components larger than `1e-8`.
pub fn gradcheck_trial(seed: u64) -> Result<f64> {
    let shape = pick(&SHAPES, seed);
    let (t, w, x) = instances::random_instance_away_from_kinks(shape, true, seed, 12, 1e-2);
    let mut r = instances::rng(seed ^ 0x77);
    let y = instances::uniform_inputs(12, t.outputs().len(), &mut r, -1.0, 1.0);
    let batch = ddp_core::Batch::new(x, Some(ddp_core::Labels::Targets(y)))?;
    let mut worst = compare_large(
        &loss_gradient(&t, &w, &batch, LossSpec::Squared)?,
        &fd_loss_gradient(&t, &w, &batch, LossSpec::Squared, &FiniteDiffSpec::with_step(1e-4))?,
    );
    let (alpha, mode) = pick(&GEOMETRIES, seed / 4);
    let config = ComplexityConfig::new(alpha, mode)?;
    let analytic = ddpnorm_gradient(&t, &w, &batch, LossSpec::Squared, &config)?;
    let fd = fd_ddpnorm_gradient(&t, &w, &batch, LossSpec::Squared, &config, &FiniteDiffSpec::with_step(1e-5))?;
    worst = worst.max(compare_large(&analytic, &fd));
    Ok(worst)
}

fn compare_large(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .filter(|(a, _)| a.abs() > 1e-8)
        .map(|(a, b)| rel_err(*b, *a, 0.0))
        .fold(0.0, f64::max)
}

/// Worst error of `sum_p pi_p phi_p(x)` against the forward pass (relative
/// to the largest output on the batch),
/// and worst entrywise error of the `diag(pi) M diag(1/w)` factorization.
pub fn reconstruction_trial(seed: u64) -> Result<f64> {
    let shape = pick(&SHAPES, seed);
    let (t, w, x) = instances::random_instance(shape, true, seed, 8);
    let ps = enumerate_paths(&t, 100_000)?;
    let pi = path_values(&ps, &w);
    let f = predict(&t, &w, &x)?;
    let scale = f.amax().max(f64::MIN_POSITIVE);
    let mut worst = 0.0_f64;
    for i in 0..x.nrows() {
        let xi: Vec<f64> = x.row(i).iter().copied().collect();
        let phi = path_features(&ps, &t, &w, &xi)?;
        for (k, &v) in t.outputs().iter().enumerate() {
            let s: f64 = ps.ending_at(v).iter().map(|&p| pi[p] * phi[p]).sum();
            worst = worst.max(rel_err(s, f[(i, k)], scale));
        }
    }
    let jac = path_jacobian(&ps, &w);
    if w.iter().all(|x| x.abs() > 1e-6) {
        let factored = DMatrix::from_fn(ps.len(), t.num_edges(), |p, e| jac.pi[p] * jac.incidence[(p, e)] / w[e]);
        worst = worst.max((factored - &jac.j).amax());
    }
    Ok(worst)
}
