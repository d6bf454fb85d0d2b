//! Mini-batch training over the optimizer family: plain SGD, DDP-SGD (with
//! Path-SGD and the diagonal natural gradient as named special cases) and
//! SGD on DDP-Normalized weights.

pub mod dataset;
pub mod metrics;

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::complexity::{gamma_from_activations, gamma_net, gamma_net_of, ComplexityConfig, SMode};
use crate::ddpnorm::{
    ddpnorm_loss_and_gradient, ddpnorm_loss_and_gradient_held_out, normalized_forward, realize_weights, RunningStats, Stats,
};
use crate::ddpsgd::{ddp_sgd_step, kappa_from_activations, KappaVector};
use crate::error::{Error, Result};
use crate::loss::{Labels, LossSpec};
use crate::netgraph::{forward, loss_and_gradient, predict, Batch, NetworkTopology, WeightVector};

pub use dataset::{make_dataset, Dataset, DatasetSpec, LabelKind};
pub use metrics::{read_metrics, MetricsRecord, MetricsWriter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    /// DDP-SGD with `alpha = 0`.
    PathSgd,
    DdpSgd,
    DdpNorm,
    /// DDP-SGD with `alpha = 1`, second moment, squared loss.
    DiagNaturalGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StatsBatchMode {
    /// Statistics on the gradient minibatch.
    #[default]
    Same,
    /// Statistics on an independently drawn minibatch of the same size.
    HeldOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSpec {
    Layered {
        widths: Vec<usize>,
        #[serde(default = "default_true")]
        bias: bool,
    },
    File {
        path: PathBuf,
    },
}

fn default_true() -> bool {
    true
}

fn default_loss() -> LossSpec {
    LossSpec::Squared
}

impl NetworkSpec {
    pub fn build(&self) -> Result<NetworkTopology> {
        match self {
            NetworkSpec::Layered { widths, bias } => {
                NetworkTopology::layered(widths, *bias).map_err(|e| Error::config("network.widths", e.to_string()))
            }
            NetworkSpec::File { path } => NetworkTopology::load(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    /// Geometry for DDP methods and the measure reported as `gamma_net`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complexity: Option<ComplexityConfig>,
    pub eta: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub stats_batch_mode: StatsBatchMode,
    pub dataset: DatasetSpec,
    pub network: NetworkSpec,
    #[serde(default = "default_loss")]
    pub loss: LossSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Record per-step wall time in `ms`; off gives reproducible streams.
    #[serde(default = "default_true")]
    pub wall_time: bool,
}

/// What an optimizer name resolves to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Sgd,
    DdpSgd(ComplexityConfig),
    DdpNorm(ComplexityConfig),
}

impl TrainConfig {
    /// Parses JSON; errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::config(if field == "." { "<root>".to_string() } else { field }, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta", format!("must be a non-negative number, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if let Some(c) = &self.complexity {
            c.validate()?;
        }
        self.method().map(|_| ())
    }

    pub fn method(&self) -> Result<Method> {
        let c = self.complexity;
        match self.optimizer {
            Optimizer::Sgd => Ok(Method::Sgd),
            Optimizer::DdpSgd => Ok(Method::DdpSgd(c.unwrap_or_else(ComplexityConfig::path_norm))),
            Optimizer::PathSgd => match c {
                None => Ok(Method::DdpSgd(ComplexityConfig::path_norm())),
                Some(c) if c.alpha == 0.0 => Ok(Method::DdpSgd(c)),
                Some(_) => Err(Error::config("complexity.alpha", "path_sgd requires alpha = 0")),
            },
            Optimizer::DiagNaturalGradient => {
                if self.loss != LossSpec::Squared {
                    return Err(Error::config("loss", "diag_natural_gradient requires squared loss"));
                }
                match c {
                    None => Ok(Method::DdpSgd(ComplexityConfig::second_moment())),
                    Some(c) if c.alpha == 1.0 && c.s_mode == SMode::SecondMoment => Ok(Method::DdpSgd(c)),
                    Some(_) => Err(Error::config(
                        "complexity",
                        "diag_natural_gradient requires alpha = 1 and s_mode = second_moment",
                    )),
                }
            }
            Optimizer::DdpNorm => Ok(Method::DdpNorm(c.unwrap_or_else(ComplexityConfig::variance))),
        }
    }

    /// The measure reported as `gamma_net`.
    pub fn measure(&self) -> ComplexityConfig {
        match self.method() {
            Ok(Method::DdpSgd(c)) | Ok(Method::DdpNorm(c)) => c,
            _ => self.complexity.unwrap_or_else(ComplexityConfig::path_norm),
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub topology: NetworkTopology,
    /// Standard weights computing the trained function.
    pub weights: WeightVector,
    pub initial_weights: WeightVector,
    /// The normalized parameters, for DDP-Normalization.
    pub tilde_weights: Option<WeightVector>,
    pub running_stats: Option<Vec<f64>>,
    pub metrics: Vec<MetricsRecord>,
    pub dataset: Dataset,
}

impl TrainOutcome {
    /// Mean loss of `weights` over the whole training set.
    pub fn dataset_loss(&self, weights: &[f64], loss: LossSpec) -> Result<f64> {
        let out = predict(&self.topology, weights, &self.dataset.inputs)?;
        loss.mean_loss(&out, &self.dataset.labels)
    }
}

fn check_compatible(topology: &NetworkTopology, data: &Dataset, loss: LossSpec) -> Result<()> {
    if topology.inputs().len() != data.inputs.ncols() {
        return Err(Error::config(
            "network",
            format!("{} inputs but the dataset has {} input columns", topology.inputs().len(), data.inputs.ncols()),
        ));
    }
    let outputs = topology.outputs().len();
    match (&data.labels, loss) {
        (Labels::Targets(t), LossSpec::Squared) if t.ncols() == outputs => Ok(()),
        (Labels::Classes(_), LossSpec::SoftmaxCrossEntropy) if data.label_width() <= outputs => Ok(()),
        _ => Err(Error::config(
            "loss",
            format!("{loss:?} loss does not fit {outputs} outputs and the dataset's labels"),
        )),
    }
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } | Error::NonFiniteWeight { .. } | Error::DegenerateNormalization { .. } => {
            Error::Diverged { step, reason: e.to_string() }
        }
        other => other,
    }
}

struct StepResult {
    loss: f64,
    grad: Vec<f64>,
    gamma_net: f64,
    kappa: KappaVector,
    batch_stats: Option<Vec<Option<f64>>>,
}

fn compute_step(
    method: &Method,
    measure: &ComplexityConfig,
    topology: &NetworkTopology,
    weights: &[f64],
    batch: &Batch,
    stats_inputs: Option<&DMatrix<f64>>,
    loss: LossSpec,
) -> Result<StepResult> {
    match method {
        Method::Sgd => {
            let (value, grad) = loss_and_gradient(topology, weights, batch, loss)?;
            let gamma_net = gamma_net_of(topology, weights, batch.inputs(), measure)?;
            let kappa = KappaVector::ones(grad.len());
            Ok(StepResult { loss: value, grad, gamma_net, kappa, batch_stats: None })
        }
        Method::DdpSgd(c) => {
            let (value, grad) = loss_and_gradient(topology, weights, batch, loss)?;
            let acts = forward(topology, weights, stats_inputs.unwrap_or(batch.inputs()))?;
            let node_gamma = gamma_from_activations(topology, weights, &acts, c)?;
            let kappa = kappa_from_activations(topology, weights, &acts, &node_gamma, c)?;
            Ok(StepResult { loss: value, grad, gamma_net: gamma_net(&node_gamma, topology), kappa, batch_stats: None })
        }
        Method::DdpNorm(c) => {
            let (value, grad) = match stats_inputs {
                None => ddpnorm_loss_and_gradient(topology, weights, batch, loss, c)?,
                Some(s) => ddpnorm_loss_and_gradient_held_out(topology, weights, batch, s, loss, c)?,
            };
            let stats_x = stats_inputs.unwrap_or(batch.inputs());
            let fwd = normalized_forward(topology, weights, stats_x, c, Stats::Rows(0..stats_x.nrows()))?;
            let realized = realize_weights(topology, weights, &fwd.gamma_sq)?;
            let gamma_net = gamma_net_of(topology, &realized, batch.inputs(), c)?;
            let kappa = KappaVector::ones(grad.len());
            Ok(StepResult { loss: value, grad, gamma_net, kappa, batch_stats: Some(fwd.stats) })
        }
    }
}

pub fn train_loop(config: &TrainConfig) -> Result<TrainOutcome> {
    train_loop_with(config, |_, _| Ok(()))
}

/// Runs `config.steps` optimizer steps, handing each metrics record and the
/// updated parameters (`w`, or `w~` for DDP-Normalization) to `sink`.
pub fn train_loop_with(
    config: &TrainConfig,
    mut sink: impl FnMut(&MetricsRecord, &[f64]) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let method = config.method()?;
    let measure = config.measure();
    let data = make_dataset(&config.dataset)?;
    let topology = config.network.build()?;
    check_compatible(&topology, &data, config.loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stats_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut weights = WeightVector::init(&topology, &mut rng).into_inner();
    let full = Batch::new(data.inputs.clone(), Some(data.labels.clone()))?;
    let n = data.len();
    let bs = config.batch_size.min(n);
    let per_epoch = n / bs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = per_epoch;

    let mut running = match method {
        Method::DdpNorm(c) => Some(RunningStats::from_pass(&topology, &weights, &data.inputs, &c)?),
        _ => None,
    };
    let standard = |w: &[f64], running: &Option<RunningStats>| -> Result<WeightVector> {
        match (&method, running) {
            (Method::DdpNorm(c), Some(r)) => realize_weights(&topology, w, &r.tilde_gamma(&topology, w, c)?),
            _ => WeightVector::new(w.to_vec()),
        }
    };
    let initial_weights = standard(&weights, &running)?;

    let mut records = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        if cursor == per_epoch {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let rows = &order[cursor * bs..(cursor + 1) * bs];
        cursor += 1;
        let batch = full.select(rows)?;
        let stats_inputs = match config.stats_batch_mode {
            StatsBatchMode::Same => None,
            StatsBatchMode::HeldOut => {
                let idx = rand::seq::index::sample(&mut stats_rng, n, bs).into_vec();
                Some(data.inputs.select_rows(&idx))
            }
        };

        let start = Instant::now();
        let r = compute_step(&method, &measure, &topology, &weights, &batch, stats_inputs.as_ref(), config.loss)
            .map_err(diverged(step))?;
        if !r.loss.is_finite() {
            return Err(Error::Diverged { step, reason: "loss is not finite".into() });
        }
        if !r.gamma_net.is_finite() {
            return Err(Error::Diverged { step, reason: "gamma_net is not finite".into() });
        }
        if config.eta > 0.0 {
            let next = match method {
                Method::DdpSgd(_) => ddp_sgd_step(&weights, &r.grad, &r.kappa, config.eta),
                Method::Sgd | Method::DdpNorm(_) => ddp_sgd_step(&weights, &r.grad, &KappaVector::ones(r.grad.len()), config.eta),
            };
            weights = next.map_err(diverged(step))?.into_inner();
        }
        if let (Some(running), Some(stats)) = (running.as_mut(), r.batch_stats.as_ref()) {
            running.update(stats);
        }
        let ms = if config.wall_time { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
        let record = MetricsRecord {
            step,
            loss: r.loss,
            gamma_net: r.gamma_net,
            grad_norm: r.grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
            kappa_min: r.kappa.min(),
            kappa_max: r.kappa.max(),
            ms,
        };
        sink(&record, &weights)?;
        records.push(record);
    }

    let final_weights = standard(&weights, &running).map_err(diverged(config.steps))?;
    let tilde_weights = matches!(method, Method::DdpNorm(_)).then(|| WeightVector::new(weights.clone())).transpose()?;
    Ok(TrainOutcome {
        topology,
        weights: final_weights,
        initial_weights,
        tilde_weights,
        running_stats: running.map(|r| r.values),
        metrics: records,
        dataset: data,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub seed: u64,
    pub config_hash: String,
    pub steps: usize,
    pub config: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub running_stats: Option<Vec<f64>>,
}

/// Writes `topology.json`, `weights.json` (standard weights),
/// `tilde_weights.json` for DDP-Normalization, and `checkpoint.json` with
/// the seed, config hash and config echo.
pub fn write_checkpoint(dir: impl AsRef<Path>, config: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    outcome.topology.save(dir.join("topology.json"))?;
    outcome.weights.save(dir.join("weights.json"))?;
    if let Some(t) = &outcome.tilde_weights {
        t.save(dir.join("tilde_weights.json"))?;
    }
    let manifest = CheckpointManifest {
        seed: config.seed,
        config_hash: config.config_hash(),
        steps: outcome.metrics.len(),
        config: config.clone(),
        running_stats: outcome.running_stats.clone(),
    };
    std::fs::write(dir.join("checkpoint.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}
