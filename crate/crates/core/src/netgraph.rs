//! Feedforward ReLU networks on a directed acyclic graph.
//!
//! A [`NetworkTopology`] owns the node list (kept in topological order) and
//! the canonical edge order, which is the index authority for every
//! per-edge vector in the crate: edges are sorted by the topological index
//! of their destination, then of their source.
//!
//! Internal nodes apply a ReLU, output nodes are linear and the optional
//! bias node emits a constant 1.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::ops::Deref;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{Labels, LossSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Input,
    Bias,
    Internal,
    Output,
}

impl NodeKind {
    /// Input and bias nodes: no fan-in, fixed outputs.
    pub fn is_source(self) -> bool {
        matches!(self, NodeKind::Input | NodeKind::Bias)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub src: String,
    pub dst: String,
}

/// On-disk topology document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyDoc {
    pub nodes: Vec<NodeSpec>,
    pub edges: Vec<EdgeSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoInputs,
    NoOutputs,
    DuplicateNode(String),
    UnknownEndpoint { edge: usize, id: String },
    DuplicateEdge { src: String, dst: String },
    SelfLoop(String),
    Cycle(Vec<String>),
    IncomingToSource(String),
    OutgoingFromOutput(String),
    MultipleBias(Vec<String>),
    EmptyFanIn(String),
    EmptyFanOut(String),
    Dangling(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoInputs => write!(f, "network has no input nodes"),
            Violation::NoOutputs => write!(f, "network has no output nodes"),
            Violation::DuplicateNode(id) => write!(f, "duplicate node id `{id}`"),
            Violation::UnknownEndpoint { edge, id } => {
                write!(f, "edge {edge} references unknown node `{id}`")
            }
            Violation::DuplicateEdge { src, dst } => write!(f, "duplicate edge `{src}` -> `{dst}`"),
            Violation::SelfLoop(id) => write!(f, "cycle: self-loop on `{id}`"),
            Violation::Cycle(ids) => write!(f, "cycle through nodes {}", ids.join(", ")),
            Violation::IncomingToSource(id) => {
                write!(f, "input/bias node `{id}` has incoming edges")
            }
            Violation::OutgoingFromOutput(id) => {
                write!(f, "output node `{id}` has outgoing edges")
            }
            Violation::MultipleBias(ids) => write!(f, "more than one bias node: {}", ids.join(", ")),
            Violation::EmptyFanIn(id) => write!(f, "node `{id}` has no incoming edges (fan-in)"),
            Violation::EmptyFanOut(id) => write!(f, "internal node `{id}` has no outgoing edges (fan-out)"),
            Violation::Dangling(id) => write!(f, "dangling node `{id}` has no edges"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "  - {v}")?;
        }
        Ok(())
    }
}

/// Checks every structural invariant of a topology document and returns the
/// full list of violations.
pub fn validate_topology(doc: &TopologyDoc) -> ValidationReport {
    let mut violations = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, node) in doc.nodes.iter().enumerate() {
        if index.insert(node.id.as_str(), i).is_some() {
            violations.push(Violation::DuplicateNode(node.id.clone()));
        }
    }
    let kinds: Vec<NodeKind> = doc.nodes.iter().map(|n| n.kind).collect();
    if !kinds.contains(&NodeKind::Input) {
        violations.push(Violation::NoInputs);
    }
    if !kinds.contains(&NodeKind::Output) {
        violations.push(Violation::NoOutputs);
    }
    let biases: Vec<String> = doc
        .nodes
        .iter()
        .filter(|n| n.kind == NodeKind::Bias)
        .map(|n| n.id.clone())
        .collect();
    if biases.len() > 1 {
        violations.push(Violation::MultipleBias(biases));
    }

    let n = doc.nodes.len();
    let mut fan_in = vec![0usize; n];
    let mut fan_out = vec![0usize; n];
    let mut seen = HashSet::new();
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (e, edge) in doc.edges.iter().enumerate() {
        let src = index.get(edge.src.as_str()).copied();
        let dst = index.get(edge.dst.as_str()).copied();
        if src.is_none() {
            violations.push(Violation::UnknownEndpoint { edge: e, id: edge.src.clone() });
        }
        if dst.is_none() {
            violations.push(Violation::UnknownEndpoint { edge: e, id: edge.dst.clone() });
        }
        let (Some(s), Some(d)) = (src, dst) else { continue };
        if s == d {
            violations.push(Violation::SelfLoop(edge.src.clone()));
            continue;
        }
        if !seen.insert((s, d)) {
            violations.push(Violation::DuplicateEdge {
                src: edge.src.clone(),
                dst: edge.dst.clone(),
            });
            continue;
        }
        fan_out[s] += 1;
        fan_in[d] += 1;
        adjacency[s].push(d);
    }

    for (i, node) in doc.nodes.iter().enumerate() {
        match node.kind {
            NodeKind::Input | NodeKind::Bias => {
                if fan_in[i] > 0 {
                    violations.push(Violation::IncomingToSource(node.id.clone()));
                }
                if fan_out[i] == 0 {
                    violations.push(Violation::Dangling(node.id.clone()));
                }
            }
            NodeKind::Output => {
                if fan_out[i] > 0 {
                    violations.push(Violation::OutgoingFromOutput(node.id.clone()));
                }
                if fan_in[i] == 0 {
                    violations.push(Violation::EmptyFanIn(node.id.clone()));
                }
            }
            NodeKind::Internal => {
                if fan_in[i] == 0 && fan_out[i] == 0 {
                    violations.push(Violation::Dangling(node.id.clone()));
                } else {
                    if fan_in[i] == 0 {
                        violations.push(Violation::EmptyFanIn(node.id.clone()));
                    }
                    if fan_out[i] == 0 {
                        violations.push(Violation::EmptyFanOut(node.id.clone()));
                    }
                }
            }
        }
    }

    let (_, leftover) = kahn_order(n, &adjacency);
    if !leftover.is_empty() {
        violations.push(Violation::Cycle(
            leftover.iter().map(|&i| doc.nodes[i].id.clone()).collect(),
        ));
    }
    ValidationReport { violations }
}

/// Kahn's algorithm, ties broken by the smallest original index. Returns the
/// order and the nodes left on a cycle.
fn kahn_order(n: usize, adjacency: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>) {
    let mut indegree = vec![0usize; n];
    for targets in adjacency {
        for &d in targets {
            indegree[d] += 1;
        }
    }
    let mut heap: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(u)) = heap.pop() {
        order.push(u);
        for &d in &adjacency[u] {
            indegree[d] -= 1;
            if indegree[d] == 0 {
                heap.push(Reverse(d));
            }
        }
    }
    let leftover = (0..n).filter(|&i| indegree[i] > 0).collect();
    (order, leftover)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
}

/// Immutable, validated network architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkTopology {
    nodes: Vec<NodeSpec>,
    edges: Vec<Edge>,
    incoming: Vec<Vec<usize>>,
    outgoing: Vec<Vec<usize>>,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
    bias: Option<usize>,
}

impl NetworkTopology {
    pub fn from_doc(doc: &TopologyDoc) -> Result<Self> {
        let report = validate_topology(doc);
        if !report.is_ok() {
            return Err(Error::InvalidTopology(report));
        }
        let n = doc.nodes.len();
        let original: HashMap<&str, usize> = doc
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| (node.id.as_str(), i))
            .collect();
        let mut adjacency = vec![Vec::new(); n];
        for edge in &doc.edges {
            adjacency[original[edge.src.as_str()]].push(original[edge.dst.as_str()]);
        }
        let (order, _) = kahn_order(n, &adjacency);
        let mut position = vec![0usize; n];
        for (topo, &orig) in order.iter().enumerate() {
            position[orig] = topo;
        }
        let nodes: Vec<NodeSpec> = order.iter().map(|&i| doc.nodes[i].clone()).collect();

        let mut edges: Vec<Edge> = doc
            .edges
            .iter()
            .map(|e| Edge {
                src: position[original[e.src.as_str()]],
                dst: position[original[e.dst.as_str()]],
            })
            .collect();
        edges.sort_by_key(|e| (e.dst, e.src));

        let mut incoming = vec![Vec::new(); n];
        let mut outgoing = vec![Vec::new(); n];
        for (idx, e) in edges.iter().enumerate() {
            incoming[e.dst].push(idx);
            outgoing[e.src].push(idx);
        }

        // Inputs and outputs keep their document order, which fixes the
        // column layout of batches and network outputs.
        let by_kind = |kind: NodeKind| -> Vec<usize> {
            (0..n)
                .filter(|&orig| doc.nodes[orig].kind == kind)
                .map(|orig| position[orig])
                .collect()
        };
        let inputs = by_kind(NodeKind::Input);
        let outputs = by_kind(NodeKind::Output);
        let bias = by_kind(NodeKind::Bias).first().copied();

        Ok(Self {
            nodes,
            edges,
            incoming,
            outgoing,
            inputs,
            outputs,
            bias,
        })
    }

    /// Fully connected layered network `widths[0]-widths[1]-...`, optionally
    /// with a bias node feeding every non-input node.
    ///
    /// Node ids are `x{j}` for inputs, `h{layer}_{j}` for hidden units,
    /// `y{j}` for outputs and `bias`.
    pub fn layered(widths: &[usize], bias: bool) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layered network needs at least two non-empty layers, got {widths:?}"
            )));
        }
        let last = widths.len() - 1;
        let name = |layer: usize, j: usize| -> String {
            if layer == 0 {
                format!("x{j}")
            } else if layer == last {
                format!("y{j}")
            } else {
                format!("h{layer}_{j}")
            }
        };
        let mut nodes = Vec::new();
        if bias {
            nodes.push(NodeSpec { id: "bias".into(), kind: NodeKind::Bias });
        }
        for (layer, &width) in widths.iter().enumerate() {
            let kind = match layer {
                0 => NodeKind::Input,
                l if l == last => NodeKind::Output,
                _ => NodeKind::Internal,
            };
            for j in 0..width {
                nodes.push(NodeSpec { id: name(layer, j), kind });
            }
        }
        let mut edges = Vec::new();
        for layer in 1..widths.len() {
            for j in 0..widths[layer] {
                if bias {
                    edges.push(EdgeSpec { src: "bias".into(), dst: name(layer, j) });
                }
                for i in 0..widths[layer - 1] {
                    edges.push(EdgeSpec { src: name(layer - 1, i), dst: name(layer, j) });
                }
            }
        }
        Self::from_doc(&TopologyDoc { nodes, edges })
    }

    pub fn to_doc(&self) -> TopologyDoc {
        TopologyDoc {
            nodes: self.nodes.clone(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeSpec {
                    src: self.nodes[e.src].id.clone(),
                    dst: self.nodes[e.dst].id.clone(),
                })
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let doc: TopologyDoc = serde_json::from_str(&text)?;
        Self::from_doc(&doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_doc())?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn kind(&self, v: usize) -> NodeKind {
        self.nodes[v].kind
    }

    pub fn id(&self, v: usize) -> &str {
        &self.nodes[v].id
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, e: usize) -> Edge {
        self.edges[e]
    }

    pub fn edge_index(&self, src: usize, dst: usize) -> Option<usize> {
        self.outgoing[src].iter().copied().find(|&e| self.edges[e].dst == dst)
    }

    /// Edge indices entering `v`, in canonical order.
    pub fn incoming(&self, v: usize) -> &[usize] {
        &self.incoming[v]
    }

    /// Edge indices leaving `v`, in canonical order.
    pub fn outgoing(&self, v: usize) -> &[usize] {
        &self.outgoing[v]
    }

    pub fn inputs(&self) -> &[usize] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[usize] {
        &self.outputs
    }

    pub fn bias(&self) -> Option<usize> {
        self.bias
    }

    pub fn internal_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&v| self.nodes[v].kind == NodeKind::Internal)
    }

    pub fn num_internal(&self) -> usize {
        self.internal_nodes().count()
    }

    fn check_weights(&self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.edges.len() {
            return Err(Error::DimensionMismatch {
                what: "weight vector",
                expected: self.edges.len(),
                got: weights.len(),
            });
        }
        Ok(())
    }

    fn check_inputs(&self, inputs: &DMatrix<f64>) -> Result<()> {
        if inputs.ncols() != self.inputs.len() {
            return Err(Error::DimensionMismatch {
                what: "input width",
                expected: self.inputs.len(),
                got: inputs.ncols(),
            });
        }
        Ok(())
    }
}

/// Flat weight vector aligned to a topology's canonical edge order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(edge) = values.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFiniteWeight { edge });
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Zero-mean uniform initialisation with half-width `sqrt(2 / fan_in)`.
    pub fn init<R: Rng + ?Sized>(topology: &NetworkTopology, rng: &mut R) -> Self {
        let values = topology
            .edges()
            .iter()
            .map(|e| {
                let fan_in = topology.incoming(e.dst).len() as f64;
                let half = (2.0 / fan_in).sqrt();
                rng.random_range(-half..half)
            })
            .collect();
        Self(values)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(&self.0)? + "\n")?;
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

impl Deref for WeightVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Inputs (one row per example) plus optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: DMatrix<f64>,
    labels: Option<Labels>,
}

impl Batch {
    pub fn new(inputs: DMatrix<f64>, labels: Option<Labels>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if inputs.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("batch inputs contain non-finite entries".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != inputs.nrows() {
                return Err(Error::DimensionMismatch {
                    what: "label rows",
                    expected: inputs.nrows(),
                    got: labels.len(),
                });
            }
            if let Labels::Targets(t) = labels {
                if t.iter().any(|y| !y.is_finite()) {
                    return Err(Error::InvalidArgument("labels contain non-finite entries".into()));
                }
            }
        }
        Ok(Self { inputs, labels })
    }

    pub fn unlabeled(inputs: DMatrix<f64>) -> Result<Self> {
        Self::new(inputs, None)
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> Option<&Labels> {
        self.labels.as_ref()
    }

    /// Sub-batch with the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let inputs = self.inputs.select_rows(rows);
        let labels = self.labels.as_ref().map(|l| l.select(rows));
        Self::new(inputs, labels)
    }
}

/// Per-example pre-activations `z` and outputs `h`, one column per node in
/// topological order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub z: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

impl ActivationRecord {
    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    /// Network outputs, `n x |V_out|`.
    pub fn outputs(&self, topology: &NetworkTopology) -> DMatrix<f64> {
        self.z.select_columns(topology.outputs())
    }
}

/// Forward propagation over a batch of inputs (`n x |V_in|`).
pub fn forward(
    topology: &NetworkTopology,
    weights: &[f64],
    inputs: &DMatrix<f64>,
) -> Result<ActivationRecord> {
    topology.check_weights(weights)?;
    topology.check_inputs(inputs)?;
    let n = inputs.nrows();
    let nv = topology.num_nodes();
    let mut z = DMatrix::<f64>::zeros(n, nv);
    let mut h = DMatrix::<f64>::zeros(n, nv);
    for (j, &v) in topology.inputs().iter().enumerate() {
        z.set_column(v, &inputs.column(j));
        h.set_column(v, &inputs.column(j));
    }
    if let Some(b) = topology.bias() {
        z.column_mut(b).fill(1.0);
        h.column_mut(b).fill(1.0);
    }
    for v in 0..nv {
        let kind = topology.kind(v);
        if kind.is_source() {
            continue;
        }
        for i in 0..n {
            let mut acc = 0.0;
            for &e in topology.incoming(v) {
                acc += weights[e] * h[(i, topology.edge(e).src)];
            }
            if !acc.is_finite() {
                return Err(Error::NonFinite { node: topology.id(v).to_string() });
            }
            z[(i, v)] = acc;
            h[(i, v)] = if kind == NodeKind::Internal { acc.max(0.0) } else { acc };
        }
    }
    Ok(ActivationRecord { z, h })
}

/// Network outputs `f_w(x)` for every row of `inputs`.
pub fn predict(
    topology: &NetworkTopology,
    weights: &[f64],
    inputs: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    Ok(forward(topology, weights, inputs)?.outputs(topology))
}

/// Reverse-mode accumulation of `sum_i dL/dz_out * dz_out/dw` given the
/// output adjoints (`n x |V_out|`). The ReLU derivative at 0 is 0.
pub(crate) fn backprop(
    topology: &NetworkTopology,
    weights: &[f64],
    acts: &ActivationRecord,
    output_delta: &DMatrix<f64>,
) -> Vec<f64> {
    let n = acts.len();
    let nv = topology.num_nodes();
    let mut dz = DMatrix::<f64>::zeros(n, nv);
    for (k, &v) in topology.outputs().iter().enumerate() {
        dz.set_column(v, &output_delta.column(k));
    }
    for v in (0..nv).rev() {
        if topology.kind(v) != NodeKind::Internal {
            continue;
        }
        for i in 0..n {
            if acts.z[(i, v)] <= 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for &e in topology.outgoing(v) {
                acc += weights[e] * dz[(i, topology.edge(e).dst)];
            }
            dz[(i, v)] = acc;
        }
    }
    topology
        .edges()
        .iter()
        .map(|e| dz.column(e.dst).dot(&acts.h.column(e.src)))
        .collect()
}

/// Mean batch loss and its gradient with respect to every edge weight.
pub fn loss_and_gradient(
    topology: &NetworkTopology,
    weights: &[f64],
    batch: &Batch,
    loss: LossSpec,
) -> Result<(f64, Vec<f64>)> {
    let labels = batch.labels().ok_or(Error::MissingLabels)?;
    let acts = forward(topology, weights, batch.inputs())?;
    let outputs = acts.outputs(topology);
    let (value, delta) = loss.mean_loss_and_delta(&outputs, labels)?;
    Ok((value, backprop(topology, weights, &acts, &delta)))
}

/// `(1/n) sum_i d loss(f_w(x_i), y_i) / dw`.
pub fn loss_gradient(
    topology: &NetworkTopology,
    weights: &[f64],
    batch: &Batch,
    loss: LossSpec,
) -> Result<Vec<f64>> {
    loss_and_gradient(topology, weights, batch, loss).map(|(_, g)| g)
}

/// Mean batch loss.
pub fn batch_loss(
    topology: &NetworkTopology,
    weights: &[f64],
    batch: &Batch,
    loss: LossSpec,
) -> Result<f64> {
    let labels = batch.labels().ok_or(Error::MissingLabels)?;
    let outputs = predict(topology, weights, batch.inputs())?;
    loss.mean_loss(&outputs, labels)
}

fn check_rescalable(topology: &NetworkTopology, v: usize, rho: f64) -> Result<()> {
    if v >= topology.num_nodes() {
        return Err(Error::InvalidArgument(format!("node index {v} out of range")));
    }
    if topology.kind(v) != NodeKind::Internal {
        return Err(Error::InvalidArgument(format!(
            "node `{}` is not internal and cannot be rescaled",
            topology.id(v)
        )));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidArgument(format!("rescaling factor must be positive, got {rho}")));
    }
    Ok(())
}

/// Node-wise rescaling at internal node `v`: outgoing weights times `rho`,
/// incoming weights times `1/rho`. The network function is unchanged.
pub fn apply_node_rescaling(
    weights: &[f64],
    topology: &NetworkTopology,
    v: usize,
    rho: f64,
) -> Result<WeightVector> {
    topology.check_weights(weights)?;
    check_rescalable(topology, v, rho)?;
    let mut out = weights.to_vec();
    for &e in topology.incoming(v) {
        out[e] /= rho;
    }
    for &e in topology.outgoing(v) {
        out[e] *= rho;
    }
    WeightVector::new(out)
}

/// Largest absolute output difference between two weight settings over a
/// set of probe inputs.
pub fn function_distance(
    topology: &NetworkTopology,
    w1: &[f64],
    w2: &[f64],
    probes: &DMatrix<f64>,
) -> Result<f64> {
    if probes.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let f1 = predict(topology, w1, probes)?;
    let f2 = predict(topology, w2, probes)?;
    Ok(f1.iter().zip(f2.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Largest absolute network output over the probes.
pub fn output_scale(topology: &NetworkTopology, weights: &[f64], probes: &DMatrix<f64>) -> Result<f64> {
    Ok(predict(topology, weights, probes)?.iter().fold(0.0, |m, y| m.max(y.abs())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn doc(nodes: &[(&str, NodeKind)], edges: &[(&str, &str)]) -> TopologyDoc {
        TopologyDoc {
            nodes: nodes.iter().map(|(id, kind)| NodeSpec { id: id.to_string(), kind: *kind }).collect(),
            edges: edges
                .iter()
                .map(|(s, d)| EdgeSpec { src: s.to_string(), dst: d.to_string() })
                .collect(),
        }
    }

    fn chain() -> NetworkTopology {
        NetworkTopology::layered(&[1, 1, 1], false).unwrap()
    }

    #[test]
    fn layered_221_is_valid() {
        let t = NetworkTopology::layered(&[2, 2, 1], false).unwrap();
        assert_eq!(t.num_edges(), 6);
        assert!(validate_topology(&t.to_doc()).is_ok());
    }

    #[test]
    fn self_loop_is_a_cycle_violation() {
        use NodeKind::*;
        let d = doc(&[("x", Input), ("h", Internal), ("y", Output)], &[("x", "h"), ("h", "h"), ("h", "y")]);
        let report = validate_topology(&d);
        assert!(report.violations.contains(&Violation::SelfLoop("h".into())));
    }

    #[test]
    fn longer_cycle_is_reported() {
        use NodeKind::*;
        let d = doc(
            &[("x", Input), ("a", Internal), ("b", Internal), ("y", Output)],
            &[("x", "a"), ("a", "b"), ("b", "a"), ("b", "y")],
        );
        let report = validate_topology(&d);
        assert!(report.violations.iter().any(|v| matches!(v, Violation::Cycle(_))));
        assert!(NetworkTopology::from_doc(&d).is_err());
    }

    #[test]
    fn internal_without_fan_out_is_reported() {
        use NodeKind::*;
        let d = doc(
            &[("x", Input), ("a", Internal), ("b", Internal), ("y", Output)],
            &[("x", "a"), ("x", "b"), ("a", "y")],
        );
        let report = validate_topology(&d);
        assert_eq!(report.violations, vec![Violation::EmptyFanOut("b".into())]);
    }

    #[test]
    fn source_and_sink_violations() {
        use NodeKind::*;
        let d = doc(
            &[("x", Input), ("b", Bias), ("c", Bias), ("y", Output), ("z", Output)],
            &[("y", "x"), ("x", "y"), ("b", "y"), ("c", "y"), ("y", "z")],
        );
        let report = validate_topology(&d);
        assert!(report.violations.contains(&Violation::IncomingToSource("x".into())));
        assert!(report.violations.contains(&Violation::OutgoingFromOutput("y".into())));
        assert!(report.violations.iter().any(|v| matches!(v, Violation::MultipleBias(_))));
    }

    #[test]
    fn edge_order_is_canonical_regardless_of_file_order() {
        use NodeKind::*;
        let d = doc(
            &[("x0", Input), ("x1", Input), ("h", Internal), ("y", Output)],
            &[("h", "y"), ("x1", "h"), ("x0", "h")],
        );
        let t = NetworkTopology::from_doc(&d).unwrap();
        let named: Vec<(&str, &str)> = t.edges().iter().map(|e| (t.id(e.src), t.id(e.dst))).collect();
        assert_eq!(named, vec![("x0", "h"), ("x1", "h"), ("h", "y")]);
    }

    #[test]
    fn single_edge_forward() {
        use NodeKind::*;
        let t = NetworkTopology::from_doc(&doc(&[("x", Input), ("y", Output)], &[("x", "y")])).unwrap();
        let f = predict(&t, &[2.0], &DMatrix::from_element(1, 1, 3.0)).unwrap();
        assert_eq!(f[(0, 0)], 6.0);
    }

    #[test]
    fn relu_kills_negative_input() {
        let f = predict(&chain(), &[1.0, 1.0], &DMatrix::from_element(1, 1, -5.0)).unwrap();
        assert_eq!(f[(0, 0)], 0.0);
    }

    #[test]
    fn overflow_is_reported_with_node() {
        let err = predict(&chain(), &[1e300, 1e300], &DMatrix::from_element(1, 1, 1e10)).unwrap_err();
        match err {
            Error::NonFinite { node } => assert_eq!(node, "h1_0"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        assert!(matches!(
            predict(&chain(), &[1.0], &DMatrix::from_element(1, 1, 1.0)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            predict(&chain(), &[1.0, 1.0], &DMatrix::from_element(1, 2, 1.0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn single_edge_squared_loss_gradient() {
        use NodeKind::*;
        let t = NetworkTopology::from_doc(&doc(&[("x", Input), ("y", Output)], &[("x", "y")])).unwrap();
        let batch = Batch::new(
            DMatrix::from_element(1, 1, 1.0),
            Some(Labels::Targets(DMatrix::from_element(1, 1, 0.0))),
        )
        .unwrap();
        let g = loss_gradient(&t, &[1.0], &batch, LossSpec::Squared).unwrap();
        assert_eq!(g, vec![1.0]);
    }

    #[test]
    fn dead_units_block_gradient_below_them() {
        let t = NetworkTopology::layered(&[2, 3, 1], false).unwrap();
        // every hidden unit has negative incoming weights, inputs are positive
        let mut w = vec![-1.0; t.num_edges()];
        for &e in t.incoming(t.outputs()[0]) {
            w[e] = 0.7;
        }
        let batch = Batch::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.5, 0.1]),
            Some(Labels::Targets(DMatrix::from_row_slice(2, 1, &[1.0, -1.0]))),
        )
        .unwrap();
        let g = loss_gradient(&t, &w, &batch, LossSpec::Squared).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn missing_labels_is_an_error() {
        let batch = Batch::unlabeled(DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!(matches!(
            loss_gradient(&chain(), &[1.0, 1.0], &batch, LossSpec::Squared),
            Err(Error::MissingLabels)
        ));
    }

    #[test]
    fn rescaling_identity_and_chain_example() {
        let t = chain();
        let h = t.node_index("h1_0").unwrap();
        assert_eq!(apply_node_rescaling(&[2.0, 3.0], &t, h, 1.0).unwrap().as_slice(), &[2.0, 3.0]);
        assert_eq!(apply_node_rescaling(&[2.0, 3.0], &t, h, 2.0).unwrap().as_slice(), &[1.0, 6.0]);
    }

    #[test]
    fn rescaling_rejects_non_internal_and_bad_rho() {
        let t = chain();
        let x = t.node_index("x0").unwrap();
        let h = t.node_index("h1_0").unwrap();
        assert!(apply_node_rescaling(&[2.0, 3.0], &t, x, 2.0).is_err());
        assert!(apply_node_rescaling(&[2.0, 3.0], &t, h, 0.0).is_err());
        assert!(apply_node_rescaling(&[2.0, 3.0], &t, h, -1.0).is_err());
    }

    #[test]
    fn function_distance_basics() {
        let t = NetworkTopology::layered(&[2, 3, 1], true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = WeightVector::init(&t, &mut rng);
        let probes = DMatrix::from_fn(16, 2, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(function_distance(&t, &w, &w, &probes).unwrap(), 0.0);
        // perturb the bias -> output edge, which is always live
        let y = t.outputs()[0];
        let e = t.edge_index(t.bias().unwrap(), y).unwrap();
        let mut w2 = w.as_slice().to_vec();
        w2[e] += 0.1;
        assert!(function_distance(&t, &w, &w2, &probes).unwrap() > 0.0);
        assert!(function_distance(&t, &w, &w2, &DMatrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn init_respects_fan_in_scale() {
        let t = NetworkTopology::layered(&[8, 4, 1], false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = WeightVector::init(&t, &mut rng);
        for (e, edge) in t.edges().iter().enumerate() {
            let half = (2.0 / t.incoming(edge.dst).len() as f64).sqrt();
            assert!(w[e].abs() < half);
        }
    }

    #[test]
    fn topology_file_round_trip() {
        let t = NetworkTopology::layered(&[2, 2, 2, 1], true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        t.save(&path).unwrap();
        assert_eq!(NetworkTopology::load(&path).unwrap(), t);
    }

    #[test]
    fn weights_file_is_bit_exact() {
        let w = WeightVector::new(vec![0.1, -1.0 / 3.0, 1e-300, std::f64::consts::PI]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        w.save(&path).unwrap();
        let back = WeightVector::load(&path).unwrap();
        for (a, b) in w.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
