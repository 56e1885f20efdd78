//! Operator-graph representation shared by the fusion engine, the cost model
//! and the search-space lowering.
//!
//! Shapes exclude the batch dimension. Dense ops work on the last axis of a
//! rank-1 (features) or rank-2 (tokens × features) shape; convolutions work on
//! rank-3 `[channels, height, width]` shapes.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tensor shape without the batch dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TensorShape(pub Vec<u64>);

impl TensorShape {
    pub fn new(dims: impl Into<Vec<u64>>) -> Self {
        TensorShape(dims.into())
    }

    pub fn dims(&self) -> &[u64] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> u64 {
        self.0.iter().product()
    }

    pub fn last(&self) -> u64 {
        self.0.last().copied().unwrap_or(0)
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Input,
    Linear,
    Conv2d,
    BatchNorm,
    LayerNorm,
    ReLU,
    GELU,
    Add,
    Concat,
    MultiHeadAttention,
    Embedding,
    Output,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::Input,
        OpKind::Linear,
        OpKind::Conv2d,
        OpKind::BatchNorm,
        OpKind::LayerNorm,
        OpKind::ReLU,
        OpKind::GELU,
        OpKind::Add,
        OpKind::Concat,
        OpKind::MultiHeadAttention,
        OpKind::Embedding,
        OpKind::Output,
    ];

    /// Attribute keys a node of this kind must carry, and nothing else.
    pub fn required_attrs(self) -> &'static [&'static str] {
        match self {
            OpKind::Linear => &["in_features", "out_features"],
            OpKind::Conv2d => &[
                "in_channels",
                "out_channels",
                "kernel_size",
                "stride",
                "groups",
                "dilation",
            ],
            OpKind::MultiHeadAttention => &["num_heads", "embed_dim", "qkv_dim"],
            OpKind::Concat => &["axis"],
            OpKind::Embedding => &["num_features", "embed_dim"],
            _ => &[],
        }
    }

    /// Lower-case name used in rules files and kernel labels.
    pub fn short_name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Linear => "linear",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batchnorm",
            OpKind::LayerNorm => "layernorm",
            OpKind::ReLU => "relu",
            OpKind::GELU => "gelu",
            OpKind::Add => "add",
            OpKind::Concat => "concat",
            OpKind::MultiHeadAttention => "mha",
            OpKind::Embedding => "embedding",
            OpKind::Output => "output",
        }
    }

    /// Parses a short name or one of the common aliases (`conv`, `bn`, `ln`, ...).
    pub fn from_short_name(name: &str) -> Option<OpKind> {
        let lower = name.trim().to_ascii_lowercase();
        let kind = match lower.as_str() {
            "input" => OpKind::Input,
            "linear" | "dense" | "fc" | "matmul" => OpKind::Linear,
            "conv2d" | "conv" => OpKind::Conv2d,
            "batchnorm" | "bn" => OpKind::BatchNorm,
            "layernorm" | "ln" => OpKind::LayerNorm,
            "relu" => OpKind::ReLU,
            "gelu" => OpKind::GELU,
            "add" => OpKind::Add,
            "concat" => OpKind::Concat,
            "mha" | "multiheadattention" | "attention" => OpKind::MultiHeadAttention,
            "embedding" => OpKind::Embedding,
            "output" => OpKind::Output,
            _ => return None,
        };
        Some(kind)
    }

    /// Input and Output mark graph boundaries; they are not executed.
    pub fn is_boundary(self) -> bool {
        matches!(self, OpKind::Input | OpKind::Output)
    }

    fn arity(self) -> Arity {
        match self {
            OpKind::Input => Arity::Exactly(0),
            OpKind::Add | OpKind::Concat => Arity::AtLeast(2),
            _ => Arity::Exactly(1),
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Arity {
    Exactly(usize),
    AtLeast(usize),
}

impl Arity {
    fn accepts(self, n: usize) -> bool {
        match self {
            Arity::Exactly(k) => n == k,
            Arity::AtLeast(k) => n >= k,
        }
    }
}

impl fmt::Display for Arity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arity::Exactly(k) => write!(f, "{k}"),
            Arity::AtLeast(k) => write!(f, "at least {k}"),
        }
    }
}

pub type Attrs = BTreeMap<String, u64>;

/// One operator. For multi-input nodes `input_shape` is the shape of the first
/// incoming edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpNode {
    pub id: String,
    pub kind: OpKind,
    #[serde(default)]
    pub attrs: Attrs,
    #[serde(default)]
    pub input_shape: Option<TensorShape>,
    #[serde(default)]
    pub output_shape: Option<TensorShape>,
}

impl OpNode {
    pub fn new(id: impl Into<String>, kind: OpKind) -> Self {
        OpNode {
            id: id.into(),
            kind,
            attrs: Attrs::new(),
            input_shape: None,
            output_shape: None,
        }
    }

    pub fn with_attr(mut self, key: &str, value: u64) -> Self {
        self.attrs.insert(key.to_string(), value);
        self
    }

    pub fn input(id: impl Into<String>, shape: impl Into<Vec<u64>>) -> Self {
        let shape = TensorShape::new(shape);
        let mut node = OpNode::new(id, OpKind::Input);
        node.input_shape = Some(shape.clone());
        node.output_shape = Some(shape);
        node
    }

    pub fn linear(id: impl Into<String>, in_features: u64, out_features: u64) -> Self {
        OpNode::new(id, OpKind::Linear)
            .with_attr("in_features", in_features)
            .with_attr("out_features", out_features)
    }

    pub fn conv2d(
        id: impl Into<String>,
        in_channels: u64,
        out_channels: u64,
        kernel_size: u64,
        stride: u64,
    ) -> Self {
        OpNode::new(id, OpKind::Conv2d)
            .with_attr("in_channels", in_channels)
            .with_attr("out_channels", out_channels)
            .with_attr("kernel_size", kernel_size)
            .with_attr("stride", stride)
            .with_attr("groups", 1)
            .with_attr("dilation", 1)
    }

    pub fn attr(&self, key: &str) -> Option<u64> {
        self.attrs.get(key).copied()
    }

    fn req(&self, key: &str) -> std::result::Result<u64, ShapeIssue> {
        self.attr(key)
            .ok_or_else(|| ShapeIssue::Other(format!("missing attribute `{key}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputationGraph {
    pub nodes: Vec<OpNode>,
    pub edges: Vec<(String, String)>,
}

/// One broken graph invariant; a validation report is a list of these.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    DuplicateNode { node: String },
    DanglingEdge { from: String, to: String },
    Cycle { nodes: Vec<String> },
    Unreachable { node: String },
    DeadEnd { node: String },
    Attributes { node: String, missing: Vec<String>, extra: Vec<String> },
    Arity { node: String, expected: String, found: usize },
    MissingShape { node: String },
    ZeroDim { node: String },
    ShapeMismatch { producer: String, consumer: String, detail: String },
    InferredShape { node: String, declared: String, inferred: String },
    Unshapable { node: String, detail: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateNode { node } => write!(f, "duplicate node id `{node}`"),
            Violation::DanglingEdge { from, to } => {
                write!(f, "edge {from} -> {to} references a missing node")
            }
            Violation::Cycle { nodes } => write!(f, "cycle through {}", nodes.join(", ")),
            Violation::Unreachable { node } => write!(f, "`{node}` is not reachable from an input"),
            Violation::DeadEnd { node } => write!(f, "`{node}` does not reach an output"),
            Violation::Attributes {
                node,
                missing,
                extra,
            } => write!(f, "`{node}` attributes: missing {missing:?}, unexpected {extra:?}"),
            Violation::Arity {
                node,
                expected,
                found,
            } => write!(f, "`{node}` expects {expected} inputs, has {found}"),
            Violation::MissingShape { node } => write!(f, "`{node}` has no output shape"),
            Violation::ZeroDim { node } => write!(f, "`{node}` has a zero-sized dimension"),
            Violation::ShapeMismatch {
                producer,
                consumer,
                detail,
            } => write!(f, "shape mismatch {producer} -> {consumer}: {detail}"),
            Violation::InferredShape {
                node,
                declared,
                inferred,
            } => write!(f, "`{node}` declares {declared} but inference gives {inferred}"),
            Violation::Unshapable { node, detail } => write!(f, "`{node}`: {detail}"),
        }
    }
}

/// Why a single node could not be shaped.
#[derive(Debug, Clone, PartialEq)]
enum ShapeIssue {
    /// The `index`-th input has the wrong shape.
    Input { index: usize, detail: String },
    Other(String),
}

impl ComputationGraph {
    pub fn new() -> Self {
        ComputationGraph {
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    }

    pub fn add_node(&mut self, node: OpNode) -> &mut Self {
        self.nodes.push(node);
        self
    }

    pub fn add_edge(&mut self, from: impl Into<String>, to: impl Into<String>) -> &mut Self {
        self.edges.push((from.into(), to.into()));
        self
    }

    /// Appends `node` and connects each of `inputs` to it, in order.
    pub fn push(&mut self, node: OpNode, inputs: &[&str]) -> String {
        let id = node.id.clone();
        self.nodes.push(node);
        for input in inputs {
            self.edges.push((input.to_string(), id.clone()));
        }
        id
    }

    pub fn node(&self, id: &str) -> Option<&OpNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect()
    }

    /// Producers of `id` in edge order.
    pub fn predecessors(&self, id: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|(_, to)| to == id)
            .map(|(from, _)| from.as_str())
            .collect()
    }

    /// Consumers of `id` in edge order.
    pub fn successors(&self, id: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|(from, _)| from == id)
            .map(|(_, to)| to.as_str())
            .collect()
    }

    pub fn inputs(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.kind == OpKind::Input)
            .map(|n| n.id.as_str())
            .collect()
    }

    pub fn outputs(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.kind == OpKind::Output)
            .map(|n| n.id.as_str())
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Checks every graph invariant and returns the violations found. An
    /// empty report means the graph is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut report = Vec::new();
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if index.insert(n.id.as_str(), i).is_some() {
                report.push(Violation::DuplicateNode { node: n.id.clone() });
            }
        }

        let mut live_edges = Vec::new();
        for (from, to) in &self.edges {
            match (index.get(from.as_str()), index.get(to.as_str())) {
                (Some(&a), Some(&b)) => live_edges.push((a, b)),
                _ => report.push(Violation::DanglingEdge {
                    from: from.clone(),
                    to: to.clone(),
                }),
            }
        }

        let n = self.nodes.len();
        let mut dag: petgraph::Graph<(), ()> = petgraph::Graph::with_capacity(n, live_edges.len());
        let handles: Vec<_> = (0..n).map(|_| dag.add_node(())).collect();
        for &(a, b) in &live_edges {
            dag.add_edge(handles[a], handles[b], ());
        }
        let mut cyclic = false;
        for scc in petgraph::algo::tarjan_scc(&dag) {
            let self_loop = scc.len() == 1 && dag.contains_edge(scc[0], scc[0]);
            if scc.len() > 1 || self_loop {
                cyclic = true;
                let mut members: Vec<usize> = scc.iter().map(|h| h.index()).collect();
                members.sort_unstable();
                report.push(Violation::Cycle {
                    nodes: members.iter().map(|&i| self.nodes[i].id.clone()).collect(),
                });
            }
        }

        let mut succ = vec![Vec::new(); n];
        let mut pred = vec![Vec::new(); n];
        for &(a, b) in &live_edges {
            succ[a].push(b);
            pred[b].push(a);
        }
        let forward = reach(
            self.nodes
                .iter()
                .enumerate()
                .filter(|(_, nd)| nd.kind == OpKind::Input)
                .map(|(i, _)| i),
            &succ,
            n,
        );
        let backward = reach(
            self.nodes
                .iter()
                .enumerate()
                .filter(|(_, nd)| nd.kind == OpKind::Output)
                .map(|(i, _)| i),
            &pred,
            n,
        );
        for (i, node) in self.nodes.iter().enumerate() {
            if node.kind != OpKind::Input && !forward[i] {
                report.push(Violation::Unreachable {
                    node: node.id.clone(),
                });
            }
            if !backward[i] {
                report.push(Violation::DeadEnd {
                    node: node.id.clone(),
                });
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            let required = node.kind.required_attrs();
            let missing: Vec<String> = required
                .iter()
                .filter(|k| !node.attrs.contains_key(**k))
                .map(|k| k.to_string())
                .collect();
            let extra: Vec<String> = node
                .attrs
                .keys()
                .filter(|k| !required.contains(&k.as_str()))
                .cloned()
                .collect();
            if !missing.is_empty() || !extra.is_empty() {
                report.push(Violation::Attributes {
                    node: node.id.clone(),
                    missing,
                    extra,
                });
            }
            let arity = node.kind.arity();
            if !arity.accepts(pred[i].len()) {
                report.push(Violation::Arity {
                    node: node.id.clone(),
                    expected: arity.to_string(),
                    found: pred[i].len(),
                });
            }
            for shape in [&node.input_shape, &node.output_shape].into_iter().flatten() {
                if shape.0.contains(&0) {
                    report.push(Violation::ZeroDim {
                        node: node.id.clone(),
                    });
                    break;
                }
            }
        }

        // Shape agreement is only meaningful on acyclic graphs with sane arity.
        if cyclic {
            return report;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(declared) = &node.output_shape else {
                report.push(Violation::MissingShape {
                    node: node.id.clone(),
                });
                continue;
            };
            if !node.kind.arity().accepts(pred[i].len()) {
                continue;
            }
            let producer_shapes: Option<Vec<&TensorShape>> = pred[i]
                .iter()
                .map(|&p| self.nodes[p].output_shape.as_ref())
                .collect();
            let Some(producer_shapes) = producer_shapes else {
                continue;
            };
            match infer_node(node, &producer_shapes) {
                Ok(inferred) => {
                    if &inferred != declared {
                        report.push(Violation::InferredShape {
                            node: node.id.clone(),
                            declared: declared.to_string(),
                            inferred: inferred.to_string(),
                        });
                    }
                }
                Err(ShapeIssue::Input { index, detail }) => {
                    report.push(Violation::ShapeMismatch {
                        producer: self.nodes[pred[i][index]].id.clone(),
                        consumer: node.id.clone(),
                        detail,
                    });
                }
                Err(ShapeIssue::Other(detail)) => report.push(Violation::Unshapable {
                    node: node.id.clone(),
                    detail,
                }),
            }
        }
        report
    }

    /// Validates, tolerating absent shapes, then infers them.
    pub fn shaped(&self) -> Result<ComputationGraph> {
        let report: Vec<String> = self
            .validate()
            .iter()
            .filter(|v| !matches!(v, Violation::MissingShape { .. }))
            .map(ToString::to_string)
            .collect();
        if !report.is_empty() {
            return Err(Error::InvalidGraph(report.join("; ")));
        }
        self.infer_shapes()
    }

    /// Fills every node's `input_shape` and `output_shape` from the Input
    /// nodes' shapes, in topological order.
    pub fn infer_shapes(&self) -> Result<ComputationGraph> {
        let levels = self.topological_levels()?;
        let index = self.index();
        let mut out = self.clone();
        for id in levels.iter().flatten() {
            let i = index[id.as_str()];
            let preds: Vec<usize> = self
                .predecessors(id)
                .iter()
                .map(|p| {
                    index
                        .get(p)
                        .copied()
                        .ok_or_else(|| Error::InvalidGraph(format!("edge from missing node `{p}`")))
                })
                .collect::<Result<_>>()?;
            let node = &out.nodes[i];
            if node.kind == OpKind::Input {
                let shape = node
                    .input_shape
                    .clone()
                    .or_else(|| node.output_shape.clone())
                    .ok_or_else(|| Error::Shape {
                        node: id.clone(),
                        reason: "input node has no shape".into(),
                    })?;
                out.nodes[i].input_shape = Some(shape.clone());
                out.nodes[i].output_shape = Some(shape);
                continue;
            }
            let arity = node.kind.arity();
            if !arity.accepts(preds.len()) {
                return Err(Error::Shape {
                    node: id.clone(),
                    reason: format!("expects {arity} inputs, has {}", preds.len()),
                });
            }
            let shapes: Vec<TensorShape> = preds
                .iter()
                .map(|&p| out.nodes[p].output_shape.clone().expect("producer shaped first"))
                .collect();
            let refs: Vec<&TensorShape> = shapes.iter().collect();
            let inferred = infer_node(&out.nodes[i], &refs).map_err(|issue| Error::Shape {
                node: id.clone(),
                reason: match issue {
                    ShapeIssue::Input { index, detail } => {
                        format!("input from `{}`: {detail}", self.nodes[preds[index]].id)
                    }
                    ShapeIssue::Other(detail) => detail,
                },
            })?;
            out.nodes[i].input_shape = shapes.into_iter().next();
            out.nodes[i].output_shape = Some(inferred);
        }
        Ok(out)
    }

    /// Groups nodes by longest-path depth from the zero-in-degree nodes using
    /// an in-degree-decrementing BFS. Nodes within a level keep insertion order.
    pub fn topological_levels(&self) -> Result<Vec<Vec<String>>> {
        let index = self.index();
        let n = self.nodes.len();
        let mut in_degree = vec![0usize; n];
        let mut out_edges = vec![Vec::new(); n];
        for (from, to) in &self.edges {
            let (Some(&a), Some(&b)) = (index.get(from.as_str()), index.get(to.as_str())) else {
                return Err(Error::InvalidGraph(format!(
                    "edge {from} -> {to} references a missing node"
                )));
            };
            in_degree[b] += 1;
            out_edges[a].push(b);
        }
        let levels = bfs_levels(&mut in_degree, &out_edges);
        let seen: usize = levels.iter().map(Vec::len).sum();
        if seen != n {
            let mut placed = vec![false; n];
            for &i in levels.iter().flatten() {
                placed[i] = true;
            }
            let stuck = (0..n)
                .filter(|&i| !placed[i])
                .map(|i| self.nodes[i].id.clone())
                .collect();
            return Err(Error::Cycle(stuck));
        }
        Ok(levels
            .into_iter()
            .map(|level| level.into_iter().map(|i| self.nodes[i].id.clone()).collect())
            .collect())
    }

    /// Node ids in a topological order (levels concatenated).
    pub fn topological_order(&self) -> Result<Vec<String>> {
        Ok(self.topological_levels()?.into_iter().flatten().collect())
    }
}

impl Default for ComputationGraph {
    fn default() -> Self {
        Self::new()
    }
}

/// Level-synchronous Kahn traversal over index adjacency. Returns indices per
/// level, each level sorted ascending. Nodes on cycles are never emitted.
pub(crate) fn bfs_levels(in_degree: &mut [usize], out_edges: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut queue: VecDeque<usize> = (0..in_degree.len()).filter(|&i| in_degree[i] == 0).collect();
    let mut levels = Vec::new();
    while !queue.is_empty() {
        let mut current_level = Vec::with_capacity(queue.len());
        for _ in 0..queue.len() {
            let cur = queue.pop_front().expect("queue length checked");
            current_level.push(cur);
            for &succ in &out_edges[cur] {
                in_degree[succ] -= 1;
                if in_degree[succ] == 0 {
                    queue.push_back(succ);
                }
            }
        }
        current_level.sort_unstable();
        levels.push(current_level);
    }
    levels
}

fn reach(seeds: impl Iterator<Item = usize>, adj: &[Vec<usize>], n: usize) -> Vec<bool> {
    let mut seen = vec![false; n];
    let mut stack: Vec<usize> = seeds.collect();
    for &s in &stack {
        seen[s] = true;
    }
    while let Some(v) = stack.pop() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    seen
}

/// Output size of a convolution with half padding `floor(d(k-1)/2)`.
pub fn conv_out_size(size: u64, kernel: u64, stride: u64, dilation: u64) -> u64 {
    let pad = dilation * (kernel - 1) / 2;
    (size + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1
}

fn infer_node(node: &OpNode, inputs: &[&TensorShape]) -> std::result::Result<TensorShape, ShapeIssue> {
    let one = || -> std::result::Result<&TensorShape, ShapeIssue> {
        inputs
            .first()
            .copied()
            .ok_or_else(|| ShapeIssue::Other("no input".into()))
    };
    match node.kind {
        OpKind::Input => node
            .input_shape
            .clone()
            .or_else(|| node.output_shape.clone())
            .ok_or_else(|| ShapeIssue::Other("input node has no shape".into())),
        OpKind::Output
        | OpKind::ReLU
        | OpKind::GELU
        | OpKind::BatchNorm
        | OpKind::LayerNorm => Ok(one()?.clone()),
        OpKind::Linear => {
            let x = one()?;
            let fin = node.req("in_features")?;
            let fout = node.req("out_features")?;
            if !(1..=2).contains(&x.rank()) || x.last() != fin {
                return Err(ShapeIssue::Input {
                    index: 0,
                    detail: format!("linear expects [..,{fin}], got {x}"),
                });
            }
            let mut dims = x.0.clone();
            *dims.last_mut().expect("rank >= 1") = fout;
            Ok(TensorShape(dims))
        }
        OpKind::Conv2d => {
            let x = one()?;
            let cin = node.req("in_channels")?;
            let cout = node.req("out_channels")?;
            let k = node.req("kernel_size")?;
            let s = node.req("stride")?;
            let g = node.req("groups")?;
            let d = node.req("dilation")?;
            if k == 0 || s == 0 || g == 0 || d == 0 {
                return Err(ShapeIssue::Other("conv attributes must be >= 1".into()));
            }
            if cin % g != 0 || cout % g != 0 {
                return Err(ShapeIssue::Other(format!(
                    "channels {cin}->{cout} not divisible by groups {g}"
                )));
            }
            if x.rank() != 3 || x.0[0] != cin {
                return Err(ShapeIssue::Input {
                    index: 0,
                    detail: format!("conv expects [{cin},h,w], got {x}"),
                });
            }
            let (h, w) = (x.0[1], x.0[2]);
            if h + 2 * (d * (k - 1) / 2) < d * (k - 1) + 1 || w + 2 * (d * (k - 1) / 2) < d * (k - 1) + 1 {
                return Err(ShapeIssue::Input {
                    index: 0,
                    detail: format!("spatial size {h}x{w} smaller than the receptive field"),
                });
            }
            Ok(TensorShape(vec![
                cout,
                conv_out_size(h, k, s, d),
                conv_out_size(w, k, s, d),
            ]))
        }
        OpKind::Add => {
            let first = one()?;
            for (i, x) in inputs.iter().enumerate().skip(1) {
                if *x != first {
                    return Err(ShapeIssue::Input {
                        index: i,
                        detail: format!("add operand {x} differs from {first}"),
                    });
                }
            }
            Ok(first.clone())
        }
        OpKind::Concat => {
            let axis = node.req("axis")? as usize;
            let first = one()?;
            if axis >= first.rank() {
                return Err(ShapeIssue::Other(format!(
                    "axis {axis} out of range for {first}"
                )));
            }
            let mut dims = first.0.clone();
            for (i, x) in inputs.iter().enumerate().skip(1) {
                let compatible = x.rank() == first.rank()
                    && x.0.iter()
                        .zip(&first.0)
                        .enumerate()
                        .all(|(j, (a, b))| j == axis || a == b);
                if !compatible {
                    return Err(ShapeIssue::Input {
                        index: i,
                        detail: format!("concat operand {x} incompatible with {first} on axis {axis}"),
                    });
                }
                dims[axis] += x.0[axis];
            }
            Ok(TensorShape(dims))
        }
        OpKind::MultiHeadAttention => {
            let x = one()?;
            let heads = node.req("num_heads")?;
            let embed = node.req("embed_dim")?;
            let qkv = node.req("qkv_dim")?;
            if heads == 0 || qkv == 0 {
                return Err(ShapeIssue::Other("attention sizes must be >= 1".into()));
            }
            if x.rank() != 2 || x.last() != embed {
                return Err(ShapeIssue::Input {
                    index: 0,
                    detail: format!("attention expects [tokens,{embed}], got {x}"),
                });
            }
            Ok(x.clone())
        }
        OpKind::Embedding => {
            let x = one()?;
            let features = node.req("num_features")?;
            let embed = node.req("embed_dim")?;
            if x.rank() != 1 || x.0[0] != features {
                return Err(ShapeIssue::Input {
                    index: 0,
                    detail: format!("embedding expects [{features}], got {x}"),
                });
            }
            // One token per feature plus the CLS token.
            Ok(TensorShape(vec![features + 1, embed]))
        }
    }
}

/// Nodes reachable from `start` (inclusive), used by tests and lowering checks.
pub fn descendants<'a>(graph: &'a ComputationGraph, start: &str) -> HashSet<&'a str> {
    let mut seen = HashSet::new();
    let mut stack = vec![start];
    while let Some(v) = stack.pop() {
        for s in graph.successors(v) {
            if seen.insert(s) {
                stack.push(s);
            }
        }
    }
    seen
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> ComputationGraph {
        let mut g = ComputationGraph::new();
        g.push(OpNode::input("x", [8]), &[]);
        g.push(OpNode::linear("fc", 8, 16), &["x"]);
        g.push(OpNode::new("y", OpKind::Output), &["fc"]);
        g.infer_shapes().unwrap()
    }

    #[test]
    fn minimal_chain_is_valid() {
        assert!(chain().validate().is_empty());
    }

    #[test]
    fn linear_output_shape() {
        let g = chain();
        assert_eq!(g.node("fc").unwrap().output_shape, Some(TensorShape::new([16])));
    }

    #[test]
    fn two_node_cycle_reports_one_cycle() {
        let mut g = ComputationGraph::new();
        g.push(OpNode::new("a", OpKind::ReLU), &[]);
        g.push(OpNode::new("b", OpKind::ReLU), &["a"]);
        g.add_edge("b", "a");
        let report = g.validate();
        let cycles: Vec<_> = report
            .iter()
            .filter(|v| matches!(v, Violation::Cycle { .. }))
            .collect();
        assert_eq!(cycles.len(), 1);
        assert_eq!(
            cycles[0],
            &Violation::Cycle {
                nodes: vec!["a".into(), "b".into()]
            }
        );
        assert!(g.topological_levels().is_err());
    }

    #[test]
    fn linear_width_mismatch_names_both_nodes() {
        let mut g = ComputationGraph::new();
        g.push(OpNode::input("x", [8]), &[]);
        g.push(OpNode::linear("a", 8, 4), &["x"]);
        g.push(OpNode::linear("b", 8, 2), &["a"]);
        g.push(OpNode::new("y", OpKind::Output), &["b"]);
        // Shapes declared by hand: a produces [4], b claims [2].
        g.nodes[0].output_shape = Some(TensorShape::new([8]));
        g.nodes[1].output_shape = Some(TensorShape::new([4]));
        g.nodes[2].output_shape = Some(TensorShape::new([2]));
        g.nodes[3].output_shape = Some(TensorShape::new([2]));
        let report = g.validate();
        assert!(report.contains(&Violation::ShapeMismatch {
            producer: "a".into(),
            consumer: "b".into(),
            detail: "linear expects [..,8], got [4]".into(),
        }));
        assert!(g.infer_shapes().is_err());
    }

    #[test]
    fn concat_sums_axis() {
        let mut g = ComputationGraph::new();
        g.push(OpNode::input("x", [8]), &[]);
        g.push(OpNode::linear("a", 8, 16), &["x"]);
        g.push(OpNode::linear("b", 8, 32), &["x"]);
        g.push(OpNode::new("cat", OpKind::Concat).with_attr("axis", 0), &["a", "b"]);
        g.push(OpNode::new("y", OpKind::Output), &["cat"]);
        let g = g.infer_shapes().unwrap();
        assert_eq!(g.node("cat").unwrap().output_shape, Some(TensorShape::new([48])));
        assert!(g.validate().is_empty());
    }

    #[test]
    fn concat_mismatch_is_error_naming_node() {
        let mut g = ComputationGraph::new();
        g.push(OpNode::input("x", [3, 8, 8]), &[]);
        g.push(OpNode::conv2d("a", 3, 4, 3, 1), &["x"]);
        g.push(OpNode::conv2d("b", 3, 4, 3, 2), &["x"]);
        g.push(OpNode::new("cat", OpKind::Concat).with_attr("axis", 0), &["a", "b"]);
        g.push(OpNode::new("y", OpKind::Output), &["cat"]);
        match g.infer_shapes() {
            Err(Error::Shape { node, .. }) => assert_eq!(node, "cat"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn conv_same_padding() {
        // Hand oracle: pad = 1, (32 + 2 - 2 - 1) / 1 + 1 = 32.
        let mut g = ComputationGraph::new();
        g.push(OpNode::input("x", [3, 32, 32]), &[]);
        g.push(OpNode::conv2d("c", 3, 8, 3, 1), &["x"]);
        g.push(OpNode::new("y", OpKind::Output), &["c"]);
        let g = g.infer_shapes().unwrap();
        assert_eq!(g.node("c").unwrap().output_shape, Some(TensorShape::new([8, 32, 32])));
        assert_eq!(conv_out_size(32, 3, 2, 1), 16);
        assert_eq!(conv_out_size(32, 5, 1, 2), 32);
        assert_eq!(conv_out_size(7, 1, 2, 1), 4);
    }

    #[test]
    fn diamond_levels() {
        let mut g = ComputationGraph::new();
        g.push(OpNode::new("A", OpKind::ReLU), &[]);
        g.push(OpNode::new("B", OpKind::ReLU), &["A"]);
        g.push(OpNode::new("C", OpKind::ReLU), &["A"]);
        g.push(OpNode::new("D", OpKind::Add), &["B", "C"]);
        let levels = g.topological_levels().unwrap();
        assert_eq!(levels, vec![vec!["A"], vec!["B", "C"], vec!["D"]]);
    }

    #[test]
    fn chain_levels_are_singletons() {
        let mut g = ComputationGraph::new();
        g.push(OpNode::new("n0", OpKind::ReLU), &[]);
        for i in 1..6 {
            g.push(OpNode::new(format!("n{i}"), OpKind::ReLU), &[&format!("n{}", i - 1)]);
        }
        let levels = g.topological_levels().unwrap();
        assert_eq!(levels.len(), 6);
        assert!(levels.iter().all(|l| l.len() == 1));
    }

    #[test]
    fn longest_path_depth_not_shortest() {
        // x -> a -> b -> c and x -> c: c sits at depth 3.
        let mut g = ComputationGraph::new();
        g.push(OpNode::new("x", OpKind::ReLU), &[]);
        g.push(OpNode::new("a", OpKind::ReLU), &["x"]);
        g.push(OpNode::new("b", OpKind::ReLU), &["a"]);
        g.push(OpNode::new("c", OpKind::Add), &["b", "x"]);
        let levels = g.topological_levels().unwrap();
        assert_eq!(levels[3], vec!["c"]);
    }

    #[test]
    fn unknown_kind_and_keys_rejected() {
        let bad_kind = r#"{"nodes":[{"id":"a","kind":"Softmax","attrs":{},"input_shape":null,"output_shape":null}],"edges":[]}"#;
        assert!(ComputationGraph::from_json(bad_kind).is_err());
        let bad_key = r#"{"nodes":[],"edges":[],"extra":1}"#;
        assert!(ComputationGraph::from_json(bad_key).is_err());
    }

    #[test]
    fn extra_attribute_is_violation() {
        let mut g = chain();
        g.nodes[1].attrs.insert("bias".into(), 1);
        assert!(g
            .validate()
            .iter()
            .any(|v| matches!(v, Violation::Attributes { extra, .. } if extra == &vec!["bias".to_string()])));
    }

    #[test]
    fn infer_is_idempotent() {
        let g = chain();
        assert_eq!(g.infer_shapes().unwrap(), g);
    }
}
