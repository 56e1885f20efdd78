//! Kernel detection: greedy rule-based fusion followed by merging of
//! parallelizable convolution kernels.
//!
//! Input and Output nodes are graph boundaries and never become kernels.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{bfs_levels, ComputationGraph, OpKind, OpNode};

/// A chain of op kinds a backend executes as one kernel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionRule {
    pub pattern: Vec<OpKind>,
    pub name: String,
}

impl FusionRule {
    pub fn new(pattern: Vec<OpKind>) -> Result<Self> {
        if pattern.len() < 2 {
            return Err(invalid("a fusion rule needs at least two ops"));
        }
        if let Some(k) = pattern.iter().find(|k| k.is_boundary()) {
            return Err(invalid(format!("{k} cannot take part in fusion")));
        }
        Ok(FusionRule {
            name: kernel_label(&pattern),
            pattern,
        })
    }
}

pub fn kernel_label(ops: &[OpKind]) -> String {
    ops.iter()
        .map(|k| k.short_name())
        .collect::<Vec<_>>()
        .join("+")
}

/// Parses a rules file: one rule per line, op names joined by `+`, `#`
/// starts a comment.
pub fn parse_rules(text: &str) -> Result<Vec<FusionRule>> {
    let mut rules: Vec<FusionRule> = Vec::new();
    let mut seen: HashMap<Vec<OpKind>, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut pattern = Vec::new();
        for part in line.split('+') {
            let kind = OpKind::from_short_name(part).ok_or_else(|| Error::Rules {
                line: line_no,
                message: format!("unknown op `{}`", part.trim()),
            })?;
            pattern.push(kind);
        }
        let rule = FusionRule::new(pattern).map_err(|e| Error::Rules {
            line: line_no,
            message: match e {
                Error::InvalidArgument(m) => m,
                other => other.to_string(),
            },
        })?;
        if let Some(first) = seen.insert(rule.pattern.clone(), line_no) {
            return Err(Error::Rules {
                line: line_no,
                message: format!("duplicate of rule on line {first}"),
            });
        }
        rules.push(rule);
    }
    Ok(rules)
}

pub fn load_rules(path: impl AsRef<Path>) -> Result<Vec<FusionRule>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rules(&text)
}

/// Rule set applied when the caller gives none explicitly.
pub const DEFAULT_RULES: &str = "\
# conv backends
conv2d+batchnorm+relu
conv2d+batchnorm
conv2d+relu
# dense backends
linear+relu
linear+gelu
layernorm+linear
";

pub fn default_rules() -> Vec<FusionRule> {
    parse_rules(DEFAULT_RULES).expect("built-in rules parse")
}

/// Attributes two convolution kernels must share to run in parallel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConvSignature {
    pub kernel_size: u64,
    pub stride: u64,
    pub groups: u64,
    pub dilation: u64,
}

/// Where a kernel reads a tensor from.
///
/// `Kernel(id)` keeps naming the original producer after a merge, so it
/// identifies the slice of a generated kernel's output being read.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Graph(String),
    Kernel(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub id: usize,
    pub label: String,
    pub ops: Vec<OpKind>,
    pub member_node_ids: Vec<String>,
    pub signature: Option<ConvSignature>,
    /// Lookup attributes for the cost model.
    pub config: BTreeMap<String, u64>,
    /// Multiply-add style operation count per sample.
    pub flops: u64,
    /// Distinct sources read from outside the kernel, sorted.
    pub inputs: Vec<Source>,
    pub generated: bool,
}

impl Kernel {
    pub fn filters(&self) -> Option<u64> {
        self.signature.and(self.config.get("filters").copied())
    }

    /// Conv-led kernels whose tail is elementwise can be merged; the tail
    /// then scales linearly with the filter count.
    fn mergeable(&self) -> bool {
        !self.generated
            && self.signature.is_some()
            && self.ops.first() == Some(&OpKind::Conv2d)
            && self.ops[1..]
                .iter()
                .all(|k| matches!(k, OpKind::BatchNorm | OpKind::ReLU | OpKind::GELU))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSlice {
    pub kernel_id: usize,
    pub offset: u64,
    pub filters: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub merged_kernel_ids: Vec<usize>,
    pub generated_kernel: Kernel,
    pub summed_filters: u64,
    /// Channel ranges of the generated output that stand in for each
    /// merged kernel's output.
    pub slices: Vec<OutputSlice>,
    /// Concat kernel folded into the generated kernel because it only
    /// stitched the merged outputs back together.
    pub absorbed_concat: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelPlan {
    pub kernels: Vec<Kernel>,
    pub kernel_edges: Vec<(usize, usize)>,
    pub merge_log: Vec<MergeRecord>,
}

impl KernelPlan {
    pub fn kernel(&self, id: usize) -> Option<&Kernel> {
        self.kernels.iter().find(|k| k.id == id)
    }

    /// Total filter count over convolution kernels.
    pub fn conv_output_features(&self) -> u64 {
        self.kernels.iter().filter_map(Kernel::filters).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    /// Kernel positions grouped by dependency depth.
    pub fn levels(&self) -> Vec<Vec<usize>> {
        let pos: HashMap<usize, usize> =
            self.kernels.iter().enumerate().map(|(i, k)| (k.id, i)).collect();
        let mut in_degree = vec![0; self.kernels.len()];
        let mut out = vec![Vec::new(); self.kernels.len()];
        for (a, b) in &self.kernel_edges {
            in_degree[pos[b]] += 1;
            out[pos[a]].push(pos[b]);
        }
        bfs_levels(&mut in_degree, &out)
    }
}

fn node_flops(node: &OpNode, arity: usize) -> u64 {
    let out = node.output_shape.as_ref().map(|s| s.numel()).unwrap_or(0);
    let input = node.input_shape.as_ref();
    let a = |k: &str| node.attr(k).unwrap_or(0);
    match node.kind {
        OpKind::Input | OpKind::Output | OpKind::Concat => 0,
        OpKind::Linear => {
            let tokens = input
                .map(|s| s.numel() / s.last().max(1))
                .unwrap_or(1);
            2 * a("in_features") * a("out_features") * tokens
        }
        OpKind::Conv2d => {
            let g = a("groups").max(1);
            2 * (a("in_channels") / g) * a("kernel_size") * a("kernel_size") * out
        }
        OpKind::BatchNorm => 2 * out,
        OpKind::LayerNorm => 5 * out,
        OpKind::ReLU => out,
        OpKind::GELU => 8 * out,
        OpKind::Add => out * (arity.saturating_sub(1)) as u64,
        OpKind::Embedding => 2 * out,
        OpKind::MultiHeadAttention => {
            let tokens = input.map(|s| s.dims()[0]).unwrap_or(1);
            let e = a("embed_dim");
            let q = a("qkv_dim");
            6 * tokens * e * q + 4 * tokens * tokens * q + 2 * tokens * q * e
        }
    }
}

fn kernel_config(primary: &OpNode, arity: usize) -> BTreeMap<String, u64> {
    let mut c = BTreeMap::new();
    let input = primary.input_shape.clone().unwrap_or_default_shape();
    let output = primary.output_shape.clone().unwrap_or_default_shape();
    let a = |k: &str| primary.attr(k).unwrap_or(0);
    match primary.kind {
        OpKind::Conv2d => {
            c.insert("in_channels".into(), a("in_channels"));
            c.insert("filters".into(), a("out_channels"));
            c.insert("kernel_size".into(), a("kernel_size"));
            c.insert("stride".into(), a("stride"));
            c.insert("groups".into(), a("groups"));
            c.insert("dilation".into(), a("dilation"));
            c.insert("height".into(), input.dims().get(1).copied().unwrap_or(0));
            c.insert("width".into(), input.dims().get(2).copied().unwrap_or(0));
        }
        OpKind::Linear => {
            c.insert("in_features".into(), a("in_features"));
            c.insert("out_features".into(), a("out_features"));
            c.insert("tokens".into(), input.numel() / input.last().max(1));
        }
        OpKind::MultiHeadAttention => {
            c.insert("num_heads".into(), a("num_heads"));
            c.insert("embed_dim".into(), a("embed_dim"));
            c.insert("qkv_dim".into(), a("qkv_dim"));
            c.insert("tokens".into(), input.dims().first().copied().unwrap_or(1));
        }
        OpKind::Embedding => {
            c.insert("num_features".into(), a("num_features"));
            c.insert("embed_dim".into(), a("embed_dim"));
        }
        OpKind::Add => {
            c.insert("features".into(), output.numel());
            c.insert("arity".into(), arity as u64);
        }
        OpKind::Concat => {
            c.insert("features".into(), output.numel());
            c.insert("arity".into(), arity as u64);
            c.insert("axis".into(), a("axis"));
        }
        _ => {
            c.insert("features".into(), output.numel());
        }
    }
    c
}

trait ShapeOrEmpty {
    fn unwrap_or_default_shape(self) -> crate::graph::TensorShape;
}

impl ShapeOrEmpty for Option<crate::graph::TensorShape> {
    fn unwrap_or_default_shape(self) -> crate::graph::TensorShape {
        self.unwrap_or_else(|| crate::graph::TensorShape::new(Vec::new()))
    }
}

fn conv_signature(node: &OpNode) -> Option<ConvSignature> {
    (node.kind == OpKind::Conv2d).then(|| ConvSignature {
        kernel_size: node.attr("kernel_size").unwrap_or(0),
        stride: node.attr("stride").unwrap_or(0),
        groups: node.attr("groups").unwrap_or(0),
        dilation: node.attr("dilation").unwrap_or(0),
    })
}

/// Covers every non-boundary node with exactly one kernel. Walks nodes in
/// topological order and applies the longest matching rule; a node extends a
/// chain only if it is the sole consumer of the previous chain node.
pub fn detect_kernels(graph: &ComputationGraph, rules: &[FusionRule]) -> Result<KernelPlan> {
    let order = graph.topological_order()?;
    let index = graph.index();
    let mut by_length: Vec<&FusionRule> = rules.iter().collect();
    by_length.sort_by_key(|r| std::cmp::Reverse(r.pattern.len()));

    let mut owner: HashMap<&str, usize> = HashMap::new();
    let mut chains: Vec<Vec<&str>> = Vec::new();
    for id in &order {
        let node = &graph.nodes[index[id.as_str()]];
        if node.kind.is_boundary() || owner.contains_key(id.as_str()) {
            continue;
        }
        let chain = by_length
            .iter()
            .find_map(|rule| match_chain(graph, &index, &owner, id, &rule.pattern))
            .unwrap_or_else(|| vec![id.as_str()]);
        for member in &chain {
            owner.insert(member, chains.len());
        }
        chains.push(chain);
    }

    let mut kernels = Vec::with_capacity(chains.len());
    for (k, chain) in chains.iter().enumerate() {
        let nodes: Vec<&OpNode> = chain.iter().map(|m| &graph.nodes[index[m]]).collect();
        let ops: Vec<OpKind> = nodes.iter().map(|n| n.kind).collect();
        let mut inputs = Vec::new();
        let mut flops = 0;
        for m in chain {
            let preds = graph.predecessors(m);
            flops += node_flops(&graph.nodes[index[m]], preds.len());
            for p in preds {
                match owner.get(p) {
                    Some(&pk) if pk == k => {}
                    Some(&pk) => inputs.push(Source::Kernel(pk)),
                    None => inputs.push(Source::Graph(p.to_string())),
                }
            }
        }
        inputs.sort();
        inputs.dedup();
        kernels.push(Kernel {
            id: k,
            label: kernel_label(&ops),
            ops,
            member_node_ids: chain.iter().map(|s| s.to_string()).collect(),
            signature: conv_signature(nodes[0]),
            config: kernel_config(nodes[0], graph.predecessors(chain[0]).len()),
            flops,
            inputs,
            generated: false,
        });
    }
    Ok(finish_plan(kernels, Vec::new(), &HashMap::new()))
}

fn match_chain<'g>(
    graph: &'g ComputationGraph,
    index: &HashMap<&str, usize>,
    owner: &HashMap<&str, usize>,
    start: &'g str,
    pattern: &[OpKind],
) -> Option<Vec<&'g str>> {
    if graph.nodes[index[start]].kind != pattern[0] {
        return None;
    }
    let mut chain = vec![start];
    for &kind in &pattern[1..] {
        let prev = *chain.last().expect("chain non-empty");
        let consumers = graph.successors(prev);
        if consumers.len() != 1 {
            return None;
        }
        let next = consumers[0];
        let node = &graph.nodes[index[next]];
        if node.kind != kind || owner.contains_key(next) || chain.contains(&next) {
            return None;
        }
        chain.push(next);
    }
    Some(chain)
}

/// Rebuilds edges from kernel inputs (following `replaced` for merged
/// producers), orders kernels topologically and, for a fresh detection,
/// renumbers ids to match positions.
fn finish_plan(
    mut kernels: Vec<Kernel>,
    merge_log: Vec<MergeRecord>,
    replaced: &HashMap<usize, usize>,
) -> KernelPlan {
    let resolve = |mut id: usize| {
        while let Some(&next) = replaced.get(&id) {
            id = next;
        }
        id
    };
    let mut edges: Vec<(usize, usize)> = kernels
        .iter()
        .flat_map(|k| {
            k.inputs.iter().filter_map(move |s| match s {
                Source::Kernel(p) => Some((*p, k.id)),
                Source::Graph(_) => None,
            })
        })
        .map(|(p, c)| (resolve(p), c))
        .filter(|(p, c)| p != c)
        .collect();
    edges.sort_unstable();
    edges.dedup();

    let fresh = merge_log.is_empty() && replaced.is_empty();
    let mut plan = KernelPlan {
        kernels: std::mem::take(&mut kernels),
        kernel_edges: edges,
        merge_log,
    };
    let order: Vec<usize> = plan.levels().into_iter().flatten().collect();
    let mut slots: Vec<Option<Kernel>> = plan.kernels.drain(..).map(Some).collect();
    plan.kernels = order
        .iter()
        .map(|&i| slots[i].take().expect("each kernel placed once"))
        .collect();

    if fresh {
        let renumber: HashMap<usize, usize> = plan
            .kernels
            .iter()
            .enumerate()
            .map(|(i, k)| (k.id, i))
            .collect();
        for k in &mut plan.kernels {
            k.id = renumber[&k.id];
            for s in &mut k.inputs {
                if let Source::Kernel(p) = s {
                    *p = renumber[p];
                }
            }
            k.inputs.sort();
        }
        for e in &mut plan.kernel_edges {
            *e = (renumber[&e.0], renumber[&e.1]);
        }
        plan.kernel_edges.sort_unstable();
    }
    plan
}

/// Label, signature and input set shared by mergeable convs.
type GroupKey<'a> = (&'a str, ConvSignature, &'a [Source]);

/// Replaces groups of parallelizable convolution kernels with one generated
/// kernel whose filter count is the group's sum.
///
/// Kernels are visited level by level over the dependency graph. Within a
/// level, mergeable conv kernels are grouped by label, signature and input
/// set; groups larger than `max_parallel` are chunked in level order and every
/// chunk of two or more kernels is merged.
pub fn merge_parallel(plan: &KernelPlan, max_parallel: usize) -> Result<KernelPlan> {
    if max_parallel == 0 {
        return Err(invalid("max_parallel must be at least 1"));
    }
    let consumers = {
        let mut m: HashMap<usize, Vec<usize>> = HashMap::new();
        for &(a, b) in &plan.kernel_edges {
            m.entry(a).or_default().push(b);
        }
        m
    };
    let mut next_id = plan.kernels.iter().map(|k| k.id + 1).max().unwrap_or(0);
    let mut replaced: HashMap<usize, usize> = HashMap::new();
    let mut log = plan.merge_log.clone();
    let mut generated_at: HashMap<usize, Kernel> = HashMap::new();

    for level in plan.levels() {
        let mut groups: Vec<(GroupKey<'_>, Vec<&Kernel>)> = Vec::new();
        for &pos in &level {
            let k = &plan.kernels[pos];
            if !k.mergeable() {
                continue;
            }
            let key = (k.label.as_str(), k.signature.expect("mergeable"), k.inputs.as_slice());
            match groups.iter_mut().find(|(g, _)| *g == key) {
                Some((_, members)) => members.push(k),
                None => groups.push((key, vec![k])),
            }
        }
        for (_, members) in groups {
            for chunk in members.chunks(max_parallel) {
                if chunk.len() < 2 {
                    continue;
                }
                let record = merge_chunk(plan, chunk, &consumers, next_id);
                next_id += 1;
                for m in chunk {
                    replaced.insert(m.id, record.generated_kernel.id);
                }
                if let Some(c) = record.absorbed_concat {
                    replaced.insert(c, record.generated_kernel.id);
                }
                generated_at.insert(chunk[0].id, record.generated_kernel.clone());
                log.push(record);
            }
        }
    }
    if generated_at.is_empty() {
        return Ok(plan.clone());
    }

    let absorbed: Vec<usize> = log.iter().filter_map(|r| r.absorbed_concat).collect();
    let mut kernels = Vec::with_capacity(plan.kernels.len());
    for k in &plan.kernels {
        if let Some(gen) = generated_at.remove(&k.id) {
            kernels.push(gen);
        } else if !replaced.contains_key(&k.id) {
            let mut k = k.clone();
            // Readers of an absorbed concat now read the whole generated output.
            for s in &mut k.inputs {
                if let Source::Kernel(p) = s {
                    if absorbed.contains(p) {
                        *p = replaced[p];
                    }
                }
            }
            k.inputs.sort();
            k.inputs.dedup();
            kernels.push(k);
        }
    }
    Ok(finish_plan(kernels, log, &replaced))
}

fn merge_chunk(
    plan: &KernelPlan,
    chunk: &[&Kernel],
    consumers: &HashMap<usize, Vec<usize>>,
    id: usize,
) -> MergeRecord {
    let ids: Vec<usize> = chunk.iter().map(|k| k.id).collect();
    let summed: u64 = chunk.iter().map(|k| k.filters().unwrap_or(0)).sum();

    // A lone Concat (channel axis) reading exactly the chunk's outputs is the
    // merged kernel's natural output layout.
    let concat = {
        let targets: Vec<Option<&Vec<usize>>> = ids.iter().map(|i| consumers.get(i)).collect();
        match targets.first() {
            Some(Some(first)) if first.len() == 1 && targets.iter().all(|t| t == &Some(*first)) => {
                plan.kernel(first[0]).filter(|c| {
                    let mut reads: Vec<usize> = c
                        .inputs
                        .iter()
                        .filter_map(|s| match s {
                            Source::Kernel(p) => Some(*p),
                            Source::Graph(_) => None,
                        })
                        .collect();
                    reads.sort_unstable();
                    let mut want = ids.clone();
                    want.sort_unstable();
                    c.ops == [OpKind::Concat]
                        && c.inputs.len() == reads.len()
                        && reads == want
                        && c.config.get("arity") == Some(&(ids.len() as u64))
                        && c.config.get("axis") == Some(&0)
                })
            }
            _ => None,
        }
    };

    let mut slices = Vec::with_capacity(chunk.len());
    let mut offset = 0;
    for k in chunk {
        let f = k.filters().unwrap_or(0);
        slices.push(OutputSlice {
            kernel_id: k.id,
            offset,
            filters: f,
        });
        offset += f;
    }

    let first = chunk[0];
    let mut config = first.config.clone();
    config.insert("filters".into(), summed);
    let mut members: Vec<String> = chunk
        .iter()
        .flat_map(|k| k.member_node_ids.iter().cloned())
        .collect();
    if let Some(c) = concat {
        members.extend(c.member_node_ids.iter().cloned());
    }
    let generated = Kernel {
        id,
        label: first.label.clone(),
        ops: first.ops.clone(),
        member_node_ids: members,
        signature: first.signature,
        config,
        flops: chunk.iter().map(|k| k.flops).sum(),
        inputs: first.inputs.clone(),
        generated: true,
    };
    MergeRecord {
        merged_kernel_ids: ids,
        generated_kernel: generated,
        summed_filters: summed,
        slices,
        absorbed_concat: concat.map(|c| c.id),
    }
}

/// Fusion followed by parallel merging, the plan the cost model prices.
pub fn plan_for(
    graph: &ComputationGraph,
    rules: &[FusionRule],
    max_parallel: usize,
) -> Result<KernelPlan> {
    merge_parallel(&detect_kernels(graph, rules)?, max_parallel)
}
