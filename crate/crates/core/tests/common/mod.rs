#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use kenas::fusion::{KernelPlan, Source};
use kenas::graph::{ComputationGraph, OpKind, OpNode};
use kenas::space::{ArchitectureSpec, Family};
use kenas::supernet::Supernet;
use ndarray::{Array1, Array2};
use rand::Rng;

/// One input feeding `k` identical 3×3 convs whose outputs are concatenated.
pub fn branch_graph(k: usize, channels: u64, filters: u64, size: u64) -> ComputationGraph {
    let mut g = ComputationGraph::new();
    g.push(OpNode::input("x", [channels, size, size]), &[]);
    let ids: Vec<String> = (0..k)
        .map(|i| g.push(OpNode::conv2d(format!("conv{i}"), channels, filters, 3, 1), &["x"]))
        .collect();
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    g.push(OpNode::new("cat", OpKind::Concat).with_attr("axis", 0), &refs);
    g.push(OpNode::new("y", OpKind::Output), &["cat"]);
    g.infer_shapes().unwrap()
}

/// The same computation written as a single wide conv.
pub fn merged_graph(k: usize, channels: u64, filters: u64, size: u64) -> ComputationGraph {
    let mut g = ComputationGraph::new();
    g.push(OpNode::input("x", [channels, size, size]), &[]);
    g.push(OpNode::conv2d("conv", channels, filters * k as u64, 3, 1), &["x"]);
    g.push(OpNode::new("y", OpKind::Output), &["conv"]);
    g.infer_shapes().unwrap()
}

/// Random conv DAG with stride-1 convs (so spatial sizes agree), elementwise
/// ops, concats and bursts of sibling convs that read the same tensor.
pub fn random_conv_dag<R: Rng>(rng: &mut R) -> ComputationGraph {
    let size = [4u64, 8][rng.random_range(0..2)];
    let c0 = rng.random_range(1..9u64);
    random_conv_dag_from(rng, c0, size)
}

/// As [`random_conv_dag`] with a fixed `[c0, size, size]` input.
pub fn random_conv_dag_from<R: Rng>(rng: &mut R, c0: u64, size: u64) -> ComputationGraph {
    let mut g = ComputationGraph::new();
    g.push(OpNode::input("in", [c0, size, size]), &[]);
    let mut tensors: Vec<(String, u64)> = vec![("in".into(), c0)];
    let mut n = 0usize;
    let mut fresh = |prefix: &str| {
        n += 1;
        format!("{prefix}{n}")
    };
    let steps = rng.random_range(2..14);
    for _ in 0..steps {
        let (src, ch) = tensors[rng.random_range(0..tensors.len())].clone();
        match rng.random_range(0..10) {
            0..=2 => {
                let k = [1u64, 3, 5][rng.random_range(0..3)];
                let cout = [2u64, 4, 8, 16][rng.random_range(0..4)];
                let id = g.push(OpNode::conv2d(fresh("conv"), ch, cout, k, 1), &[&src]);
                tensors.push((id, cout));
            }
            3..=5 => {
                // sibling convs; mixed kernel sizes some of the time
                let width = rng.random_range(2..12);
                let k = [1u64, 3, 5][rng.random_range(0..3)];
                let mixed = rng.random_bool(0.3);
                let tail = rng.random_range(0..3);
                let mut outs = Vec::new();
                for _ in 0..width {
                    let kk = if mixed { [1u64, 3, 5][rng.random_range(0..3)] } else { k };
                    let cout = [2u64, 4, 8][rng.random_range(0..3)];
                    let mut id = g.push(OpNode::conv2d(fresh("conv"), ch, cout, kk, 1), &[&src]);
                    if tail >= 1 {
                        id = g.push(OpNode::new(fresh("bn"), OpKind::BatchNorm), &[&id]);
                    }
                    if tail >= 2 {
                        id = g.push(OpNode::new(fresh("relu"), OpKind::ReLU), &[&id]);
                    }
                    outs.push((id, cout));
                }
                if rng.random_bool(0.6) {
                    let refs: Vec<&str> = outs.iter().map(|(i, _)| i.as_str()).collect();
                    let total = outs.iter().map(|(_, c)| c).sum();
                    let id = g.push(OpNode::new(fresh("cat"), OpKind::Concat).with_attr("axis", 0), &refs);
                    tensors.push((id, total));
                } else {
                    tensors.extend(outs);
                }
            }
            6 | 7 => {
                let kind = if rng.random_bool(0.5) { OpKind::ReLU } else { OpKind::BatchNorm };
                let id = g.push(OpNode::new(fresh("ew"), kind), &[&src]);
                tensors.push((id, ch));
            }
            _ => {
                if tensors.len() < 2 {
                    continue;
                }
                let a = rng.random_range(0..tensors.len());
                let mut b = rng.random_range(0..tensors.len());
                if a == b {
                    b = (b + 1) % tensors.len();
                }
                let (ta, ca) = tensors[a].clone();
                let (tb, cb) = tensors[b].clone();
                let id = g.push(OpNode::new(fresh("cat"), OpKind::Concat).with_attr("axis", 0), &[&ta, &tb]);
                tensors.push((id, ca + cb));
            }
        }
    }
    let sinks: Vec<String> = g
        .nodes
        .iter()
        .filter(|nd| nd.kind != OpKind::Output && g.successors(&nd.id).is_empty())
        .map(|nd| nd.id.clone())
        .collect();
    for (i, s) in sinks.iter().enumerate() {
        g.push(OpNode::new(format!("out{i}"), OpKind::Output), &[s]);
    }
    g.infer_shapes().unwrap()
}

/// Feeds `a`'s single output tensor into `b` in place of `b`'s single input.
/// Ids get `a.` / `b.` prefixes.
pub fn join(a: &ComputationGraph, b: &ComputationGraph) -> ComputationGraph {
    let out_a = a.outputs()[0].to_string();
    let in_b = b.inputs()[0].to_string();
    let tail = a.predecessors(&out_a)[0].to_string();
    let mut g = ComputationGraph::new();
    for (prefix, src, skip) in [("a.", a, &out_a), ("b.", b, &in_b)] {
        for n in src.nodes.iter().filter(|n| &n.id != skip) {
            let mut n = n.clone();
            n.id = format!("{prefix}{}", n.id);
            g.add_node(n);
        }
        for (f, t) in src.edges.iter().filter(|(f, t)| f != skip && t != skip) {
            g.add_edge(format!("{prefix}{f}"), format!("{prefix}{t}"));
        }
    }
    for t in b.successors(&in_b) {
        g.add_edge(format!("a.{tail}"), format!("b.{t}"));
    }
    g.infer_shapes().unwrap()
}

/// Random conv DAG funnelled into one ReLU-terminated output: sinks are
/// concatenated, then a ReLU, so nothing downstream can fuse into it.
pub fn single_output_dag<R: Rng>(rng: &mut R, c0: u64, size: u64) -> ComputationGraph {
    let g = random_conv_dag_from(rng, c0, size);
    let sinks: Vec<String> = g.outputs().iter().flat_map(|o| g.predecessors(o)).map(str::to_string).collect();
    let mut h = ComputationGraph::new();
    for n in g.nodes.iter().filter(|n| n.kind != OpKind::Output) {
        let mut n = n.clone();
        n.output_shape = if n.kind == OpKind::Input { n.output_shape } else { None };
        n.input_shape = if n.kind == OpKind::Input { n.input_shape } else { None };
        h.add_node(n);
    }
    for (f, t) in &g.edges {
        if h.node(t).is_some() {
            h.add_edge(f.clone(), t.clone());
        }
    }
    let last = if sinks.len() > 1 {
        let refs: Vec<&str> = sinks.iter().map(String::as_str).collect();
        h.push(OpNode::new("funnel", OpKind::Concat).with_attr("axis", 0), &refs)
    } else {
        sinks[0].clone()
    };
    h.push(OpNode::new("tail", OpKind::ReLU), &[&last]);
    h.push(OpNode::new("y", OpKind::Output), &["tail"]);
    h.infer_shapes().unwrap()
}

/// Checks a merged plan against the plan it came from; returns every
/// violated property.
pub fn merge_violations(graph: &ComputationGraph, before: &KernelPlan, after: &KernelPlan, max_parallel: usize) -> Vec<String> {
    let mut bad = Vec::new();
    let new_records = &after.merge_log[before.merge_log.len()..];
    for rec in new_records {
        let members: Vec<_> = rec
            .merged_kernel_ids
            .iter()
            .map(|id| before.kernel(*id).expect("member exists"))
            .collect();
        let sum: u64 = members.iter().map(|k| k.filters().unwrap_or(0)).sum();
        if rec.summed_filters != sum || rec.generated_kernel.filters() != Some(sum) {
            bad.push(format!("record {:?}: filters {} != member sum {sum}", rec.merged_kernel_ids, rec.summed_filters));
        }
        let sigs: BTreeSet<_> = members.iter().map(|k| k.signature).collect();
        if sigs.len() != 1 || sigs.contains(&None) {
            bad.push(format!("record {:?} mixes signatures {sigs:?}", rec.merged_kernel_ids));
        }
        let labels: BTreeSet<_> = members.iter().map(|k| k.label.as_str()).collect();
        let inputs: BTreeSet<&Vec<Source>> = members.iter().map(|k| &k.inputs).collect();
        if labels.len() != 1 || inputs.len() != 1 {
            bad.push(format!("record {:?} mixes labels or inputs", rec.merged_kernel_ids));
        }
        if members.len() < 2 || members.len() > max_parallel {
            bad.push(format!("record {:?} has size {}", rec.merged_kernel_ids, members.len()));
        }
        if rec.generated_kernel.flops != members.iter().map(|k| k.flops).sum::<u64>() {
            bad.push(format!("record {:?} flops not additive", rec.merged_kernel_ids));
        }
    }
    if before.conv_output_features() != after.conv_output_features() {
        bad.push("conv output features not conserved".into());
    }
    let mut seen = BTreeMap::new();
    for k in &after.kernels {
        for m in &k.member_node_ids {
            *seen.entry(m.as_str()).or_insert(0) += 1;
        }
    }
    for nd in &graph.nodes {
        let count = seen.get(nd.id.as_str()).copied().unwrap_or(0);
        let want = usize::from(!nd.kind.is_boundary());
        if count != want {
            bad.push(format!("node {} covered {count} times", nd.id));
        }
    }
    bad
}

/// Straightforward loop-based evaluation of a subnet from copied slices.
pub fn reference_forward(net: &Supernet, spec: &ArchitectureSpec, x: &Array2<f64>) -> Array1<f64> {
    let layer = |idx: usize, out: usize, inp: usize| -> (Vec<Vec<f64>>, Vec<f64>) {
        let l = &net.layers()[idx];
        let w = (0..out).map(|r| (0..inp).map(|c| l.weight[[r, c]]).collect()).collect();
        let b = (0..out).map(|r| l.bias[r]).collect();
        (w, b)
    };
    let apply = |(w, b): &(Vec<Vec<f64>>, Vec<f64>), v: &[f64]| -> Vec<f64> {
        w.iter()
            .zip(b)
            .map(|(row, bias)| row.iter().zip(v).map(|(a, c)| a * c).sum::<f64>() + bias)
            .collect()
    };
    let relu = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|a| if a > 0.0 { a } else { 0.0 }).collect() };
    let input = x.ncols();
    let head = net.layers().len() - 1;
    x.rows()
        .into_iter()
        .map(|row| {
            let mut h: Vec<f64> = row.to_vec();
            match spec.family {
                Family::Mlp => {
                    let mut width = input;
                    for b in 0..spec.depth {
                        let out = spec.block_choices[b]["hidden_dim"] as usize;
                        h = relu(apply(&layer(b, out, width), &h));
                        width = out;
                    }
                    apply(&layer(head, 1, width), &h)[0]
                }
                _ => {
                    let bb = spec.global_choices["backbone_dim"] as usize;
                    h = apply(&layer(0, bb, input), &h);
                    for b in 0..spec.depth {
                        let hid = spec.block_choices[b]["hidden_dim"] as usize;
                        let r = relu(apply(&layer(1 + 2 * b, hid, bb), &h));
                        let v = apply(&layer(2 + 2 * b, bb, hid), &r);
                        h = h.iter().zip(&v).map(|(a, c)| a + c).collect();
                    }
                    apply(&layer(head, 1, bb), &h)[0]
                }
            }
        })
        .collect()
}

/// Largest relative gap between analytic and central-difference gradients
/// over every parameter inside the spec's slices.
pub fn finite_difference_gap(net: &Supernet, spec: &ArchitectureSpec, x: &Array2<f64>, y: &Array1<f64>, h: f64) -> f64 {
    let (_, grad) = net.subnet_backward(spec, x.view(), y.view()).unwrap();
    let dense = grad.dense(net);
    let loss = |n: &Supernet| {
        let p = n.subnet_forward(spec, x.view()).unwrap();
        (&p - y).mapv(|r| r * r).sum() / y.len() as f64
    };
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for (l, out, inp) in net.slices_for(spec).unwrap() {
        let mut check = |analytic: f64, set: &mut dyn FnMut(&mut Supernet, f64)| {
            set(&mut probe, h);
            let up = loss(&probe);
            set(&mut probe, -2.0 * h);
            let down = loss(&probe);
            set(&mut probe, h);
            let numeric = (up - down) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((analytic - numeric).abs() / scale);
        };
        for r in 0..out {
            for c in 0..inp {
                check(dense[l].weight[[r, c]], &mut |n, d| n.layers_mut()[l].weight[[r, c]] += d);
            }
            check(dense[l].bias[r], &mut |n, d| n.layers_mut()[l].bias[r] += d);
        }
    }
    worst
}
