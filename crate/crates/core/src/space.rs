//! The three tabular search spaces (MLP, ResNet, FTTransformer): choice
//! ranges, candidate counting, sampling, categorical encoding and lowering of
//! a chosen architecture to an operator graph.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{ComputationGraph, OpKind, OpNode};

const VALUE_TOLERANCE: f64 = 1e-9;

/// Allowed values for one choice: an arithmetic progression `low..=high` by
/// `step`, or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum ChoiceRange {
    Stepped { low: f64, high: f64, step: f64 },
    Explicit { values: Vec<f64> },
}

impl ChoiceRange {
    pub fn stepped(low: f64, high: f64, step: f64) -> Result<Self> {
        let r = ChoiceRange::Stepped { low, high, step };
        r.validate()?;
        Ok(r)
    }

    pub fn explicit(values: Vec<f64>) -> Result<Self> {
        let r = ChoiceRange::Explicit { values };
        r.validate()?;
        Ok(r)
    }

    pub fn single(value: f64) -> Self {
        ChoiceRange::Explicit {
            values: vec![value],
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ChoiceRange::Stepped { low, high, step } => {
                if !(step.is_finite() && *step > 0.0 && low.is_finite() && high >= low) {
                    return Err(invalid(format!("bad range ({low}, {high}, {step})")));
                }
                let n = (high - low) / step;
                if (n - n.round()).abs() > VALUE_TOLERANCE {
                    return Err(invalid(format!(
                        "range ({low}, {high}, {step}): span is not a multiple of step"
                    )));
                }
            }
            ChoiceRange::Explicit { values } => {
                if values.is_empty() {
                    return Err(invalid("explicit choice list is empty"));
                }
                if values.windows(2).any(|w| w[1] <= w[0]) || values.iter().any(|v| !v.is_finite()) {
                    return Err(invalid("explicit choices must be finite and strictly increasing"));
                }
            }
        }
        Ok(())
    }

    pub fn cardinality(&self) -> usize {
        match self {
            ChoiceRange::Stepped { low, high, step } => ((high - low) / step).round() as usize + 1,
            ChoiceRange::Explicit { values } => values.len(),
        }
    }

    pub fn value(&self, index: usize) -> Option<f64> {
        if index >= self.cardinality() {
            return None;
        }
        Some(match self {
            ChoiceRange::Stepped { low, step, .. } => low + step * index as f64,
            ChoiceRange::Explicit { values } => values[index],
        })
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.cardinality()).filter_map(|i| self.value(i)).collect()
    }

    pub fn index_of(&self, value: f64) -> Option<usize> {
        match self {
            ChoiceRange::Stepped { low, step, .. } => {
                let i = ((value - low) / step).round();
                if i < 0.0 {
                    return None;
                }
                let i = i as usize;
                self.value(i)
                    .filter(|v| (v - value).abs() <= VALUE_TOLERANCE * v.abs().max(1.0))
                    .map(|_| i)
            }
            ChoiceRange::Explicit { values } => values
                .iter()
                .position(|v| (v - value).abs() <= VALUE_TOLERANCE * v.abs().max(1.0)),
        }
    }

    pub fn max(&self) -> f64 {
        self.value(self.cardinality() - 1).expect("non-empty")
    }

    pub fn min(&self) -> f64 {
        self.value(0).expect("non-empty")
    }
}

fn range(low: f64, high: f64, step: f64) -> ChoiceRange {
    ChoiceRange::stepped(low, high, step).expect("built-in range")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Mlp,
    ResNet,
    FtTransformer,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Mlp => "mlp",
            Family::ResNet => "resnet",
            Family::FtTransformer => "fttransformer",
        })
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(Family::Mlp),
            "resnet" => Ok(Family::ResNet),
            "fttransformer" | "ft-transformer" | "ftt" => Ok(Family::FtTransformer),
            _ => Err(invalid(format!("unknown family `{s}`"))),
        }
    }
}

impl Family {
    fn required(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            Family::Mlp => (&[], &["hidden_dim"]),
            Family::ResNet => (&["backbone_dim"], &["hidden_dim"]),
            Family::FtTransformer => (&[], &["embed_dim", "mlp_ratio", "num_heads", "qkv_dim"]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceDef {
    pub family: Family,
    pub depth: ChoiceRange,
    #[serde(default)]
    pub global_choices: BTreeMap<String, ChoiceRange>,
    pub per_block_choices: BTreeMap<String, ChoiceRange>,
    pub input_dim: u64,
    pub output_dim: u64,
}

/// On-disk space description; omitted ranges default to the built-in space.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceFile {
    family: Family,
    input_dim: u64,
    #[serde(default = "one")]
    output_dim: u64,
    #[serde(default)]
    depth: Option<ChoiceRange>,
    #[serde(default)]
    global_choices: BTreeMap<String, ChoiceRange>,
    #[serde(default)]
    per_block_choices: BTreeMap<String, ChoiceRange>,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountConvention {
    /// `(Π per-block cardinalities)^max_depth × Π global cardinalities`
    MaxDepth,
    /// Exact number of distinct specs over all depths.
    Enumerative,
}

impl SpaceDef {
    /// The built-in ranges for each family.
    pub fn builtin(family: Family, input_dim: u64, output_dim: u64) -> Self {
        let mut global = BTreeMap::new();
        let mut block = BTreeMap::new();
        let depth = match family {
            Family::Mlp => {
                block.insert("hidden_dim".into(), range(16.0, 512.0, 16.0));
                range(1.0, 11.0, 1.0)
            }
            Family::ResNet => {
                block.insert("hidden_dim".into(), range(16.0, 512.0, 16.0));
                global.insert("backbone_dim".into(), range(16.0, 512.0, 16.0));
                range(1.0, 11.0, 1.0)
            }
            Family::FtTransformer => {
                block.insert("num_heads".into(), range(2.0, 8.0, 1.0));
                block.insert("embed_dim".into(), range(16.0, 256.0, 16.0));
                block.insert("qkv_dim".into(), range(16.0, 256.0, 16.0));
                block.insert("mlp_ratio".into(), range(1.0, 4.0, 0.5));
                range(1.0, 8.0, 1.0)
            }
        };
        SpaceDef {
            family,
            depth,
            global_choices: global,
            per_block_choices: block,
            input_dim,
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(invalid("input_dim and output_dim must be >= 1"));
        }
        let all = std::iter::once(("depth", &self.depth))
            .chain(self.global_choices.iter().map(|(k, v)| (k.as_str(), v)))
            .chain(self.per_block_choices.iter().map(|(k, v)| (k.as_str(), v)));
        for (name, r) in all {
            r.validate().map_err(|e| invalid(format!("{name}: {e}")))?;
            let integral = name != "mlp_ratio";
            if r.min() < 1.0 && (integral || r.min() <= 0.0) {
                return Err(invalid(format!("{name}: values must be positive")));
            }
            if integral && r.values().iter().any(|v| v.fract() != 0.0) {
                return Err(invalid(format!("{name}: values must be integers")));
            }
        }
        let (globals, blocks) = self.family.required();
        let keys_match = |have: &BTreeMap<String, ChoiceRange>, want: &[&str]| {
            have.len() == want.len() && want.iter().all(|k| have.contains_key(*k))
        };
        if !keys_match(&self.global_choices, globals) || !keys_match(&self.per_block_choices, blocks) {
            return Err(invalid(format!(
                "{} space needs global choices {globals:?} and block choices {blocks:?}",
                self.family
            )));
        }
        if self.family == Family::FtTransformer {
            let heads = self.per_block_choices["num_heads"].values();
            let embeds = self.per_block_choices["embed_dim"].values();
            if !embeds
                .iter()
                .any(|e| heads.iter().any(|h| (*e as u64).is_multiple_of(*h as u64)))
            {
                return Err(invalid("no embed_dim is divisible by any num_heads"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SpaceFile = serde_json::from_str(text)?;
        let mut space = SpaceDef::builtin(file.family, file.input_dim, file.output_dim);
        if let Some(depth) = file.depth {
            space.depth = depth;
        }
        for (k, v) in file.global_choices {
            space.global_choices.insert(k, v);
        }
        for (k, v) in file.per_block_choices {
            space.per_block_choices.insert(k, v);
        }
        space.validate()?;
        Ok(space)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("space serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn max_depth(&self) -> usize {
        self.depth.max() as usize
    }

    /// Cardinality of each encoding slot: depth, globals, then every block.
    pub fn slot_cardinalities(&self) -> Vec<usize> {
        let mut slots = vec![self.depth.cardinality()];
        slots.extend(self.global_choices.values().map(ChoiceRange::cardinality));
        for _ in 0..self.max_depth() {
            slots.extend(self.per_block_choices.values().map(ChoiceRange::cardinality));
        }
        slots
    }

    fn block_product(&self) -> BigUint {
        self.per_block_choices
            .values()
            .map(|r| BigUint::from(r.cardinality()))
            .product()
    }

    fn global_product(&self) -> BigUint {
        self.global_choices
            .values()
            .map(|r| BigUint::from(r.cardinality()))
            .product()
    }

    pub fn candidate_count(&self, convention: CountConvention) -> BigUint {
        match convention {
            CountConvention::MaxDepth => {
                self.block_product().pow(self.max_depth() as u32) * self.global_product()
            }
            CountConvention::Enumerative => {
                let block = self.block_product();
                let total: BigUint = self
                    .depth
                    .values()
                    .iter()
                    .map(|&d| block.pow(d as u32))
                    .sum();
                total * self.global_product()
            }
        }
    }

    /// Every spec (ignoring the attention divisibility constraint) in
    /// encoding order.
    pub fn enumerate(&self) -> SpecIter<'_> {
        SpecIter {
            space: self,
            depth_index: 0,
            counter: None,
        }
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> ArchitectureSpec {
        let depth_index = rng.random_range(0..self.depth.cardinality());
        let depth = self.depth.value(depth_index).expect("in range") as usize;
        let global_choices = self
            .global_choices
            .iter()
            .map(|(k, r)| (k.clone(), r.value(rng.random_range(0..r.cardinality())).expect("in range")))
            .collect();
        let block_choices = (0..depth)
            .map(|_| loop {
                let block: BTreeMap<String, f64> = self
                    .per_block_choices
                    .iter()
                    .map(|(k, r)| {
                        (k.clone(), r.value(rng.random_range(0..r.cardinality())).expect("in range"))
                    })
                    .collect();
                if block_is_legal(self.family, &block) {
                    break block;
                }
            })
            .collect();
        ArchitectureSpec {
            family: self.family,
            depth,
            global_choices,
            block_choices,
        }
    }

    /// Flat index vector: depth index, global indices, then per-block indices
    /// for every block up to the maximum depth (inactive blocks are zero).
    pub fn encode(&self, spec: &ArchitectureSpec) -> Result<Vec<usize>> {
        self.check(spec)?;
        let mut v = vec![self.depth.index_of(spec.depth as f64).expect("checked")];
        for (k, r) in &self.global_choices {
            v.push(r.index_of(spec.global_choices[k]).expect("checked"));
        }
        for b in 0..self.max_depth() {
            for (k, r) in &self.per_block_choices {
                v.push(match spec.block_choices.get(b) {
                    Some(block) => r.index_of(block[k]).expect("checked"),
                    None => 0,
                });
            }
        }
        Ok(v)
    }

    /// Inverse of [`encode`](Self::encode). Indices in inactive blocks are
    /// range-checked and otherwise ignored.
    pub fn decode(&self, indices: &[usize]) -> Result<ArchitectureSpec> {
        let cards = self.slot_cardinalities();
        if indices.len() != cards.len() {
            return Err(invalid(format!(
                "encoding has {} slots, space needs {}",
                indices.len(),
                cards.len()
            )));
        }
        if let Some((slot, (&i, &c))) = indices.iter().zip(&cards).enumerate().find(|(_, (i, c))| i >= c) {
            return Err(invalid(format!("slot {slot}: index {i} out of range 0..{c}")));
        }
        let depth = self.depth.value(indices[0]).expect("checked") as usize;
        let mut pos = 1;
        let mut global_choices = BTreeMap::new();
        for (k, r) in &self.global_choices {
            global_choices.insert(k.clone(), r.value(indices[pos]).expect("checked"));
            pos += 1;
        }
        let mut block_choices = Vec::with_capacity(depth);
        for _ in 0..depth {
            let mut block = BTreeMap::new();
            for (k, r) in &self.per_block_choices {
                block.insert(k.clone(), r.value(indices[pos]).expect("checked"));
                pos += 1;
            }
            block_choices.push(block);
        }
        Ok(ArchitectureSpec {
            family: self.family,
            depth,
            global_choices,
            block_choices,
        })
    }

    /// Checks that every chosen value lies in its range.
    pub fn check(&self, spec: &ArchitectureSpec) -> Result<()> {
        if spec.family != self.family {
            return Err(invalid(format!(
                "spec family {} does not match space family {}",
                spec.family, self.family
            )));
        }
        if self.depth.index_of(spec.depth as f64).is_none() {
            return Err(invalid(format!("depth {} not in range", spec.depth)));
        }
        if spec.block_choices.len() != spec.depth {
            return Err(invalid(format!(
                "depth {} but {} block choices",
                spec.depth,
                spec.block_choices.len()
            )));
        }
        let check_map = |have: &BTreeMap<String, f64>, want: &BTreeMap<String, ChoiceRange>, at: &str| {
            if have.len() != want.len() {
                return Err(invalid(format!("{at}: expected keys {:?}", want.keys().collect::<Vec<_>>())));
            }
            for (k, r) in want {
                let v = have
                    .get(k)
                    .ok_or_else(|| invalid(format!("{at}: missing `{k}`")))?;
                if r.index_of(*v).is_none() {
                    return Err(invalid(format!("{at}: `{k}` = {v} not in range")));
                }
            }
            Ok(())
        };
        check_map(&spec.global_choices, &self.global_choices, "global")?;
        for (b, block) in spec.block_choices.iter().enumerate() {
            check_map(block, &self.per_block_choices, &format!("block {b}"))?;
        }
        Ok(())
    }

    /// In range and, for attention blocks, `embed_dim % num_heads == 0`.
    pub fn is_legal(&self, spec: &ArchitectureSpec) -> bool {
        self.check(spec).is_ok()
            && spec
                .block_choices
                .iter()
                .all(|b| block_is_legal(self.family, b))
    }

    /// Lowers a spec to an operator graph with all shapes inferred.
    pub fn lower(&self, spec: &ArchitectureSpec) -> Result<ComputationGraph> {
        if !self.is_legal(spec) {
            self.check(spec)?;
            return Err(invalid("embed_dim must be divisible by num_heads in every block"));
        }
        let graph = match self.family {
            Family::Mlp => lower_mlp(self, spec),
            Family::ResNet => lower_resnet(self, spec),
            Family::FtTransformer => lower_ftt(self, spec),
        };
        graph.infer_shapes()
    }
}

fn block_is_legal(family: Family, block: &BTreeMap<String, f64>) -> bool {
    if family != Family::FtTransformer {
        return true;
    }
    match (block.get("embed_dim"), block.get("num_heads")) {
        (Some(&e), Some(&h)) => (e as u64).is_multiple_of((h as u64).max(1)),
        _ => false,
    }
}

fn dim(v: f64) -> u64 {
    v as u64
}

fn lower_mlp(space: &SpaceDef, spec: &ArchitectureSpec) -> ComputationGraph {
    let mut g = ComputationGraph::new();
    let mut prev = g.push(OpNode::input("input", [space.input_dim]), &[]);
    let mut width = space.input_dim;
    for (b, block) in spec.block_choices.iter().enumerate() {
        let h = dim(block["hidden_dim"]);
        let fc = g.push(OpNode::linear(format!("b{b}.linear"), width, h), &[&prev]);
        prev = g.push(OpNode::new(format!("b{b}.relu"), OpKind::ReLU), &[&fc]);
        width = h;
    }
    let head = g.push(OpNode::linear("head", width, space.output_dim), &[&prev]);
    g.push(OpNode::new("output", OpKind::Output), &[&head]);
    g
}

fn lower_resnet(space: &SpaceDef, spec: &ArchitectureSpec) -> ComputationGraph {
    let mut g = ComputationGraph::new();
    let input = g.push(OpNode::input("input", [space.input_dim]), &[]);
    let bb = dim(spec.global_choices["backbone_dim"]);
    let mut prev = g.push(OpNode::linear("stem", space.input_dim, bb), &[&input]);
    for (b, block) in spec.block_choices.iter().enumerate() {
        let h = dim(block["hidden_dim"]);
        let up = g.push(OpNode::linear(format!("b{b}.linear1"), bb, h), &[&prev]);
        let act = g.push(OpNode::new(format!("b{b}.relu"), OpKind::ReLU), &[&up]);
        let down = g.push(OpNode::linear(format!("b{b}.linear2"), h, bb), &[&act]);
        prev = g.push(OpNode::new(format!("b{b}.add"), OpKind::Add), &[&prev, &down]);
    }
    let head = g.push(OpNode::linear("head", bb, space.output_dim), &[&prev]);
    g.push(OpNode::new("output", OpKind::Output), &[&head]);
    g
}

fn lower_ftt(space: &SpaceDef, spec: &ArchitectureSpec) -> ComputationGraph {
    let mut g = ComputationGraph::new();
    let input = g.push(OpNode::input("input", [space.input_dim]), &[]);
    let first = dim(spec.block_choices[0]["embed_dim"]);
    let mut prev = g.push(
        OpNode::new("embedding", OpKind::Embedding)
            .with_attr("num_features", space.input_dim)
            .with_attr("embed_dim", first),
        &[&input],
    );
    let mut width = first;
    for (b, block) in spec.block_choices.iter().enumerate() {
        let e = dim(block["embed_dim"]);
        if e != width {
            prev = g.push(OpNode::linear(format!("b{b}.proj"), width, e), &[&prev]);
        }
        let attn = g.push(
            OpNode::new(format!("b{b}.attn"), OpKind::MultiHeadAttention)
                .with_attr("num_heads", dim(block["num_heads"]))
                .with_attr("embed_dim", e)
                .with_attr("qkv_dim", dim(block["qkv_dim"])),
            &[&prev],
        );
        let res1 = g.push(OpNode::new(format!("b{b}.add1"), OpKind::Add), &[&prev, &attn]);
        let hidden = ((e as f64) * block["mlp_ratio"]).floor().max(1.0) as u64;
        let ff1 = g.push(OpNode::linear(format!("b{b}.ff1"), e, hidden), &[&res1]);
        let act = g.push(OpNode::new(format!("b{b}.gelu"), OpKind::GELU), &[&ff1]);
        let ff2 = g.push(OpNode::linear(format!("b{b}.ff2"), hidden, e), &[&act]);
        prev = g.push(OpNode::new(format!("b{b}.add2"), OpKind::Add), &[&res1, &ff2]);
        width = e;
    }
    let head = g.push(OpNode::linear("head", width, space.output_dim), &[&prev]);
    g.push(OpNode::new("output", OpKind::Output), &[&head]);
    g
}

/// A point in a search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub family: Family,
    pub depth: usize,
    #[serde(default)]
    pub global_choices: BTreeMap<String, f64>,
    pub block_choices: Vec<BTreeMap<String, f64>>,
}

impl ArchitectureSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn block_dim(&self, block: usize, key: &str) -> u64 {
        dim(self.block_choices[block][key])
    }

    pub fn global_dim(&self, key: &str) -> u64 {
        dim(self.global_choices[key])
    }
}

/// Encoding vector rendered as `i-j-k`, the form used in history files.
pub fn encoding_string(indices: &[usize]) -> String {
    indices
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("-")
}

pub fn parse_encoding(text: &str) -> Result<Vec<usize>> {
    text.split('-')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| invalid(format!("bad encoding `{text}`")))
        })
        .collect()
}

pub struct SpecIter<'a> {
    space: &'a SpaceDef,
    depth_index: usize,
    /// Mixed-radix counter over globals and the active blocks.
    counter: Option<Vec<usize>>,
}

impl Iterator for SpecIter<'_> {
    type Item = ArchitectureSpec;

    fn next(&mut self) -> Option<ArchitectureSpec> {
        let space = self.space;
        loop {
            if self.depth_index >= space.depth.cardinality() {
                return None;
            }
            let depth = space.depth.value(self.depth_index)? as usize;
            let mut radices: Vec<usize> = space.global_choices.values().map(ChoiceRange::cardinality).collect();
            for _ in 0..depth {
                radices.extend(space.per_block_choices.values().map(ChoiceRange::cardinality));
            }
            let counter = match self.counter.take() {
                None => Some(vec![0; radices.len()]),
                Some(mut c) => {
                    let mut carried = true;
                    for i in (0..c.len()).rev() {
                        c[i] += 1;
                        if c[i] < radices[i] {
                            carried = false;
                            break;
                        }
                        c[i] = 0;
                    }
                    (!carried).then_some(c)
                }
            };
            match counter {
                Some(c) => {
                    let mut full = vec![self.depth_index];
                    full.extend_from_slice(&c);
                    full.resize(space.slot_cardinalities().len(), 0);
                    self.counter = Some(c);
                    return Some(space.decode(&full).expect("counter in range"));
                }
                None => {
                    self.depth_index += 1;
                    self.counter = None;
                }
            }
        }
    }
}
