//! Weight-entangled supernets for the MLP and ResNet spaces.
//!
//! Every layer owns one maximal weight matrix; a subnet reads the top-left
//! `out × in` slice. Training samples one spec per minibatch and updates only
//! the slices that spec touched.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{r2_score, Dataset};
use crate::error::{invalid, Error, Result};
use crate::space::{ArchitectureSpec, Family, SpaceDef};

const CHECKPOINT_MAGIC: &[u8; 8] = b"KNSUPNET";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EntangledLinear {
    /// `max_out × max_in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl EntangledLinear {
    pub fn zeros(max_out: usize, max_in: usize) -> Self {
        EntangledLinear {
            weight: Array2::zeros((max_out, max_in)),
            bias: Array1::zeros(max_out),
        }
    }

    /// Uniform He initialization with the bound taken from the maximal fan-in.
    fn he_uniform<R: Rng>(max_out: usize, max_in: usize, rng: &mut R) -> Self {
        let bound = (6.0 / max_in as f64).sqrt();
        EntangledLinear {
            weight: Array2::from_shape_simple_fn((max_out, max_in), || rng.random_range(-bound..bound)),
            bias: Array1::zeros(max_out),
        }
    }

    pub fn max_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn max_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn weight_slice(&self, out: usize, inp: usize) -> ArrayView2<'_, f64> {
        self.weight.slice(s![..out, ..inp])
    }

    pub fn bias_slice(&self, out: usize) -> ArrayView1<'_, f64> {
        self.bias.slice(s![..out])
    }

    /// `x · W[..out, ..in]ᵀ + b[..out]` for a `batch × in` input.
    pub fn forward(&self, x: ArrayView2<f64>, out: usize) -> Array2<f64> {
        x.dot(&self.weight_slice(out, x.ncols()).t()) + self.bias_slice(out)
    }
}

/// Gradient of one layer restricted to the slice a spec used.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceGrad {
    pub layer: usize,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradient {
    pub slices: Vec<SliceGrad>,
}

impl Gradient {
    /// Full-size gradient per layer, zero outside the touched slices.
    pub fn dense(&self, net: &Supernet) -> Vec<EntangledLinear> {
        let mut out: Vec<EntangledLinear> = net
            .layers
            .iter()
            .map(|l| EntangledLinear::zeros(l.max_out(), l.max_in()))
            .collect();
        for g in &self.slices {
            let (o, i) = g.weight.dim();
            out[g.layer].weight.slice_mut(s![..o, ..i]).assign(&g.weight);
            out[g.layer].bias.slice_mut(s![..o]).assign(&g.bias);
        }
        out
    }

    fn norm(&self) -> f64 {
        self.slices
            .iter()
            .map(|g| g.weight.iter().chain(&g.bias).map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    #[default]
    SinglePathUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    #[default]
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Rescale the step when the gradient norm exceeds this; `None` disables.
    pub grad_clip: Option<f64>,
    pub sampler: Sampler,
    pub loss: Loss,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            learning_rate: 0.01,
            weight_decay: 1e-5,
            grad_clip: Some(5.0),
            sampler: Sampler::SinglePathUniform,
            loss: Loss::Mse,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("weight_decay must be non-negative"));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(invalid("grad_clip must be positive"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Minibatch loss per step.
    pub losses: Vec<f64>,
    pub specs: Vec<ArchitectureSpec>,
    pub steps_per_epoch: usize,
}

impl TrainReport {
    pub fn epoch_means(&self) -> Vec<f64> {
        self.losses
            .chunks(self.steps_per_epoch.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["step", "loss"])?;
        for (i, l) in self.losses.iter().enumerate() {
            w.write_record([i.to_string(), format!("{l:?}")])?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Supernet {
    space: SpaceDef,
    layers: Vec<EntangledLinear>,
    seed: u64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    space: SpaceDef,
    seed: u64,
    step: u64,
    layers: Vec<(usize, usize)>,
}

impl Supernet {
    pub fn new(space: &SpaceDef, seed: u64) -> Result<Self> {
        space.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = Self::shapes(space)?
            .into_iter()
            .map(|(o, i)| EntangledLinear::he_uniform(o, i, &mut rng))
            .collect();
        Ok(Supernet {
            space: space.clone(),
            layers,
            seed,
            step: 0,
        })
    }

    fn shapes(space: &SpaceDef) -> Result<Vec<(usize, usize)>> {
        if space.family == Family::FtTransformer {
            return Err(invalid("supernet training supports the mlp and resnet families"));
        }
        if space.output_dim != 1 {
            return Err(Error::Dimension(format!(
                "supernet regresses one target, space has output_dim {}",
                space.output_dim
            )));
        }
        let input = space.input_dim as usize;
        let depth = space.max_depth();
        let hidden = space.per_block_choices["hidden_dim"].max() as usize;
        let mut shapes = Vec::new();
        match space.family {
            Family::Mlp => {
                for b in 0..depth {
                    shapes.push((hidden, if b == 0 { input } else { hidden }));
                }
                shapes.push((1, hidden));
            }
            Family::ResNet => {
                let bb = space.global_choices["backbone_dim"].max() as usize;
                shapes.push((bb, input));
                for _ in 0..depth {
                    shapes.push((hidden, bb));
                    shapes.push((bb, hidden));
                }
                shapes.push((1, bb));
            }
            Family::FtTransformer => unreachable!("rejected above"),
        }
        Ok(shapes)
    }

    pub fn space(&self) -> &SpaceDef {
        &self.space
    }

    pub fn family(&self) -> Family {
        self.space.family
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn layers(&self) -> &[EntangledLinear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [EntangledLinear] {
        &mut self.layers
    }

    /// Indices of the layers of block `b` (one for MLP, two for ResNet).
    pub fn block_layers(&self, b: usize) -> Vec<usize> {
        match self.family() {
            Family::ResNet => vec![1 + 2 * b, 2 + 2 * b],
            _ => vec![b],
        }
    }

    pub fn stem_layer(&self) -> Option<usize> {
        (self.family() == Family::ResNet).then_some(0)
    }

    pub fn head_layer(&self) -> usize {
        self.layers.len() - 1
    }

    /// `(layer, out, in)` for every linear map the spec uses, in forward order.
    pub fn slices_for(&self, spec: &ArchitectureSpec) -> Result<Vec<(usize, usize, usize)>> {
        self.check_spec(spec)?;
        let input = self.space.input_dim as usize;
        let mut out = Vec::new();
        match self.family() {
            Family::Mlp => {
                let mut width = input;
                for b in 0..spec.depth {
                    let h = spec.block_dim(b, "hidden_dim") as usize;
                    out.push((b, h, width));
                    width = h;
                }
                out.push((self.head_layer(), 1, width));
            }
            _ => {
                let bb = spec.global_dim("backbone_dim") as usize;
                out.push((0, bb, input));
                for b in 0..spec.depth {
                    let h = spec.block_dim(b, "hidden_dim") as usize;
                    out.push((1 + 2 * b, h, bb));
                    out.push((2 + 2 * b, bb, h));
                }
                out.push((self.head_layer(), 1, bb));
            }
        }
        Ok(out)
    }

    /// Any spec whose dimensions fit inside the maximal layers is accepted.
    fn check_spec(&self, spec: &ArchitectureSpec) -> Result<()> {
        if spec.family != self.family() {
            return Err(invalid(format!(
                "spec family {} does not match supernet family {}",
                spec.family,
                self.family()
            )));
        }
        if spec.depth == 0 || spec.depth > self.space.max_depth() || spec.block_choices.len() != spec.depth {
            return Err(invalid(format!("depth {} does not fit the supernet", spec.depth)));
        }
        let fits = |v: Option<&f64>, max: f64, what: &str| match v {
            Some(&v) if v >= 1.0 && v <= max && v.fract() == 0.0 => Ok(()),
            other => Err(invalid(format!("{what} = {other:?} does not fit (max {max})"))),
        };
        let hidden = self.space.per_block_choices["hidden_dim"].max();
        for block in &spec.block_choices {
            fits(block.get("hidden_dim"), hidden, "hidden_dim")?;
        }
        if self.family() == Family::ResNet {
            let bb = self.space.global_choices["backbone_dim"].max();
            fits(spec.global_choices.get("backbone_dim"), bb, "backbone_dim")?;
        }
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.space.input_dim as usize {
            return Err(Error::Dimension(format!(
                "batch has {} features, supernet expects {}",
                x.ncols(),
                self.space.input_dim
            )));
        }
        Ok(())
    }

    /// Hidden state after the stem (ResNet only) and after each block.
    pub fn block_activations(&self, spec: &ArchitectureSpec, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        self.check_input(&x)?;
        let slices = self.slices_for(spec)?;
        let body = &slices[..slices.len() - 1];
        let mut states = Vec::with_capacity(body.len());
        match self.family() {
            Family::Mlp => {
                let mut h = x.to_owned();
                for &(l, o, _) in body {
                    h = self.layers[l].forward(h.view(), o).mapv(relu);
                    states.push(h.clone());
                }
            }
            _ => {
                let (l, o, _) = body[0];
                let mut h = self.layers[l].forward(x, o);
                states.push(h.clone());
                for pair in body[1..].chunks(2) {
                    let (l1, o1, _) = pair[0];
                    let (l2, o2, _) = pair[1];
                    let r = self.layers[l1].forward(h.view(), o1).mapv(relu);
                    h = h + self.layers[l2].forward(r.view(), o2);
                    states.push(h.clone());
                }
            }
        }
        Ok(states)
    }

    pub fn subnet_forward(&self, spec: &ArchitectureSpec, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let states = self.block_activations(spec, x)?;
        let last = states.last().expect("at least one block");
        let out = self.layers[self.head_layer()].forward(last.view(), 1);
        Ok(out.column(0).to_owned())
    }

    /// Mean squared error and its gradient over the slices the spec touches.
    pub fn subnet_backward(
        &self,
        spec: &ArchitectureSpec,
        x: ArrayView2<f64>,
        targets: ArrayView1<f64>,
    ) -> Result<(f64, Gradient)> {
        self.check_input(&x)?;
        if targets.len() != x.nrows() || x.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "{} rows but {} targets",
                x.nrows(),
                targets.len()
            )));
        }
        let slices = self.slices_for(spec)?;
        let n = x.nrows() as f64;
        let head = self.head_layer();
        let mut grads = Vec::with_capacity(slices.len());

        let linear_grad = |layer: usize, dz: &Array2<f64>, input: ArrayView2<f64>| SliceGrad {
            layer,
            weight: dz.t().dot(&input),
            bias: dz.sum_axis(Axis(0)),
        };

        let loss;
        match self.family() {
            Family::Mlp => {
                let mut acts = vec![x.to_owned()];
                let mut pre = Vec::new();
                for &(l, o, _) in &slices[..slices.len() - 1] {
                    let z = self.layers[l].forward(acts.last().expect("non-empty").view(), o);
                    acts.push(z.mapv(relu));
                    pre.push(z);
                }
                let last = acts.last().expect("non-empty");
                let pred = self.layers[head].forward(last.view(), 1);
                let resid = &pred.column(0) - &targets;
                loss = resid.mapv(|r| r * r).sum() / n;
                let dpred = resid.mapv(|r| 2.0 * r / n).insert_axis(Axis(1));
                grads.push(linear_grad(head, &dpred, last.view()));
                let mut da = dpred.dot(&self.layers[head].weight_slice(1, last.ncols()));
                for (k, &(l, o, i)) in slices[..slices.len() - 1].iter().enumerate().rev() {
                    let dz = da * &pre[k].mapv(relu_grad);
                    grads.push(linear_grad(l, &dz, acts[k].view()));
                    da = dz.dot(&self.layers[l].weight_slice(o, i));
                }
            }
            _ => {
                let (l0, o0, _) = slices[0];
                let mut hs = vec![self.layers[l0].forward(x, o0)];
                let mut cache = Vec::new();
                for pair in slices[1..slices.len() - 1].chunks(2) {
                    let (l1, o1, _) = pair[0];
                    let (l2, o2, _) = pair[1];
                    let h = hs.last().expect("non-empty");
                    let u = self.layers[l1].forward(h.view(), o1);
                    let r = u.mapv(relu);
                    let next = h + &self.layers[l2].forward(r.view(), o2);
                    cache.push((u, r));
                    hs.push(next);
                }
                let last = hs.last().expect("non-empty");
                let pred = self.layers[head].forward(last.view(), 1);
                let resid = &pred.column(0) - &targets;
                loss = resid.mapv(|r| r * r).sum() / n;
                let dpred = resid.mapv(|r| 2.0 * r / n).insert_axis(Axis(1));
                grads.push(linear_grad(head, &dpred, last.view()));
                let mut dh = dpred.dot(&self.layers[head].weight_slice(1, last.ncols()));
                for (b, pair) in slices[1..slices.len() - 1].chunks(2).enumerate().rev() {
                    let (l1, o1, i1) = pair[0];
                    let (l2, o2, i2) = pair[1];
                    let (u, r) = &cache[b];
                    grads.push(linear_grad(l2, &dh, r.view()));
                    let du = dh.dot(&self.layers[l2].weight_slice(o2, i2)) * &u.mapv(relu_grad);
                    grads.push(linear_grad(l1, &du, hs[b].view()));
                    dh = dh + du.dot(&self.layers[l1].weight_slice(o1, i1));
                }
                grads.push(linear_grad(l0, &dh, x));
            }
        }
        grads.reverse();
        Ok((loss, Gradient { slices: grads }))
    }

    /// `w -= lr · (g + wd · w)` on each touched slice; nothing else changes.
    pub fn apply_sgd(&mut self, grad: &Gradient, learning_rate: f64, weight_decay: f64) {
        for g in &grad.slices {
            let (o, i) = g.weight.dim();
            let layer = &mut self.layers[g.layer];
            let mut w = layer.weight.slice_mut(s![..o, ..i]);
            w.zip_mut_with(&g.weight, |p, &d| *p -= learning_rate * (d + weight_decay * *p));
            let mut b = layer.bias.slice_mut(s![..o]);
            b.zip_mut_with(&g.bias, |p, &d| *p -= learning_rate * (d + weight_decay * *p));
        }
        self.step += 1;
    }

    /// One-shot training over `rows`, sampling specs uniformly from the
    /// supernet's own space.
    pub fn train(&mut self, data: &Dataset, rows: &[usize], cfg: &TrainConfig) -> Result<TrainReport> {
        let space = self.space.clone();
        self.train_with_sampler(data, rows, cfg, &space)
    }

    /// As [`train`](Self::train), sampling from `sampler`, whose specs must
    /// fit the supernet.
    pub fn train_with_sampler(
        &mut self,
        data: &Dataset,
        rows: &[usize],
        cfg: &TrainConfig,
        sampler: &SpaceDef,
    ) -> Result<TrainReport> {
        cfg.validate()?;
        if rows.is_empty() || data.is_empty() {
            return Err(invalid("cannot train on an empty dataset"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= data.len()) {
            return Err(invalid(format!("row {bad} out of range for {} rows", data.len())));
        }
        if sampler.family != self.family() || sampler.input_dim != self.space.input_dim {
            return Err(invalid("sampling space does not match the supernet"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order = rows.to_vec();
        let steps_per_epoch = order.len().div_ceil(cfg.batch_size);
        let mut losses = Vec::with_capacity(cfg.epochs * steps_per_epoch);
        let mut specs = Vec::with_capacity(cfg.epochs * steps_per_epoch);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let spec = sampler.sample_uniform(&mut rng);
                let (x, y) = data.rows(batch);
                let (loss, grad) = self.subnet_backward(&spec, x.view(), y.view())?;
                let scale = match cfg.grad_clip {
                    Some(c) => {
                        let norm = grad.norm();
                        if norm > c { c / norm } else { 1.0 }
                    }
                    None => 1.0,
                };
                if !loss.is_finite() {
                    return Err(invalid(format!("training diverged at step {}", losses.len())));
                }
                self.apply_sgd(&grad, cfg.learning_rate * scale, cfg.weight_decay / scale);
                losses.push(loss);
                specs.push(spec);
            }
        }
        Ok(TrainReport {
            losses,
            specs,
            steps_per_epoch,
        })
    }

    pub fn evaluate_accuracy(&self, spec: &ArchitectureSpec, data: &Dataset, rows: &[usize]) -> Result<f64> {
        let (x, y) = data.rows(rows);
        let pred = self.subnet_forward(spec, x.view())?;
        r2_score(pred.view(), y.view())
    }

    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        let header = CheckpointHeader {
            space: self.space.clone(),
            seed: self.seed,
            step: self.step,
            layers: self.layers.iter().map(|l| (l.max_out(), l.max_in())).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let io = |e| Error::Checkpoint(format!("write failed: {e}"));
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
        w.write_u64::<LittleEndian>(header.len() as u64).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        for l in &self.layers {
            for v in l.weight.iter().chain(l.bias.iter()) {
                w.write_f64::<LittleEndian>(*v).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let io = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a supernet checkpoint".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header).map_err(io)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        header.space.validate()?;
        if Self::shapes(&header.space)? != header.layers {
            return Err(Error::Checkpoint("layer shapes do not match the space".into()));
        }
        let mut layers = Vec::with_capacity(header.layers.len());
        for &(o, i) in &header.layers {
            let mut weight = Array2::zeros((o, i));
            for v in weight.iter_mut() {
                *v = r.read_f64::<LittleEndian>().map_err(io)?;
            }
            let mut bias = Array1::zeros(o);
            for v in bias.iter_mut() {
                *v = r.read_f64::<LittleEndian>().map_err(io)?;
            }
            layers.push(EntangledLinear { weight, bias });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Supernet {
            space: header.space,
            layers,
            seed: header.seed,
            step: header.step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(bytes.as_slice())
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

fn relu_grad(v: f64) -> f64 {
    if v > 0.0 { 1.0 } else { 0.0 }
}
