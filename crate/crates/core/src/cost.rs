//! Kernel-level latency/power prediction and model energy aggregation.
//!
//! A kernel's energy is its predicted latency times its predicted power; a
//! model's energy is the sum over the kernels of its merged plan. Predictions
//! come from per-platform lookup tables, then interpolation, then an analytic
//! fallback that is total over all kernels.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fusion::{plan_for, FusionRule, Kernel, KernelPlan};
use crate::graph::{conv_out_size, ComputationGraph, OpKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Nearest,
    LinearOnFlops,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticParams {
    /// ms per GFLOP
    pub latency_per_gflop: f64,
    /// ms
    pub latency_floor: f64,
    /// W
    pub idle_power: f64,
    /// W per (GFLOP/ms)
    pub power_per_gflop_rate: f64,
}

impl AnalyticParams {
    fn validate(&self) -> Result<()> {
        let all = [
            self.latency_per_gflop,
            self.latency_floor,
            self.idle_power,
            self.power_per_gflop_rate,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) || self.latency_floor <= 0.0 {
            return Err(invalid(
                "analytic parameters must be finite and >= 0 with latency_floor > 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableEntry {
    pub label: String,
    pub config: BTreeMap<String, u64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    platform_name: String,
    max_parallel: usize,
    interpolation: Interpolation,
    analytic_fallback: AnalyticParams,
    latency_table: Vec<TableEntry>,
    power_table: Vec<TableEntry>,
}

/// Per-platform stand-in for trained kernel predictors. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct PlatformProfile {
    file: ProfileFile,
    latency: Table,
    power: Table,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct Table {
    exact: HashMap<(String, String), f64>,
    /// label -> (batch, flops, value), for interpolation
    by_label: HashMap<String, Vec<(u64, u64, f64)>>,
}

impl Table {
    fn build(entries: &[TableEntry], what: &str) -> Result<Table> {
        let mut t = Table::default();
        for e in entries {
            if !(e.value.is_finite() && e.value > 0.0) {
                return Err(invalid(format!(
                    "{what} entry for `{}` must be > 0, got {}",
                    e.label, e.value
                )));
            }
            let mut config = e.config.clone();
            let batch = *config.entry("batch".into()).or_insert(1);
            let key = (e.label.clone(), config_key(&config));
            if t.exact.insert(key, e.value).is_some() {
                return Err(invalid(format!(
                    "duplicate {what} entry for `{}` {}",
                    e.label,
                    config_key(&e.config)
                )));
            }
            if let Some(flops) = flops_from_config(&e.label, &e.config) {
                t.by_label
                    .entry(e.label.clone())
                    .or_default()
                    .push((batch, flops, e.value));
            }
        }
        for rows in t.by_label.values_mut() {
            rows.sort_by_key(|r| (r.0, r.1));
        }
        Ok(t)
    }

    fn lookup(&self, label: &str, key: &str) -> Option<f64> {
        self.exact.get(&(label.to_string(), key.to_string())).copied()
    }

    fn interpolate(&self, label: &str, batch: u64, flops: u64, mode: Interpolation) -> Option<f64> {
        let rows: Vec<(u64, f64)> = self
            .by_label
            .get(label)?
            .iter()
            .filter(|r| r.0 == batch)
            .map(|r| (r.1, r.2))
            .collect();
        if rows.is_empty() {
            return None;
        }
        match mode {
            Interpolation::Nearest => rows
                .iter()
                .min_by_key(|(f, _)| f.abs_diff(flops))
                .map(|&(_, v)| v),
            Interpolation::LinearOnFlops => {
                let hi = rows.iter().position(|&(f, _)| f >= flops)?;
                let (f1, v1) = rows[hi];
                if f1 == flops {
                    return Some(v1);
                }
                if hi == 0 {
                    return None;
                }
                let (f0, v0) = rows[hi - 1];
                let t = (flops - f0) as f64 / (f1 - f0) as f64;
                Some(v0 + t * (v1 - v0))
            }
        }
    }
}

/// Canonical, order-independent string of a config map.
pub fn config_key(config: &BTreeMap<String, u64>) -> String {
    config
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn elementwise_weight(kind: OpKind) -> Option<u64> {
    match kind {
        OpKind::ReLU => Some(1),
        OpKind::BatchNorm => Some(2),
        OpKind::LayerNorm => Some(5),
        OpKind::GELU => Some(8),
        _ => None,
    }
}

/// Operation count of a kernel reconstructed from its label and lookup
/// config, used to place table entries on the flops axis. Agrees with the
/// node-level count produced by kernel detection for the kernel shapes that
/// detection emits.
pub fn flops_from_config(label: &str, config: &BTreeMap<String, u64>) -> Option<u64> {
    let ops: Vec<OpKind> = label
        .split('+')
        .map(OpKind::from_short_name)
        .collect::<Option<_>>()?;
    let c = |k: &str| config.get(k).copied();
    let (head, tail) = ops.split_first()?;
    let (mut flops, tail_numel) = match head {
        OpKind::Conv2d => {
            let k = c("kernel_size")?;
            let s = c("stride")?;
            let d = c("dilation")?;
            let g = c("groups")?.max(1);
            let oh = conv_out_size(c("height")?, k, s, d);
            let ow = conv_out_size(c("width")?, k, s, d);
            let out = c("filters")? * oh * ow;
            (2 * (c("in_channels")? / g) * k * k * out, out)
        }
        OpKind::Linear => {
            let tokens = c("tokens")?;
            let out = c("out_features")? * tokens;
            (2 * c("in_features")? * out, out)
        }
        OpKind::MultiHeadAttention => {
            let t = c("tokens")?;
            let e = c("embed_dim")?;
            let q = c("qkv_dim")?;
            (6 * t * e * q + 4 * t * t * q + 2 * t * q * e, t * e)
        }
        OpKind::Embedding => {
            let out = (c("num_features")? + 1) * c("embed_dim")?;
            (2 * out, out)
        }
        OpKind::Add => {
            let f = c("features")?;
            (f * c("arity")?.saturating_sub(1), f)
        }
        OpKind::Concat | OpKind::Input | OpKind::Output => (0, c("features")?),
        other => {
            let f = c("features")?;
            (elementwise_weight(*other)? * f, f)
        }
    };
    for op in tail {
        flops += elementwise_weight(*op)? * tail_numel;
    }
    Some(flops)
}

impl PlatformProfile {
    pub fn new(
        platform_name: impl Into<String>,
        max_parallel: usize,
        interpolation: Interpolation,
        analytic_fallback: AnalyticParams,
        latency_table: Vec<TableEntry>,
        power_table: Vec<TableEntry>,
    ) -> Result<Self> {
        Self::from_file(ProfileFile {
            platform_name: platform_name.into(),
            max_parallel,
            interpolation,
            analytic_fallback,
            latency_table,
            power_table,
        })
    }

    fn from_file(file: ProfileFile) -> Result<Self> {
        if file.max_parallel < 1 {
            return Err(invalid("max_parallel must be >= 1"));
        }
        file.analytic_fallback.validate()?;
        let latency = Table::build(&file.latency_table, "latency")?;
        let power = Table::build(&file.power_table, "power")?;
        Ok(PlatformProfile {
            file,
            latency,
            power,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.file).expect("profile serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn platform_name(&self) -> &str {
        &self.file.platform_name
    }

    pub fn max_parallel(&self) -> usize {
        self.file.max_parallel
    }

    pub fn interpolation(&self) -> Interpolation {
        self.file.interpolation
    }

    pub fn analytic(&self) -> &AnalyticParams {
        &self.file.analytic_fallback
    }

    pub fn latency_table(&self) -> &[TableEntry] {
        &self.file.latency_table
    }

    pub fn power_table(&self) -> &[TableEntry] {
        &self.file.power_table
    }

    /// Copy whose latency predictions are all scaled by `factor` while every
    /// power prediction stays the same (the analytic power rate is rescaled
    /// to compensate).
    pub fn with_scaled_latency(&self, factor: f64) -> Result<Self> {
        let mut file = self.file.clone();
        for e in &mut file.latency_table {
            e.value *= factor;
        }
        file.analytic_fallback.latency_per_gflop *= factor;
        file.analytic_fallback.latency_floor *= factor;
        file.analytic_fallback.power_per_gflop_rate *= factor;
        Self::from_file(file)
    }

    /// Synthetic embedded-GPU platform that runs up to 8 kernels in parallel.
    pub fn synthetic_edge() -> Self {
        Self::new(
            "synthetic-edge-gpu",
            8,
            Interpolation::LinearOnFlops,
            AnalyticParams {
                latency_per_gflop: 20.0,
                latency_floor: 0.05,
                idle_power: 1.2,
                power_per_gflop_rate: 40.0,
            },
            Vec::new(),
            Vec::new(),
        )
        .expect("built-in profile is valid")
    }

    /// Synthetic workstation GPU that runs up to 16 kernels in parallel.
    pub fn synthetic_workstation() -> Self {
        Self::new(
            "synthetic-workstation-gpu",
            16,
            Interpolation::LinearOnFlops,
            AnalyticParams {
                latency_per_gflop: 1.5,
                latency_floor: 0.01,
                idle_power: 18.0,
                power_per_gflop_rate: 60.0,
            },
            Vec::new(),
            Vec::new(),
        )
        .expect("built-in profile is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSource {
    Table,
    Interpolated,
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub latency_ms: f64,
    pub power_w: f64,
    pub latency_source: PredictionSource,
    pub power_source: PredictionSource,
}

/// Predicts one kernel's latency (ms) and power (W) at `batch`.
pub fn predict_kernel(kernel: &Kernel, profile: &PlatformProfile, batch: u64) -> Prediction {
    let mut config = kernel.config.clone();
    config.insert("batch".into(), batch);
    let key = config_key(&config);
    let mode = profile.interpolation();

    let table_or_interp = |t: &Table| {
        t.lookup(&kernel.label, &key)
            .map(|v| (v, PredictionSource::Table))
            .or_else(|| {
                t.interpolate(&kernel.label, batch, kernel.flops, mode)
                    .map(|v| (v, PredictionSource::Interpolated))
            })
    };

    let a = profile.analytic();
    let gflops = kernel.flops as f64 * batch as f64 / 1e9;
    let (latency_ms, latency_source) = table_or_interp(&profile.latency).unwrap_or_else(|| {
        (
            a.latency_floor.max(gflops * a.latency_per_gflop),
            PredictionSource::Analytic,
        )
    });
    let (power_w, power_source) = table_or_interp(&profile.power).unwrap_or_else(|| {
        (
            a.idle_power + a.power_per_gflop_rate * gflops / latency_ms,
            PredictionSource::Analytic,
        )
    });
    Prediction {
        latency_ms,
        power_w,
        latency_source,
        power_source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelEnergy {
    pub kernel_id: usize,
    pub label: String,
    pub latency_ms: f64,
    pub power_w: f64,
    pub energy_mj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyEstimate {
    pub total_energy_mj: f64,
    pub total_latency_ms: f64,
    pub per_kernel: Vec<KernelEnergy>,
}

impl EnergyEstimate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("estimate serializes")
    }

    pub fn render_text(&self) -> String {
        let mut s = format!(
            "{:>6}  {:<28} {:>12} {:>10} {:>12}\n",
            "kernel", "label", "latency_ms", "power_w", "energy_mj"
        );
        for k in &self.per_kernel {
            s.push_str(&format!(
                "{:>6}  {:<28} {:>12.6} {:>10.6} {:>12.6}\n",
                k.kernel_id, k.label, k.latency_ms, k.power_w, k.energy_mj
            ));
        }
        s.push_str(&format!(
            "total energy {:.6} mJ, latency {:.6} ms\n",
            self.total_energy_mj, self.total_latency_ms
        ));
        s
    }
}

/// Prices an already-built plan, summing in plan order.
pub fn estimate_plan(plan: &KernelPlan, profile: &PlatformProfile, batch: u64) -> EnergyEstimate {
    let mut total_energy_mj = 0.0;
    let mut total_latency_ms = 0.0;
    let mut per_kernel = Vec::with_capacity(plan.kernels.len());
    for k in &plan.kernels {
        let p = predict_kernel(k, profile, batch);
        let energy_mj = p.latency_ms * p.power_w;
        total_energy_mj += energy_mj;
        total_latency_ms += p.latency_ms;
        per_kernel.push(KernelEnergy {
            kernel_id: k.id,
            label: k.label.clone(),
            latency_ms: p.latency_ms,
            power_w: p.power_w,
            energy_mj,
        });
    }
    EnergyEstimate {
        total_energy_mj,
        total_latency_ms,
        per_kernel,
    }
}

fn checked_plan(
    graph: &ComputationGraph,
    rules: &[FusionRule],
    profile: &PlatformProfile,
    batch: u64,
) -> Result<KernelPlan> {
    if batch == 0 {
        return Err(invalid("batch must be >= 1"));
    }
    let report = graph.validate();
    if !report.is_empty() {
        let lines: Vec<String> = report.iter().map(ToString::to_string).collect();
        return Err(Error::InvalidGraph(lines.join("; ")));
    }
    plan_for(graph, rules, profile.max_parallel())
}

/// detect -> merge(max_parallel) -> predict -> sum.
pub fn estimate_energy(
    graph: &ComputationGraph,
    rules: &[FusionRule],
    profile: &PlatformProfile,
    batch: u64,
) -> Result<EnergyEstimate> {
    let plan = checked_plan(graph, rules, profile, batch)?;
    Ok(estimate_plan(&plan, profile, batch))
}

/// Sum of predicted kernel powers with no latency weighting.
pub fn total_power(
    graph: &ComputationGraph,
    rules: &[FusionRule],
    profile: &PlatformProfile,
    batch: u64,
) -> Result<f64> {
    let plan = checked_plan(graph, rules, profile, batch)?;
    Ok(plan_power(&plan, profile, batch))
}

pub fn plan_power(plan: &KernelPlan, profile: &PlatformProfile, batch: u64) -> f64 {
    plan.kernels
        .iter()
        .map(|k| predict_kernel(k, profile, batch).power_w)
        .sum()
}

/// Power samples over time; used offline to fill profile tables.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerTrace {
    samples: Vec<(f64, f64)>,
    window: (f64, f64),
}

impl PowerTrace {
    /// `window` defaults to the full sample span.
    pub fn new(samples: Vec<(f64, f64)>, window: Option<(f64, f64)>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(invalid("a power trace needs at least two samples"));
        }
        if samples.iter().any(|(t, p)| !t.is_finite() || !p.is_finite()) {
            return Err(invalid("trace samples must be finite"));
        }
        if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(invalid("trace timestamps must be strictly increasing"));
        }
        let span = (samples[0].0, samples[samples.len() - 1].0);
        let window = window.unwrap_or(span);
        if !(window.0 < window.1) || window.0 < span.0 || window.1 > span.1 {
            return Err(invalid(format!(
                "window [{}, {}] is not inside the sampled span [{}, {}]",
                window.0, window.1, span.0, span.1
            )));
        }
        Ok(PowerTrace { samples, window })
    }

    /// Reads a `timestamp_s,power_w` CSV with header.
    pub fn load_csv(path: impl AsRef<Path>, window: Option<(f64, f64)>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::InvalidArgument(format!("{other:?}")),
        })?;
        let headers = reader.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "timestamp_s" || &headers[1] != "power_w" {
            return Err(invalid("trace header must be `timestamp_s,power_w`"));
        }
        let mut samples = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let cell = |j: usize| -> Result<f64> {
                rec.get(j)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Data {
                        row: i + 1,
                        column: headers[j].to_string(),
                        message: format!("not a number: {:?}", rec.get(j).unwrap_or("")),
                    })
            };
            samples.push((cell(0)?, cell(1)?));
        }
        Self::new(samples, window)
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn window(&self) -> (f64, f64) {
        self.window
    }

    fn power_at(&self, t: f64) -> f64 {
        let i = self.samples.partition_point(|s| s.0 <= t);
        if i == 0 {
            return self.samples[0].1;
        }
        if i == self.samples.len() {
            return self.samples[i - 1].1;
        }
        let (t0, p0) = self.samples[i - 1];
        let (t1, p1) = self.samples[i];
        p0 + (p1 - p0) * (t - t0) / (t1 - t0)
    }
}

/// Trapezoidal integral of power over the trace window, in mJ.
pub fn energy_from_trace(trace: &PowerTrace) -> f64 {
    let (a, b) = trace.window;
    let mut points = vec![(a, trace.power_at(a))];
    points.extend(trace.samples.iter().copied().filter(|&(t, _)| t > a && t < b));
    points.push((b, trace.power_at(b)));
    let joules: f64 = points
        .windows(2)
        .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
        .sum();
    joules * 1000.0
}

/// Centered simple moving average; the window shrinks at the edges.
pub fn moving_average(trace: &PowerTrace, window_n: usize) -> Result<PowerTrace> {
    if window_n == 0 {
        return Err(invalid("moving-average window must be >= 1"));
    }
    let n = trace.samples.len();
    let before = (window_n - 1) / 2;
    let after = window_n / 2;
    let samples = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after).min(n - 1);
            let mean = trace.samples[lo..=hi].iter().map(|s| s.1).sum::<f64>()
                / (hi - lo + 1) as f64;
            (trace.samples[i].0, mean)
        })
        .collect();
    Ok(PowerTrace {
        samples,
        window: trace.window,
    })
}
