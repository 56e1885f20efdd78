//! Energy-aware architecture search: the accuracy-constrained energy
//! objective, a REINFORCE controller over the space encoding, a brute-force
//! oracle and the three-method comparison report.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{estimate_energy, PlatformProfile};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::fusion::FusionRule;
use crate::space::{encoding_string, parse_encoding, ArchitectureSpec, CountConvention, SpaceDef};
use crate::supernet::Supernet;

/// Accuracies below this are raised to it before the ratio to the target.
pub const ACCURACY_FLOOR: f64 = 1e-3;
pub const DEFAULT_BRUTE_FORCE_CAP: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// `energy × (acc / T)^w`
    Proposed,
    /// `-acc`
    Conventional,
    /// `total_power × (acc / T)^w`
    AdaptedEtnas,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Proposed => "proposed",
            ObjectiveKind::Conventional => "conventional",
            ObjectiveKind::AdaptedEtnas => "adapted_etnas",
        }
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(ObjectiveKind::Proposed),
            "conventional" => Ok(ObjectiveKind::Conventional),
            "adapted_etnas" | "adapted-etnas" => Ok(ObjectiveKind::AdaptedEtnas),
            _ => Err(invalid(format!("unknown objective kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    #[serde(rename = "T", alias = "target")]
    pub target: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_kind")]
    pub kind: ObjectiveKind,
}

fn default_alpha() -> f64 {
    -2.0
}

fn default_beta() -> f64 {
    -0.5
}

fn default_kind() -> ObjectiveKind {
    ObjectiveKind::Proposed
}

impl RewardConfig {
    pub fn new(target: f64, kind: ObjectiveKind) -> Self {
        RewardConfig {
            target,
            alpha: default_alpha(),
            beta: default_beta(),
            kind,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target > 0.0 && self.target <= 1.0) {
            return Err(invalid(format!("target T = {} must lie in (0, 1]", self.target)));
        }
        if self.kind != ObjectiveKind::Conventional && !(self.alpha < 0.0 && self.beta < 0.0) {
            return Err(invalid("alpha and beta must both be negative"));
        }
        Ok(())
    }

    pub fn with_kind(self, kind: ObjectiveKind) -> Self {
        RewardConfig { kind, ..self }
    }
}

/// `measure × (max(acc, ε) / T)^w` with `w = α` when `acc ≤ T`, else `β`;
/// `-acc` for the conventional objective. `measure` is energy in mJ for the
/// proposed objective and total power in W for adapted ETNAS.
pub fn objective(measure: f64, accuracy: f64, cfg: &RewardConfig) -> Result<f64> {
    cfg.validate()?;
    if !(measure > 0.0 && measure.is_finite()) {
        return Err(invalid(format!("energy must be positive, got {measure}")));
    }
    if !accuracy.is_finite() {
        return Err(invalid("accuracy is not finite"));
    }
    if cfg.kind == ObjectiveKind::Conventional {
        return Ok(-accuracy);
    }
    let acc = accuracy.max(ACCURACY_FLOOR);
    let w = if acc <= cfg.target { cfg.alpha } else { cfg.beta };
    Ok(measure * (acc / cfg.target).powf(w))
}

/// `100 × (1 − new / baseline)`, rounded to one decimal.
pub fn energy_saving(baseline_mj: f64, new_mj: f64) -> Result<f64> {
    if !(baseline_mj > 0.0) {
        return Err(invalid(format!("baseline energy must be positive, got {baseline_mj}")));
    }
    let pct = 100.0 * (1.0 - new_mj / baseline_mj);
    Ok((pct * 10.0).round() / 10.0 + 0.0)
}

/// Energy model used to price candidates.
#[derive(Debug, Clone)]
pub struct CostModel {
    pub profile: PlatformProfile,
    pub rules: Vec<FusionRule>,
    pub batch: u64,
}

impl CostModel {
    pub fn new(profile: PlatformProfile, rules: Vec<FusionRule>) -> Self {
        CostModel { profile, rules, batch: 1 }
    }

    /// `(energy mJ, total power W)` of the lowered spec.
    pub fn measure(&self, space: &SpaceDef, spec: &ArchitectureSpec) -> Result<(f64, f64)> {
        let graph = space.lower(spec)?;
        let est = estimate_energy(&graph, &self.rules, &self.profile, self.batch)?;
        let power = est.per_kernel.iter().map(|k| k.power_w).sum();
        Ok((est.total_energy_mj, power))
    }
}

/// Supplies `Accuracy(s)` for the objective.
pub trait AccuracyEvaluator {
    fn accuracy(&mut self, spec: &ArchitectureSpec, encoding: &[usize]) -> Result<f64>;
}

impl<F> AccuracyEvaluator for F
where
    F: FnMut(&ArchitectureSpec, &[usize]) -> Result<f64>,
{
    fn accuracy(&mut self, spec: &ArchitectureSpec, encoding: &[usize]) -> Result<f64> {
        self(spec, encoding)
    }
}

/// Fixed accuracies keyed by encoding string (`"0-3-1"`).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SurrogateTable {
    pub table: BTreeMap<String, f64>,
}

impl SurrogateTable {
    pub fn insert(&mut self, encoding: &[usize], accuracy: f64) {
        self.table.insert(encoding_string(encoding), accuracy);
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: SurrogateTable = serde_json::from_str(text)?;
        for k in t.table.keys() {
            parse_encoding(k)?;
        }
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

impl AccuracyEvaluator for SurrogateTable {
    fn accuracy(&mut self, _spec: &ArchitectureSpec, encoding: &[usize]) -> Result<f64> {
        let key = encoding_string(encoding);
        self.table
            .get(&key)
            .copied()
            .ok_or_else(|| invalid(format!("surrogate has no accuracy for `{key}`")))
    }
}

/// R² of a frozen supernet subnet on fixed rows.
pub struct SupernetEvaluator<'a> {
    pub net: &'a Supernet,
    pub data: &'a Dataset,
    pub rows: &'a [usize],
}

impl AccuracyEvaluator for SupernetEvaluator<'_> {
    fn accuracy(&mut self, spec: &ArchitectureSpec, _encoding: &[usize]) -> Result<f64> {
        self.net.evaluate_accuracy(spec, self.data, self.rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Measured {
    energy_mj: f64,
    power_w: f64,
    accuracy: f64,
}

/// Cached `(energy, power, accuracy)` per encoding.
struct Evaluation<'a> {
    space: &'a SpaceDef,
    cost: &'a CostModel,
    accuracy: &'a mut dyn AccuracyEvaluator,
    cache: HashMap<Vec<usize>, Measured>,
}

impl<'a> Evaluation<'a> {
    fn new(space: &'a SpaceDef, cost: &'a CostModel, accuracy: &'a mut dyn AccuracyEvaluator) -> Self {
        Evaluation {
            space,
            cost,
            accuracy,
            cache: HashMap::new(),
        }
    }

    fn measure(&mut self, spec: &ArchitectureSpec, encoding: &[usize]) -> Result<Measured> {
        if let Some(m) = self.cache.get(encoding) {
            return Ok(*m);
        }
        let (energy_mj, power_w) = self.cost.measure(self.space, spec)?;
        let accuracy = self.accuracy.accuracy(spec, encoding)?;
        let m = Measured {
            energy_mj,
            power_w,
            accuracy,
        };
        self.cache.insert(encoding.to_vec(), m);
        Ok(m)
    }
}

fn score(m: &Measured, reward: &RewardConfig) -> Result<f64> {
    let measure = match reward.kind {
        ObjectiveKind::AdaptedEtnas => m.power_w,
        _ => m.energy_mj,
    };
    objective(measure, m.accuracy, reward)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub encoding: Vec<usize>,
    pub spec: ArchitectureSpec,
    pub energy_mj: f64,
    pub power_w: f64,
    pub accuracy: f64,
    pub objective: f64,
}

pub fn write_history_csv(rows: &[HistoryRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, history_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("iter,spec_encoding,energy_mj,accuracy,objective\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{:?}",
            r.iter,
            encoding_string(&r.encoding),
            r.energy_mj,
            r.accuracy,
            r.objective
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub learning_rate: f64,
    pub entropy_coeff: f64,
    pub baseline_decay: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            learning_rate: 0.05,
            entropy_coeff: 0.01,
            baseline_decay: 0.9,
        }
    }
}

impl ControllerConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("controller learning_rate must be positive"));
        }
        if !(self.entropy_coeff >= 0.0) {
            return Err(invalid("entropy_coeff must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(invalid("baseline_decay must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Factorized categorical policy, one logit vector per encoding slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    logits: Vec<Vec<f64>>,
    config: ControllerConfig,
    baseline: Option<f64>,
    globals: usize,
    per_block: usize,
}

const MAX_BLOCK_RESAMPLES: usize = 10_000;

impl Policy {
    pub fn new(space: &SpaceDef, config: ControllerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Policy {
            logits: space
                .slot_cardinalities()
                .into_iter()
                .map(|c| vec![0.0; c])
                .collect(),
            config,
            baseline: None,
            globals: space.global_choices.len(),
            per_block: space.per_block_choices.len(),
        })
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    pub fn probabilities(&self, slot: usize) -> Vec<f64> {
        softmax(&self.logits[slot])
    }

    /// Number of leading slots that matter for an encoding of depth index `d`.
    fn active_len(&self, space: &SpaceDef, encoding: &[usize]) -> usize {
        let depth = space.depth.value(encoding[0]).expect("valid encoding") as usize;
        1 + self.globals + depth * self.per_block
    }

    /// Samples depth, globals and active blocks; inactive slots are zero.
    /// Blocks violating the attention divisibility rule are redrawn.
    pub fn sample<R: Rng + ?Sized>(&self, space: &SpaceDef, rng: &mut R) -> Result<Vec<usize>> {
        let mut enc = vec![0; self.logits.len()];
        enc[0] = sample_categorical(&self.probabilities(0), rng);
        for (s, slot) in enc.iter_mut().enumerate().take(1 + self.globals).skip(1) {
            *slot = sample_categorical(&self.probabilities(s), rng);
        }
        let active = self.active_len(space, &enc);
        let keys: Vec<&String> = space.per_block_choices.keys().collect();
        let mut start = 1 + self.globals;
        while start < active {
            let mut tries = 0;
            loop {
                for (s, slot) in enc.iter_mut().enumerate().skip(start).take(self.per_block) {
                    *slot = sample_categorical(&self.probabilities(s), rng);
                }
                let block: BTreeMap<&str, f64> = keys
                    .iter()
                    .zip(start..)
                    .map(|(k, s)| (k.as_str(), space.per_block_choices[*k].value(enc[s]).expect("in range")))
                    .collect();
                let legal = match (block.get("embed_dim"), block.get("num_heads")) {
                    (Some(&e), Some(&h)) => (e as u64).is_multiple_of(h as u64),
                    _ => true,
                };
                if legal {
                    break;
                }
                tries += 1;
                if tries > MAX_BLOCK_RESAMPLES {
                    return Err(invalid("policy cannot produce a legal attention block"));
                }
            }
            start += self.per_block;
        }
        Ok(enc)
    }

    pub fn log_prob(&self, space: &SpaceDef, encoding: &[usize]) -> f64 {
        let active = self.active_len(space, encoding);
        (0..active)
            .map(|s| self.probabilities(s)[encoding[s]].ln())
            .sum()
    }

    /// REINFORCE update with an EMA baseline; returns the advantage used.
    pub fn update(&mut self, space: &SpaceDef, encoding: &[usize], objective: f64) -> f64 {
        let baseline = *self.baseline.get_or_insert(objective);
        let advantage = baseline - objective;
        let ControllerConfig {
            learning_rate,
            entropy_coeff,
            baseline_decay,
        } = self.config;
        let active = self.active_len(space, encoding);
        for (s, &action) in encoding.iter().enumerate().take(active) {
            let p = softmax(&self.logits[s]);
            let entropy: f64 = -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>();
            for (k, logit) in self.logits[s].iter_mut().enumerate() {
                let onehot = if k == action { 1.0 } else { 0.0 };
                let grad_logp = onehot - p[k];
                let grad_entropy = if p[k] > 0.0 { -p[k] * (p[k].ln() + entropy) } else { 0.0 };
                *logit += learning_rate * (advantage * grad_logp + entropy_coeff * grad_entropy);
            }
        }
        self.baseline = Some(baseline_decay * baseline + (1.0 - baseline_decay) * objective);
        advantage
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, q) in p.iter().enumerate() {
        acc += q;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub reward: RewardConfig,
    pub budget: usize,
    pub seed: u64,
    #[serde(default)]
    pub controller: ControllerConfig,
}

impl SearchConfig {
    pub fn new(reward: RewardConfig, budget: usize, seed: u64) -> Self {
        SearchConfig {
            reward,
            budget,
            seed,
            controller: ControllerConfig::default(),
        }
    }
}

/// Run configuration file; paths given on the command line take precedence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub space: Option<String>,
    #[serde(default)]
    pub profile_path: Option<String>,
    pub reward: RewardConfig,
    #[serde(default)]
    pub budget: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub controller: ControllerConfig,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.reward.validate()?;
        cfg.controller.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: HistoryRow,
    pub history: Vec<HistoryRow>,
}

/// A controller run in progress.
pub struct SearchRun<'a> {
    eval: Evaluation<'a>,
    config: SearchConfig,
    policy: Policy,
    rng: ChaCha8Rng,
    history: Vec<HistoryRow>,
}

impl<'a> SearchRun<'a> {
    pub fn new(
        space: &'a SpaceDef,
        cost: &'a CostModel,
        accuracy: &'a mut dyn AccuracyEvaluator,
        config: SearchConfig,
    ) -> Result<Self> {
        config.reward.validate()?;
        if config.budget == 0 {
            return Err(invalid("budget must be >= 1"));
        }
        Ok(SearchRun {
            eval: Evaluation::new(space, cost, accuracy),
            policy: Policy::new(space, config.controller)?,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            history: Vec::new(),
        })
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    /// Sample, evaluate, score, update the policy and record the row.
    pub fn reinforce_step(&mut self) -> Result<&HistoryRow> {
        if self.history.len() >= self.config.budget {
            return Err(Error::BudgetExhausted(self.config.budget));
        }
        let space = self.eval.space;
        let encoding = self.policy.sample(space, &mut self.rng)?;
        let spec = space.decode(&encoding)?;
        let m = self.eval.measure(&spec, &encoding)?;
        let objective = score(&m, &self.config.reward)?;
        self.policy.update(space, &encoding, objective);
        self.history.push(HistoryRow {
            iter: self.history.len(),
            encoding,
            spec,
            energy_mj: m.energy_mj,
            power_w: m.power_w,
            accuracy: m.accuracy,
            objective,
        });
        Ok(self.history.last().expect("just pushed"))
    }

    /// Steps to the budget and returns the best evaluated spec.
    pub fn run(mut self) -> Result<SearchOutcome> {
        while self.history.len() < self.config.budget {
            self.reinforce_step()?;
        }
        let best = self
            .history
            .iter()
            .fold(None::<&HistoryRow>, |best, r| match best {
                Some(b) if b.objective <= r.objective => Some(b),
                _ => Some(r),
            })
            .expect("budget >= 1")
            .clone();
        Ok(SearchOutcome {
            best,
            history: self.history,
        })
    }
}

pub fn search(
    space: &SpaceDef,
    cost: &CostModel,
    accuracy: &mut dyn AccuracyEvaluator,
    config: SearchConfig,
) -> Result<SearchOutcome> {
    SearchRun::new(space, cost, accuracy, config)?.run()
}

/// Exact argmin over every legal spec; ties go to the earlier encoding.
pub fn brute_force(
    space: &SpaceDef,
    cost: &CostModel,
    accuracy: &mut dyn AccuracyEvaluator,
    reward: &RewardConfig,
    cap: u64,
) -> Result<HistoryRow> {
    reward.validate()?;
    let count = space.candidate_count(CountConvention::Enumerative);
    if count > cap.into() {
        return Err(Error::SpaceTooLarge {
            count: count.to_string(),
            cap,
        });
    }
    let mut eval = Evaluation::new(space, cost, accuracy);
    let mut best: Option<HistoryRow> = None;
    for (i, spec) in space.enumerate().enumerate() {
        if !space.is_legal(&spec) {
            continue;
        }
        let encoding = space.encode(&spec)?;
        let m = eval.measure(&spec, &encoding)?;
        let objective = score(&m, reward)?;
        if best.as_ref().is_none_or(|b| objective < b.objective) {
            best = Some(HistoryRow {
                iter: i,
                encoding,
                spec,
                energy_mj: m.energy_mj,
                power_w: m.power_w,
                accuracy: m.accuracy,
                objective,
            });
        }
    }
    best.ok_or_else(|| invalid("space has no legal candidates"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub energy_mj: f64,
    /// Held-out accuracy when a dataset is available, else the search accuracy.
    pub accuracy: f64,
    /// Accuracy the objective saw during search.
    pub validation_accuracy: f64,
    pub energy_saving_pct: f64,
    pub spec_encoding: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub dataset: String,
    pub space: String,
    pub target: f64,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn render_text(&self) -> String {
        let mut s = format!("dataset: {}  space: {}  T = {:.4}\n", self.dataset, self.space, self.target);
        let _ = writeln!(
            s,
            "{:<14} {:>12} {:>10} {:>18}",
            "method", "Energy mJ", "Accuracy", "Energy Saving (%)"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>12.4} {:>10.4} {:>18.1}",
                r.method, r.energy_mj, r.accuracy, r.energy_saving_pct
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub budget: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    /// `None` uses 0.95 × the conventional search's best accuracy.
    pub target: Option<f64>,
    pub controller: ControllerConfig,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            budget: 300,
            seed: 0,
            alpha: default_alpha(),
            beta: default_beta(),
            target: None,
            controller: ControllerConfig::default(),
        }
    }
}

/// Scores a winning spec on held-out rows.
pub type HeldOutScore<'a> = &'a dyn Fn(&ArchitectureSpec) -> Result<f64>;

/// Runs conventional, adapted-ETNAS and proposed searches with the same
/// budget and seed. `held_out` scores each winner for the accuracy column.
pub fn compare(
    space: &SpaceDef,
    cost: &CostModel,
    accuracy: &mut dyn AccuracyEvaluator,
    held_out: Option<HeldOutScore<'_>>,
    dataset: &str,
    cfg: &CompareConfig,
) -> Result<Report> {
    let reward = |target: f64, kind| RewardConfig {
        target,
        alpha: cfg.alpha,
        beta: cfg.beta,
        kind,
    };
    let run = |accuracy: &mut dyn AccuracyEvaluator, reward: RewardConfig| {
        search(
            space,
            cost,
            accuracy,
            SearchConfig {
                reward,
                budget: cfg.budget,
                seed: cfg.seed,
                controller: cfg.controller,
            },
        )
    };
    let conventional = run(accuracy, reward(1.0, ObjectiveKind::Conventional))?.best;
    let target = cfg
        .target
        .unwrap_or_else(|| (0.95 * conventional.accuracy).clamp(ACCURACY_FLOOR, 1.0));
    let adapted = run(accuracy, reward(target, ObjectiveKind::AdaptedEtnas))?.best;
    let proposed = run(accuracy, reward(target, ObjectiveKind::Proposed))?.best;

    let mut rows = Vec::new();
    for (kind, best) in [
        (ObjectiveKind::Conventional, &conventional),
        (ObjectiveKind::AdaptedEtnas, &adapted),
        (ObjectiveKind::Proposed, &proposed),
    ] {
        let accuracy = match held_out {
            Some(f) => f(&best.spec)?,
            None => best.accuracy,
        };
        rows.push(ReportRow {
            method: kind.name().to_string(),
            energy_mj: best.energy_mj,
            accuracy,
            validation_accuracy: best.accuracy,
            energy_saving_pct: energy_saving(conventional.energy_mj, best.energy_mj)?,
            spec_encoding: encoding_string(&best.encoding),
        });
    }
    Ok(Report {
        dataset: dataset.to_string(),
        space: space.family.to_string(),
        target,
        rows,
    })
}
