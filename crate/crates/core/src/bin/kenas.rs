use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kenas::cost::{energy_from_trace, estimate_energy, moving_average, PlatformProfile, PowerTrace};
use kenas::data::{load_csv, split, synth_dataset, write_dataset_csv, Dataset, Split, SplitSpec, SynthKind};
use kenas::error::{Error, Result};
use kenas::fusion::{default_rules, load_rules, plan_for, FusionRule};
use kenas::graph::ComputationGraph;
use kenas::nas::{
    brute_force, compare, history_csv, search, AccuracyEvaluator, CompareConfig, ControllerConfig, CostModel,
    RunConfig, SearchConfig, SupernetEvaluator, SurrogateTable, DEFAULT_BRUTE_FORCE_CAP,
};
use kenas::space::{encoding_string, SpaceDef};
use kenas::supernet::{Supernet, TrainConfig};

#[derive(Parser)]
#[command(name = "kenas", version, about = "Kernel-level energy estimation and energy-aware architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Predict the inference energy of an operator graph.
    Estimate(EstimateArgs),
    /// Show fused and merged kernels of an operator graph.
    DetectKernels(DetectArgs),
    /// Train a weight-entangled supernet on a CSV dataset.
    TrainSupernet(TrainArgs),
    /// Run the policy-gradient search.
    Search(SearchArgs),
    /// Run conventional, adapted-ETNAS and proposed searches and report.
    Compare(CompareArgs),
    /// Integrate a power trace over a time window.
    TraceEnergy(TraceArgs),
    /// Exhaustively find the optimum of a small space.
    BruteForce(BruteArgs),
    /// Write a synthetic regression dataset as CSV.
    SynthData(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Profile JSON, or `synthetic-edge` / `synthetic-workstation`.
    #[arg(long)]
    profile: String,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    batch: u64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    max_parallel: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset CSV with header.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Target column name; defaults to the last column.
    #[arg(long)]
    target: Option<String>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    space: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Training config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path; the loss history goes next to it as `<out>.loss.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AccuracyArgs {
    /// Supernet checkpoint (needs --data).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Accuracy table JSON keyed by encoding, used instead of a supernet.
    #[arg(long)]
    surrogate: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    space: PathBuf,
    #[command(flatten)]
    accuracy: AccuracyArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    profile: String,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    reward_config: PathBuf,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for `history.csv` and `best_spec.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    space: PathBuf,
    #[command(flatten)]
    accuracy: AccuracyArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    profile: String,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Accuracy target; defaults to 0.95 × the conventional best.
    #[arg(long)]
    target_accuracy: Option<f64>,
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    alpha: f64,
    #[arg(long, default_value_t = -0.5, allow_hyphen_values = true)]
    beta: f64,
    /// Output directory for `report.json` and `report.txt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    trace: PathBuf,
    /// `start,end` in seconds; defaults to the whole trace.
    #[arg(long)]
    window: Option<String>,
    /// Centered moving average over this many samples before integrating.
    #[arg(long)]
    smooth: Option<usize>,
}

#[derive(Args)]
struct BruteArgs {
    #[arg(long)]
    space: PathBuf,
    #[arg(long)]
    profile: String,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    surrogate: PathBuf,
    #[arg(long)]
    reward_config: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BRUTE_FORCE_CAP)]
    cap: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "friedman-like")]
    kind: String,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 6)]
    d: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[argument]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let one_line = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {one_line}", e.code());
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Estimate(a) => {
            let graph = ComputationGraph::load(&a.graph)?.shaped()?;
            let profile = profile(&a.profile)?;
            let est = estimate_energy(&graph, &rules(a.rules.as_deref())?, &profile, a.batch)?;
            let text = match a.format {
                Format::Json => est.to_json() + "\n",
                Format::Text => est.render_text(),
            };
            emit(&text, a.out.as_deref())
        }
        Command::DetectKernels(a) => {
            let graph = ComputationGraph::load(&a.graph)?.shaped()?;
            let plan = plan_for(&graph, &rules(a.rules.as_deref())?, a.max_parallel)?;
            emit(&(plan.to_json() + "\n"), a.out.as_deref())
        }
        Command::TrainSupernet(a) => {
            let space = SpaceDef::load(&a.space)?;
            let (ds, sp) = dataset(&a.data, &space)?;
            let mut cfg = match &a.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            let mut net = Supernet::new(&space, cfg.seed)?;
            let report = net.train(&ds, &sp.train, &cfg)?;
            net.save(&a.out)?;
            let history = sibling(&a.out, "loss.csv");
            report.write_csv(&history)?;
            let means = report.epoch_means();
            println!(
                "trained {} steps; epoch loss {:.6} -> {:.6}; checkpoint {}; history {}",
                report.losses.len(),
                means.first().copied().unwrap_or(f64::NAN),
                means.last().copied().unwrap_or(f64::NAN),
                a.out.display(),
                history.display()
            );
            Ok(())
        }
        Command::Search(a) => {
            let space = SpaceDef::load(&a.space)?;
            let run_cfg = RunConfig::load(&a.reward_config)?;
            let cost = CostModel::new(profile(&a.profile)?, rules(a.rules.as_deref())?);
            let config = SearchConfig {
                reward: run_cfg.reward,
                budget: a.budget.or(run_cfg.budget).unwrap_or(300),
                seed: a.seed.or(run_cfg.seed).unwrap_or(0),
                controller: run_cfg.controller,
            };
            let outcome = with_accuracy(&a.accuracy, &a.data, &space, |acc, _| search(&space, &cost, acc, config.clone()))?;
            fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
            write(&a.out.join("history.csv"), &history_csv(&outcome.history))?;
            write(&a.out.join("best_spec.json"), &(outcome.best.spec.to_json() + "\n"))?;
            println!(
                "best {} energy {:.6} mJ accuracy {:.6} objective {:.6} after {} steps",
                encoding_string(&outcome.best.encoding),
                outcome.best.energy_mj,
                outcome.best.accuracy,
                outcome.best.objective,
                outcome.history.len()
            );
            Ok(())
        }
        Command::Compare(a) => {
            let space = SpaceDef::load(&a.space)?;
            let cost = CostModel::new(profile(&a.profile)?, rules(a.rules.as_deref())?);
            let cfg = CompareConfig {
                budget: a.budget,
                seed: a.seed,
                alpha: a.alpha,
                beta: a.beta,
                target: a.target_accuracy,
                controller: ControllerConfig::default(),
            };
            let report = with_accuracy(&a.accuracy, &a.data, &space, |acc, held| {
                let name = held.as_ref().map(|h| h.data.name.clone()).unwrap_or_else(|| "surrogate".into());
                match held {
                    Some(h) => {
                        let score = |spec: &kenas::space::ArchitectureSpec| h.net.evaluate_accuracy(spec, h.data, &h.split.test);
                        compare(&space, &cost, acc, Some(&score), &name, &cfg)
                    }
                    None => compare(&space, &cost, acc, None, &name, &cfg),
                }
            })?;
            fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
            write(&a.out.join("report.json"), &(report.to_json() + "\n"))?;
            let text = report.render_text();
            write(&a.out.join("report.txt"), &text)?;
            print!("{text}");
            Ok(())
        }
        Command::TraceEnergy(a) => {
            let window = a.window.as_deref().map(parse_window).transpose()?;
            let mut trace = PowerTrace::load_csv(&a.trace, window)?;
            if let Some(n) = a.smooth {
                trace = moving_average(&trace, n)?;
            }
            println!("{:?}", energy_from_trace(&trace));
            Ok(())
        }
        Command::BruteForce(a) => {
            let space = SpaceDef::load(&a.space)?;
            let run_cfg = RunConfig::load(&a.reward_config)?;
            let cost = CostModel::new(profile(&a.profile)?, rules(a.rules.as_deref())?);
            let mut table = SurrogateTable::load(&a.surrogate)?;
            let best = brute_force(&space, &cost, &mut table, &run_cfg.reward, a.cap)?;
            let out = serde_json::json!({
                "spec_encoding": encoding_string(&best.encoding),
                "energy_mj": best.energy_mj,
                "accuracy": best.accuracy,
                "objective": best.objective,
                "spec": best.spec,
            });
            emit(&(serde_json::to_string_pretty(&out)? + "\n"), a.out.as_deref())
        }
        Command::SynthData(a) => {
            let kind: SynthKind = a.kind.parse()?;
            let ds = synth_dataset(kind, a.n, a.d, a.noise, a.seed)?;
            write_dataset_csv(&ds, &a.out)?;
            println!("wrote {} rows x {} features to {}", ds.len(), ds.num_features(), a.out.display());
            Ok(())
        }
    }
}

struct HeldOut<'a> {
    net: &'a Supernet,
    data: &'a Dataset,
    split: &'a Split,
}

/// Builds the accuracy source (supernet on validation rows, or surrogate)
/// and hands it to `f` together with held-out access when there is data.
fn with_accuracy<T>(
    acc: &AccuracyArgs,
    data: &DataArgs,
    space: &SpaceDef,
    f: impl FnOnce(&mut dyn AccuracyEvaluator, Option<HeldOut<'_>>) -> Result<T>,
) -> Result<T> {
    match (&acc.ckpt, &acc.surrogate) {
        (Some(ckpt), None) => {
            let net = Supernet::load(ckpt)?;
            if net.space().family != space.family || net.space().input_dim != space.input_dim {
                return Err(Error::InvalidArgument("checkpoint does not match the space".into()));
            }
            let (ds, sp) = dataset(data, space)?;
            let mut eval = SupernetEvaluator {
                net: &net,
                data: &ds,
                rows: &sp.validation,
            };
            f(&mut eval, Some(HeldOut { net: &net, data: &ds, split: &sp }))
        }
        (None, Some(path)) => {
            let mut table = SurrogateTable::load(path)?;
            f(&mut table, None)
        }
        _ => Err(Error::InvalidArgument("give exactly one of --ckpt or --surrogate".into())),
    }
}

fn dataset(args: &DataArgs, space: &SpaceDef) -> Result<(Dataset, Split)> {
    let path = args
        .data
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--data is required".into()))?;
    let ds = load_csv(path, args.target.as_deref())?;
    if ds.num_features() as u64 != space.input_dim {
        return Err(Error::Dimension(format!(
            "dataset has {} features, space input_dim is {}",
            ds.num_features(),
            space.input_dim
        )));
    }
    let sp = split(ds.len(), &SplitSpec::with_seed(args.split_seed))?;
    Ok((ds, sp))
}

fn profile(arg: &str) -> Result<PlatformProfile> {
    match arg {
        "synthetic-edge" => Ok(PlatformProfile::synthetic_edge()),
        "synthetic-workstation" => Ok(PlatformProfile::synthetic_workstation()),
        path => PlatformProfile::load(path),
    }
}

fn rules(path: Option<&Path>) -> Result<Vec<FusionRule>> {
    match path {
        Some(p) => load_rules(p),
        None => Ok(default_rules()),
    }
}

fn parse_window(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::InvalidArgument(format!("window `{s}` is not `start,end`"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(ext);
    path.with_file_name(name)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
