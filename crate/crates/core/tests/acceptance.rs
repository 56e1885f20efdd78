//! Acceptance criteria 1-9, one PASS/FAIL line each.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use kenas::cost::{estimate_energy, PlatformProfile};
use kenas::data::{split, synth_dataset, write_dataset_csv, SplitSpec, SynthKind};
use kenas::fusion::{default_rules, detect_kernels, merge_parallel};
use kenas::graph::ComputationGraph;
use kenas::nas::{
    brute_force, compare, energy_saving, objective, CompareConfig, CostModel, ObjectiveKind, RewardConfig,
    SupernetEvaluator, SurrogateTable, DEFAULT_BRUTE_FORCE_CAP,
};
use kenas::space::{ChoiceRange, CountConvention, Family, SpaceDef};
use kenas::supernet::{Supernet, TrainConfig};
use ndarray::Array2;
use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn criterion_1() -> Outcome {
    let rules = default_rules();
    for profile in [PlatformProfile::synthetic_edge(), PlatformProfile::synthetic_workstation()] {
        for k in [2usize, 4, 8] {
            let multi = estimate_energy(&common::branch_graph(k, 16, 8, 32), &rules, &profile, 1).map_err(|e| e.to_string())?;
            let single = estimate_energy(&common::merged_graph(k, 16, 8, 32), &rules, &profile, 1).map_err(|e| e.to_string())?;
            ensure(multi.total_energy_mj == single.total_energy_mj, || {
                format!(
                    "{} k={k}: {} mJ vs {} mJ",
                    profile.platform_name(),
                    multi.total_energy_mj,
                    single.total_energy_mj
                )
            })?;
        }
    }
    Ok("k in {2,4,8} x 2 profiles equal".into())
}

fn criterion_2() -> Outcome {
    let rules = default_rules();
    let inception = ComputationGraph::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/inception_block.json"))
        .and_then(|g| g.shaped())
        .map_err(|e| e.to_string())?;
    let before = detect_kernels(&inception, &rules).map_err(|e| e.to_string())?;
    let after = merge_parallel(&before, 8).map_err(|e| e.to_string())?;
    let bad = common::merge_violations(&inception, &before, &after, 8);
    ensure(bad.is_empty(), || format!("inception: {bad:?}"))?;
    ensure(after.merge_log.len() == 1 && after.merge_log[0].summed_filters == 64 + 96 + 16, || {
        format!("inception merges: {:?}", after.merge_log.iter().map(|r| r.summed_filters).collect::<Vec<_>>())
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut records = 0;
    for i in 0..500 {
        let g = common::random_conv_dag(&mut rng);
        let before = detect_kernels(&g, &rules).map_err(|e| e.to_string())?;
        for mp in [2, 8, 16] {
            let after = merge_parallel(&before, mp).map_err(|e| e.to_string())?;
            records += after.merge_log.len();
            let bad = common::merge_violations(&g, &before, &after, mp);
            ensure(bad.is_empty(), || format!("dag {i}, max_parallel {mp}: {bad:?}"))?;
        }
    }
    ensure(records > 0, || "random corpus produced no merges".into())?;
    Ok(format!("500 DAGs x 3 limits, {records} merge records, 0 violations"))
}

fn criterion_3() -> Outcome {
    let cfg = |t: f64| RewardConfig::new(t, ObjectiveKind::Proposed);
    let obj = |e, a, t| objective(e, a, &cfg(t)).map_err(|e| e.to_string());
    let cases = [(5.0, 0.9, 0.9, 5.0), (2.0, 0.45, 0.9, 8.0), (4.0, 1.0, 0.25, 2.0)];
    for (e, a, t, want) in cases {
        let got = obj(e, a, t)?;
        ensure(((got - want) / want).abs() <= 1e-12, || format!("objective({e}, {a}, T={t}) = {got}, want {want}"))?;
    }
    let halved = obj(3.0, 0.3, 0.8)? / obj(3.0, 0.6, 0.8)?;
    ensure((halved - 4.0).abs() < 1e-12, || format!("halving ratio {halved}"))?;
    let eps = 1e-6;
    let (e, t) = (5.0, 0.9);
    let at_t = obj(e, t, t)?;
    ensure(at_t == e, || format!("objective at T is {at_t}, want {e}"))?;
    let gap = (obj(e, t - eps, t)? - obj(e, t + eps, t)?).abs();
    ensure(gap < 1e-9, || format!("examples and x4 penalty hold; |obj(T-eps) - obj(T+eps)| = {gap:e} at eps = {eps:e}, energy {e}, T {t}"))?;
    Ok(format!("examples exact, |jump| at T = {gap:.2e}, halving ratio {halved}"))
}

/// `(conventional mJ, proposed mJ, printed saving %)` for all 30 rows.
const SAVINGS: [(f64, f64, f64); 30] = [
    (13.214, 1.350, 89.8),
    (5.563, 1.398, 74.9),
    (5.561, 1.550, 72.1),
    (5.562, 1.636, 70.6),
    (5.6, 1.350, 75.9),
    (3.826, 1.392, 82.8),
    (5.578, 1.387, 75.1),
    (3.011, 1.372, 54.4),
    (5.569, 1.550, 72.2),
    (8.114, 2.810, 65.4),
    (9.354, 0.866, 90.7),
    (6.08, 0.863, 85.8),
    (10.035, 0.867, 91.4),
    (10.056, 0.868, 91.4),
    (10.709, 0.87, 91.9),
    (2.819, 0.867, 69.3),
    (9.339, 0.881, 90.6),
    (8.452, 0.866, 89.8),
    (7.179, 0.867, 87.9),
    (6.933, 0.866, 87.5),
    (5.191, 0.520, 90.0),
    (5.092, 0.521, 89.8),
    (5.139, 0.519, 89.9),
    (3.313, 0.521, 84.3),
    (3.288, 0.524, 84.1),
    (2.36, 0.523, 77.8),
    (3.3, 0.524, 84.1),
    (1.366, 0.518, 62.0),
    (2.381, 0.523, 78.0),
    (1.578, 0.518, 67.2),
];

fn criterion_4() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut misses = Vec::new();
    for (i, &(base, new, printed)) in SAVINGS.iter().enumerate() {
        let got = energy_saving(base, new).map_err(|e| e.to_string())?;
        let gap = (got - printed).abs();
        worst = worst.max(gap);
        if gap > 0.15 + 1e-9 {
            misses.push(format!("row {i}: {base} -> {new} gives {got}, printed {printed}"));
        }
    }
    ensure(misses.is_empty(), || misses.join("; "))?;
    Ok(format!("30 rows, max gap {worst:.2} points"))
}

fn criterion_5() -> Outcome {
    let mlp = SpaceDef::builtin(Family::Mlp, 8, 1).candidate_count(CountConvention::MaxDepth);
    let resnet = SpaceDef::builtin(Family::ResNet, 8, 1).candidate_count(CountConvention::MaxDepth);
    let want_mlp = BigUint::from(32u32).pow(11);
    let want_resnet = BigUint::from(32u32) * BigUint::from(32u32).pow(11);
    ensure(mlp == want_mlp, || format!("mlp {mlp}"))?;
    ensure(resnet == want_resnet, || format!("resnet {resnet}"))?;
    Ok(format!("mlp {mlp}, resnet {resnet}"))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    // (a) forward oracle
    let mut worst_fwd: f64 = 0.0;
    for family in [Family::Mlp, Family::ResNet] {
        let space = SpaceDef::builtin(family, 7, 1);
        let net = Supernet::new(&space, 1).map_err(|e| e.to_string())?;
        let x = Array2::from_shape_simple_fn((6, 7), || rng.random_range(-2.0..2.0));
        for _ in 0..50 {
            let spec = space.sample_uniform(&mut rng);
            let got = net.subnet_forward(&spec, x.view()).map_err(|e| e.to_string())?;
            let want = common::reference_forward(&net, &spec, &x);
            let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
            for (g, w) in got.iter().zip(&want) {
                worst_fwd = worst_fwd.max((g - w).abs() / scale);
            }
        }
    }
    ensure(worst_fwd <= 1e-12, || format!("forward relative gap {worst_fwd:e}"))?;

    // (b) gradients
    let mut worst_grad: f64 = 0.0;
    for family in [Family::Mlp, Family::ResNet] {
        let mut space = SpaceDef::builtin(family, 3, 1);
        space.depth = ChoiceRange::explicit(vec![1.0, 2.0]).unwrap();
        space.per_block_choices.insert("hidden_dim".into(), ChoiceRange::explicit(vec![4.0, 8.0]).unwrap());
        if family == Family::ResNet {
            space.global_choices.insert("backbone_dim".into(), ChoiceRange::explicit(vec![4.0, 8.0]).unwrap());
        }
        let mut net = Supernet::new(&space, 3).map_err(|e| e.to_string())?;
        // nonzero biases keep every pre-activation off the ReLU kink
        for layer in net.layers_mut() {
            layer.bias.mapv_inplace(|_| rng.random_range(0.1..0.5));
        }
        let spec = space.decode(&vec![1; space.slot_cardinalities().len()]).unwrap();
        let mut spec = spec;
        for b in &mut spec.block_choices {
            b.insert("hidden_dim".into(), 4.0);
        }
        let x = Array2::from_shape_simple_fn((10, 3), || rng.random_range(-1.0..1.0));
        let y = ndarray::Array1::from_shape_simple_fn(10, || rng.random_range(-1.0..1.0));
        worst_grad = worst_grad.max(common::finite_difference_gap(&net, &spec, &x, &y, 1e-6));
    }
    ensure(worst_grad < 1e-6, || format!("gradient relative gap {worst_grad:e}"))?;

    // (c) untouched parameters after 1000 steps
    let mut space = SpaceDef::builtin(Family::Mlp, 5, 1);
    space.depth = ChoiceRange::stepped(1.0, 4.0, 1.0).unwrap();
    space.per_block_choices.insert("hidden_dim".into(), ChoiceRange::stepped(16.0, 64.0, 16.0).unwrap());
    let mut sampler = space.clone();
    sampler.depth = ChoiceRange::stepped(1.0, 3.0, 1.0).unwrap();
    sampler.per_block_choices.insert("hidden_dim".into(), ChoiceRange::explicit(vec![16.0, 32.0]).unwrap());
    let ds = synth_dataset(SynthKind::Linear, 200, 5, 0.1, 4).map_err(|e| e.to_string())?;
    let rows: Vec<usize> = (0..200).collect();
    let mut net = Supernet::new(&space, 8).map_err(|e| e.to_string())?;
    let initial = net.clone();
    let cfg = TrainConfig { epochs: 125, batch_size: 25, ..TrainConfig::default() };
    let report = net.train_with_sampler(&ds, &rows, &cfg, &sampler).map_err(|e| e.to_string())?;
    ensure(report.losses.len() == 1000, || format!("{} steps", report.losses.len()))?;
    let mut touched: Vec<Array2<bool>> = net.layers().iter().map(|l| Array2::from_elem(l.weight.dim(), false)).collect();
    for spec in &report.specs {
        for (l, o, i) in net.slices_for(spec).unwrap() {
            touched[l].slice_mut(ndarray::s![..o, ..i]).fill(true);
        }
    }
    let mut untouched = 0usize;
    for (l, (now, then)) in net.layers().iter().zip(initial.layers()).enumerate() {
        for ((idx, &t), (&a, &b)) in touched[l].indexed_iter().zip(now.weight.iter().zip(then.weight.iter())) {
            if !t {
                untouched += 1;
                ensure(a.to_bits() == b.to_bits(), || format!("layer {l} weight {idx:?} changed"))?;
            }
        }
        let rows_used = (0..now.max_out()).filter(|&r| touched[l].row(r).iter().any(|&t| t)).count();
        for r in rows_used..now.max_out() {
            ensure(now.bias[r].to_bits() == then.bias[r].to_bits(), || format!("layer {l} bias {r} changed"))?;
        }
    }
    ensure(untouched > 0, || "sampler touched everything".into())?;
    Ok(format!(
        "forward gap {worst_fwd:.1e}, gradient gap {worst_grad:.1e}, {untouched} untouched weights bitwise equal"
    ))
}

fn toy_space() -> SpaceDef {
    let mut s = SpaceDef::builtin(Family::Mlp, 6, 1);
    s.depth = ChoiceRange::stepped(1.0, 3.0, 1.0).unwrap();
    s.per_block_choices.insert("hidden_dim".into(), ChoiceRange::explicit(vec![16.0, 32.0, 64.0]).unwrap());
    s
}

fn criterion_7() -> Outcome {
    let space = toy_space();
    let count = space.candidate_count(CountConvention::Enumerative);
    ensure(count <= BigUint::from(64u32), || format!("toy space has {count} candidates"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut table = SurrogateTable::default();
    for spec in space.enumerate() {
        let width: f64 = spec.block_choices.iter().map(|b| b["hidden_dim"]).sum();
        let acc = 0.5 + 0.4 * (1.0 - (-width / 50.0).exp()) + rng.random_range(-0.03..0.03);
        table.insert(&space.encode(&spec).unwrap(), acc);
    }
    let cost = CostModel::new(PlatformProfile::synthetic_edge(), default_rules());
    let reward = RewardConfig::new(0.8, ObjectiveKind::Proposed);
    let oracle = brute_force(&space, &cost, &mut table.clone(), &reward, DEFAULT_BRUTE_FORCE_CAP).map_err(|e| e.to_string())?;
    let mut exact = 0;
    let mut within = 0;
    for seed in 0..10 {
        let out = kenas::nas::search(
            &space,
            &cost,
            &mut table.clone(),
            kenas::nas::SearchConfig::new(reward, 2000, seed),
        )
        .map_err(|e| e.to_string())?;
        if out.best.encoding == oracle.encoding {
            exact += 1;
        }
        if out.best.objective <= oracle.objective * 1.05 {
            within += 1;
        }
    }
    ensure(within == 10 && exact >= 8, || format!("exact {exact}/10, within 5% {within}/10"))?;
    Ok(format!("exact {exact}/10, within 5% {within}/10"))
}

fn criterion_8() -> Outcome {
    let space = toy_space();
    let cost = CostModel::new(PlatformProfile::synthetic_edge(), default_rules());
    let mut good = 0;
    let mut notes = Vec::new();
    for seed in 0..10u64 {
        let ds = synth_dataset(SynthKind::FriedmanLike, 1000, 6, 0.1, seed).map_err(|e| e.to_string())?;
        let sp = split(ds.len(), &SplitSpec::with_seed(seed)).map_err(|e| e.to_string())?;
        let mut net = Supernet::new(&space, seed).map_err(|e| e.to_string())?;
        let train = TrainConfig { epochs: 400, batch_size: 8, learning_rate: 0.005, seed, ..TrainConfig::default() };
        net.train(&ds, &sp.train, &train)
            .map_err(|e| e.to_string())?;
        let mut eval = SupernetEvaluator { net: &net, data: &ds, rows: &sp.validation };
        let held = |spec: &kenas::space::ArchitectureSpec| net.evaluate_accuracy(spec, &ds, &sp.test);
        let cfg = CompareConfig { seed, ..CompareConfig::default() };
        let report = compare(&space, &cost, &mut eval, Some(&held), &ds.name, &cfg).map_err(|e| e.to_string())?;
        let conv = report.row("conventional").unwrap();
        let prop = report.row("proposed").unwrap();
        let ok = prop.energy_mj < conv.energy_mj && prop.validation_accuracy.max(kenas::nas::ACCURACY_FLOOR) >= report.target;
        if ok {
            good += 1;
        } else {
            notes.push(format!(
                "seed {seed}: E {:.4} vs {:.4}, acc {:.4} vs T {:.4}",
                prop.energy_mj, conv.energy_mj, prop.validation_accuracy, report.target
            ));
        }
        for row in &report.rows {
            let want = energy_saving(conv.energy_mj, row.energy_mj).map_err(|e| e.to_string())?;
            ensure(row.energy_saving_pct == want, || format!("seed {seed}: inconsistent saving column"))?;
        }
    }
    ensure(good >= 9, || format!("{good}/10 seeds: {}", notes.join("; ")))?;
    Ok(format!("{good}/10 seeds show lower energy at accuracy >= T"))
}

fn criterion_9() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_kenas");
    let assets = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets");
    let a = |name: &str| assets.join(name).display().to_string();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let work = dir.path();
    let ds = synth_dataset(SynthKind::FriedmanLike, 300, 6, 0.1, 9).map_err(|e| e.to_string())?;
    let data = work.join("data.csv");
    write_dataset_csv(&ds, &data).map_err(|e| e.to_string())?;
    let data = data.display().to_string();
    let out = |name: &str| work.join(name).display().to_string();
    let train_cfg = work.join("train.json");
    std::fs::write(&train_cfg, r#"{"epochs": 5, "batch_size": 16, "seed": 3}"#).map_err(|e| e.to_string())?;
    let train_cfg = train_cfg.display().to_string();
    let ckpt = out("net.ckpt");

    let commands: Vec<(&str, Vec<String>, Vec<String>)> = vec![
        ("synth-data", vec!["synth-data", "--n", "50", "--seed", "4", "--out", &out("synth.csv")].into_iter().map(String::from).collect(), vec![out("synth.csv")]),
        ("estimate", vec!["estimate".into(), "--graph".into(), a("single_kernel_graph.json"), "--profile".into(), a("single_kernel_profile.json"), "--rules".into(), a("rules.txt"), "--out".into(), out("estimate.json")], vec![out("estimate.json")]),
        ("detect-kernels", vec!["detect-kernels".into(), "--graph".into(), a("inception_block.json"), "--rules".into(), a("rules.txt"), "--out".into(), out("plan.json")], vec![out("plan.json")]),
        ("train-supernet", vec!["train-supernet".into(), "--space".into(), a("toy_space.json"), "--data".into(), data.clone(), "--config".into(), train_cfg.clone(), "--out".into(), ckpt.clone()], vec![ckpt.clone(), format!("{ckpt}.loss.csv")]),
        ("search", vec!["search".into(), "--space".into(), a("toy_space.json"), "--ckpt".into(), ckpt.clone(), "--data".into(), data.clone(), "--profile".into(), a("synthetic_edge.json"), "--reward-config".into(), a("toy_reward.json"), "--budget".into(), "60".into(), "--seed".into(), "5".into(), "--out".into(), out("run")], vec![out("run/history.csv"), out("run/best_spec.json")]),
        ("compare", vec!["compare".into(), "--space".into(), a("toy_space.json"), "--ckpt".into(), ckpt.clone(), "--data".into(), data.clone(), "--profile".into(), a("synthetic_edge.json"), "--budget".into(), "60".into(), "--out".into(), out("report")], vec![out("report/report.json"), out("report/report.txt")]),
        ("trace-energy", vec!["trace-energy".into(), "--trace".into(), a("power_trace.csv"), "--window".into(), "0.2,0.8".into(), "--smooth".into(), "3".into()], vec![]),
        ("brute-force", vec!["brute-force".into(), "--space".into(), a("toy_space.json"), "--profile".into(), a("synthetic_edge.json"), "--surrogate".into(), a("toy_surrogate.json"), "--reward-config".into(), a("toy_reward.json"), "--out".into(), out("brute.json")], vec![out("brute.json")]),
    ];

    let run = |args: &[String]| -> Result<(Vec<u8>, Vec<u8>), String> {
        let o = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!("{}: {}", args[0], String::from_utf8_lossy(&o.stderr)));
        }
        Ok((o.stdout, o.stderr))
    };
    let mut checked = 0;
    for (name, args, files) in &commands {
        let (stdout1, _) = run(args)?;
        let first: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).map_err(|e| format!("{f}: {e}"))).collect::<Result<_, _>>()?;
        let (stdout2, _) = run(args)?;
        let second: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).map_err(|e| format!("{f}: {e}"))).collect::<Result<_, _>>()?;
        ensure(stdout1 == stdout2, || format!("{name}: stdout differs"))?;
        ensure(first == second, || format!("{name}: output files differ"))?;
        checked += files.len();
    }
    let energy: f64 = {
        let est: serde_json::Value = serde_json::from_slice(&std::fs::read(out("estimate.json")).unwrap()).unwrap();
        est["total_energy_mj"].as_f64().unwrap()
    };
    ensure(energy == 3.0, || format!("single-kernel example gives {energy} mJ"))?;
    let history = std::fs::read_to_string(out("run/history.csv")).unwrap();
    ensure(history.lines().count() == 61, || "history length".into())?;
    Ok(format!("{} subcommands, {checked} files byte-identical", commands.len()))
}

type Criterion = (&'static str, fn() -> Outcome, Duration);

fn main() {
    let criteria: [Criterion; 9] = [
        ("merge-oracle equivalence", criterion_1, Duration::from_secs(1)),
        ("parallel-kernel merge conformance", criterion_2, Duration::MAX),
        ("objective arithmetic", criterion_3, Duration::MAX),
        ("energy-saving arithmetic", criterion_4, Duration::MAX),
        ("candidate counts", criterion_5, Duration::MAX),
        ("supernet correctness", criterion_6, Duration::from_secs(120)),
        ("search optimality at toy scale", criterion_7, Duration::from_secs(60)),
        ("end-to-end comparison", criterion_8, Duration::from_secs(300)),
        ("determinism", criterion_9, Duration::MAX),
    ];
    let mut failures = 0;
    for (i, (name, check, limit)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let took = start.elapsed();
        let result = match result {
            Ok(detail) if took > limit => Err(format!("{detail}; took {took:.2?}, limit {limit:.0?}")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS {} {name}: {detail} ({took:.2?})", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL {} {name}: {why} ({took:.2?})", i + 1);
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
