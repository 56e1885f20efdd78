mod common;

use std::collections::BTreeMap;

use kenas::data::{split, synth_dataset, SplitSpec, SynthKind};
use kenas::space::{ArchitectureSpec, ChoiceRange, Family, SpaceDef};
use kenas::supernet::{Supernet, TrainConfig};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mlp_spec(dims: &[f64]) -> ArchitectureSpec {
    ArchitectureSpec {
        family: Family::Mlp,
        depth: dims.len(),
        global_choices: BTreeMap::new(),
        block_choices: dims.iter().map(|&d| BTreeMap::from([("hidden_dim".to_string(), d)])).collect(),
    }
}

fn resnet_spec(backbone: f64, dims: &[f64]) -> ArchitectureSpec {
    ArchitectureSpec {
        global_choices: BTreeMap::from([("backbone_dim".to_string(), backbone)]),
        family: Family::ResNet,
        ..mlp_spec(dims)
    }
}

fn small_space(family: Family, input: u64) -> SpaceDef {
    let mut s = SpaceDef::builtin(family, input, 1);
    s.depth = ChoiceRange::stepped(1.0, 3.0, 1.0).unwrap();
    s.per_block_choices.insert("hidden_dim".into(), ChoiceRange::stepped(16.0, 64.0, 16.0).unwrap());
    if family == Family::ResNet {
        s.global_choices.insert("backbone_dim".into(), ChoiceRange::stepped(16.0, 32.0, 16.0).unwrap());
    }
    s
}

fn batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

#[test]
fn training_one_spec_moves_a_narrower_one() {
    let space = small_space(Family::Mlp, 4);
    let ds = synth_dataset(SynthKind::Linear, 60, 4, 0.0, 1).unwrap();
    let rows: Vec<usize> = (0..60).collect();
    let mut net = Supernet::new(&space, 2).unwrap();
    let (x, y) = ds.rows(&rows);
    let wide = mlp_spec(&[32.0]);
    let narrow = mlp_spec(&[16.0]);
    let untouched = mlp_spec(&[48.0]);
    let before = net.subnet_forward(&narrow, x.view()).unwrap();
    let rows48 = net.layers()[0].weight.slice(ndarray::s![32..48, ..]).to_owned();
    for _ in 0..5 {
        let (_, g) = net.subnet_backward(&wide, x.view(), y.view()).unwrap();
        net.apply_sgd(&g, 0.01, 0.0);
    }
    let after = net.subnet_forward(&narrow, x.view()).unwrap();
    assert!(before.iter().zip(&after).any(|(a, b)| a != b));
    assert_eq!(net.layers()[0].weight.slice(ndarray::s![32..48, ..]), rows48);
    assert!(net.slices_for(&untouched).unwrap()[0].1 > 32);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shared_prefix_gives_identical_activations(seed in any::<u64>(), resnet in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let family = if resnet { Family::ResNet } else { Family::Mlp };
        let space = small_space(family, 5);
        let net = Supernet::new(&space, seed).unwrap();
        let pick = |rng: &mut ChaCha8Rng| [16.0, 32.0, 48.0, 64.0][rng.random_range(0..4)];
        let dims = [pick(&mut rng), pick(&mut rng), pick(&mut rng)];
        let (two, three) = if resnet {
            (resnet_spec(32.0, &dims[..2]), resnet_spec(32.0, &dims))
        } else {
            (mlp_spec(&dims[..2]), mlp_spec(&dims))
        };
        let x = batch(&mut rng, 7, 5);
        let a = net.block_activations(&two, x.view()).unwrap();
        let b = net.block_activations(&three, x.view()).unwrap();
        prop_assert_eq!(b.len(), a.len() + 1);
        for (p, q) in a.iter().zip(&b) {
            prop_assert!(p.iter().zip(q).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn forward_matches_reference(seed in any::<u64>(), resnet in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let family = if resnet { Family::ResNet } else { Family::Mlp };
        let space = SpaceDef::builtin(family, 6, 1);
        let net = Supernet::new(&space, seed).unwrap();
        let spec = space.sample_uniform(&mut rng);
        let x = batch(&mut rng, 4, 6);
        let got = net.subnet_forward(&spec, x.view()).unwrap();
        let want = common::reference_forward(&net, &spec, &x);
        let scale = want.iter().fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()));
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn gradients_vanish_outside_the_slice(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = small_space(Family::ResNet, 3);
        let net = Supernet::new(&space, seed).unwrap();
        let spec = space.sample_uniform(&mut rng);
        let x = batch(&mut rng, 5, 3);
        let y = ndarray::Array1::from_shape_simple_fn(5, || rng.random_range(-1.0..1.0));
        let (_, grad) = net.subnet_backward(&spec, x.view(), y.view()).unwrap();
        let dense = grad.dense(&net);
        let slices = net.slices_for(&spec).unwrap();
        for (l, layer) in dense.iter().enumerate() {
            let (o, i) = slices.iter().find(|s| s.0 == l).map(|s| (s.1, s.2)).unwrap_or((0, 0));
            for ((r, c), v) in layer.weight.indexed_iter() {
                if r >= o || c >= i {
                    prop_assert_eq!(*v, 0.0);
                }
            }
            prop_assert!(layer.bias.iter().skip(o).all(|&v| v == 0.0));
        }
    }
}

#[test]
fn finite_differences_on_small_subnets() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (family, spec) in [
        (Family::Mlp, mlp_spec(&[4.0, 4.0])),
        (Family::ResNet, resnet_spec(16.0, &[16.0, 32.0])),
    ] {
        let space = small_space(family, 3);
        let mut net = Supernet::new(&space, 5).unwrap();
        for layer in net.layers_mut() {
            layer.bias.mapv_inplace(|_| rng.random_range(0.1..0.5));
        }
        let x = batch(&mut rng, 9, 3);
        let y = ndarray::Array1::from_shape_simple_fn(9, || rng.random_range(-1.0..1.0));
        let gap = common::finite_difference_gap(&net, &spec, &x, &y, 1e-5);
        assert!(gap < 1e-6, "{family}: {gap:e}");
    }
}

#[test]
fn converges_on_noiseless_linear_data() {
    let space = small_space(Family::Mlp, 5);
    let ds = synth_dataset(SynthKind::Linear, 400, 5, 0.0, 12).unwrap();
    let rows: Vec<usize> = (0..ds.len()).collect();
    let mut net = Supernet::new(&space, 12).unwrap();
    let report = net.train(&ds, &rows, &TrainConfig::default()).unwrap();
    let means = report.epoch_means();
    assert!(
        means.last().unwrap() < &(0.1 * means[0]),
        "first epoch {} last epoch {}",
        means[0],
        means.last().unwrap()
    );
}

#[test]
fn resnet_training_is_reproducible() {
    let space = small_space(Family::ResNet, 6);
    let ds = synth_dataset(SynthKind::FriedmanLike, 150, 6, 0.1, 3).unwrap();
    let sp = split(ds.len(), &SplitSpec::with_seed(3)).unwrap();
    let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
    let run = || {
        let mut net = Supernet::new(&space, 8).unwrap();
        let r = net.train(&ds, &sp.train, &cfg).unwrap();
        (net, r)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), rb.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let mut ca = Vec::new();
    let mut cb = Vec::new();
    a.write_checkpoint(&mut ca).unwrap();
    b.write_checkpoint(&mut cb).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn accuracy_is_r2_on_the_partition() {
    let space = small_space(Family::Mlp, 2);
    let ds = synth_dataset(SynthKind::Linear, 50, 2, 0.1, 6).unwrap();
    let net = Supernet::new(&space, 0).unwrap();
    let spec = mlp_spec(&[16.0]);
    let rows: Vec<usize> = (0..25).collect();
    let (x, y) = ds.rows(&rows);
    let pred = net.subnet_forward(&spec, x.view()).unwrap();
    let want = kenas::data::r2_score(pred.view(), y.view()).unwrap();
    assert_eq!(net.evaluate_accuracy(&spec, &ds, &rows).unwrap(), want);
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let net = Supernet::new(&small_space(Family::ResNet, 4), 21).unwrap();
    net.save(&path).unwrap();
    let back = Supernet::load(&path).unwrap();
    assert_eq!(back.layers(), net.layers());
    assert_eq!(back.space(), net.space());
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.push(0);
    assert!(Supernet::read_checkpoint(bytes.as_slice()).is_err());
    assert!(Supernet::read_checkpoint(&bytes[..20]).is_err());
}
