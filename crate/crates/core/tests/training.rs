use cpsca_core::attention::ScaConfig;
use cpsca_core::baselines::{cpse_scores, l1_scores, slimming_scores};
use cpsca_core::checkpoint;
use cpsca_core::data::{write_synthetic, Augment, Dataset, DatasetName, Normalizer, Split, IMAGE_BYTES};
use cpsca_core::metrics::evaluate_accuracy;
use cpsca_core::model::{ArchSpec, AttentionKind, AttentionSite, Ctx, Layer, ModelGraph};
use cpsca_core::train::{evaluate, finetune, train, TrainConfig};
use cpsca_core::Error;

fn synthetic(train_per_class: usize, test_per_class: usize, seed: u64) -> Dataset {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic(DatasetName::Cifar10, dir.path(), train_per_class, test_per_class, seed).unwrap();
    Dataset::load(DatasetName::Cifar10, dir.path()).unwrap()
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, batch_size: 32, seed, eval_batch_size: 64, ..TrainConfig::default() }
}

fn resnet8(att: AttentionKind, seed: u64) -> ModelGraph {
    ArchSpec::resnet(8, 10, att).with_site(AttentionSite::BlockFirstConv).build(seed).unwrap()
}

#[test]
fn memorizes_a_small_subset() {
    let mut ds = synthetic(4, 1, 10);
    ds.train = ds.train.select(&(0..32).collect::<Vec<_>>());
    let mut m = resnet8(AttentionKind::None, 0);
    let cfg = TrainConfig { epochs: 200, augment: Augment::none(), eval_each_epoch: false, ..quick(200, 0) };
    let out = train(&mut m, &ds, &cfg, None).unwrap();
    let (_, acc) = evaluate(&mut m, &ds.train, &out.normalizer, 64).unwrap();
    assert_eq!(acc, 1.0);
}

#[test]
fn same_seed_is_bit_identical() {
    let ds = synthetic(6, 2, 11);
    let run = || {
        let mut m = resnet8(AttentionKind::Sca(ScaConfig::default()), 3);
        let mut log = Vec::new();
        let out = train(&mut m, &ds, &quick(2, 5), Some(&mut log)).unwrap();
        (out.first_epoch_loss.to_bits(), out.final_test_acc, m.named_tensors(), log)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    let text = String::from_utf8(a.3).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    for key in ["epoch", "split", "loss", "accuracy", "lr", "wall_time_s"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let ds = synthetic(4, 1, 12);
    let mut m = resnet8(AttentionKind::Sca(ScaConfig::default()), 1);
    let params = |m: &mut ModelGraph| {
        let mut out = Vec::new();
        m.visit_params(&mut |n, v, _| out.push((n.to_string(), v.to_vec())));
        out
    };
    let before = params(&mut m);
    let cfg = TrainConfig { lr: 0.0, ..quick(1, 0) };
    train(&mut m, &ds, &cfg, None).unwrap();
    assert_eq!(params(&mut m), before);
}

#[test]
fn one_step_moves_every_sca_parameter_field() {
    let ds = synthetic(4, 1, 13);
    for arrangement in cpsca_core::attention::Arrangement::ALL {
        if !(arrangement.has_spatial() && arrangement.has_channel()) {
            continue;
        }
        let cfg_sca = ScaConfig { arrangement, ..ScaConfig::default() };
        let mut m = resnet8(AttentionKind::Sca(cfg_sca), 2);
        let before: Vec<_> = m.named_tensors();
        let cfg = TrainConfig { weight_decay: 0.0, momentum: 0.0, batch_size: 40, ..quick(1, 0) };
        train(&mut m, &ds, &cfg, None).unwrap();
        let after = m.named_tensors();
        let mut dead = Vec::new();
        for ((name, x), (_, y)) in before.iter().zip(&after) {
            if name.contains("_att.") && x == y {
                dead.push(name.clone());
            }
        }
        assert!(dead.is_empty(), "{arrangement:?}: {dead:?}");
    }
}

#[test]
fn divergence_is_reported() {
    let ds = synthetic(4, 1, 14);
    let mut m = resnet8(AttentionKind::None, 0);
    let cfg = TrainConfig { lr: 1e30, ..quick(3, 0) };
    match train(&mut m, &ds, &cfg, None) {
        Err(Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.first_epoch_loss)),
    }
}

#[test]
fn zero_epoch_finetune_rejected() {
    let ds = synthetic(1, 1, 15);
    let mut m = resnet8(AttentionKind::None, 0);
    assert!(matches!(finetune(&mut m, &ds, &quick(0, 0), None), Err(Error::Config(_))));
}

#[test]
fn slimming_scores_match_checkpoint_blobs() {
    let ds = synthetic(4, 1, 16);
    let mut m = resnet8(AttentionKind::None, 4);
    train(&mut m, &ds, &quick(1, 0), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let man = checkpoint::save(dir.path(), &m, &checkpoint::Manifest::new("cifar10", 1, 0, "h")).unwrap();
    let (loaded, _) = checkpoint::load(dir.path()).unwrap();
    let t = slimming_scores(&loaded).unwrap();
    for l in &t.layers {
        let bn = l.id.replace("conv1", "bn1");
        let entry = man.tensors.iter().find(|e| e.name == format!("{bn}.gamma")).unwrap();
        let bytes = std::fs::read(dir.path().join(&entry.file)).unwrap();
        let raw: Vec<f64> =
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()).abs() as f64).collect();
        assert_eq!(l.scores, raw);
    }
}

#[test]
fn slimming_and_l1_examples() {
    let mut m = resnet8(AttentionKind::None, 0);
    if let Some(n) = m.find_mut("s1.b0.bn1") {
        if let Layer::BatchNorm(b) = &mut n.layer {
            b.gamma.data_mut()[..2].copy_from_slice(&[0.5, -0.7]);
        }
    }
    let t = slimming_scores(&m).unwrap();
    assert_eq!(t.layers[0].scores[..2], [0.5, 0.699999988079071]);
    let before = l1_scores(&m).unwrap();
    m.visit_params(&mut |n, v, _| {
        if n.ends_with("conv1.weight") {
            v.iter_mut().for_each(|x| *x *= 2.0);
        }
    });
    let after = l1_scores(&m).unwrap();
    for (a, b) in before.layers.iter().zip(&after.layers) {
        assert_eq!(a.order, b.order);
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }
}

fn constant_split(n: usize) -> Split {
    let mut s = Split::default();
    for i in 0..n {
        s.push(&[128u8; IMAGE_BYTES], i % 10);
    }
    s
}

#[test]
fn cpse_averages_gates() {
    let mut m = resnet8(AttentionKind::se(), 6);
    let norm = Normalizer::identity();
    let ds = synthetic(1, 1, 17);
    // one sample: the table is that sample's gates
    let one = ds.train.select(&[3]);
    let t1 = cpse_scores(&mut m, &one, &norm, 8).unwrap();
    let (x, _) = cpsca_core::data::make_batch(&one, &[0], &norm, Augment::none(), None);
    let mut gates = std::collections::BTreeMap::new();
    {
        let mut probe = |id: &str, g: &[f32], _c: usize| {
            gates.insert(id.to_string(), g.iter().map(|&v| v as f64).collect::<Vec<_>>());
        };
        m.forward(x, &mut Ctx::probing(&mut probe)).unwrap();
    }
    for l in &t1.layers {
        assert_eq!(l.scores, gates[&l.id]);
    }
    // constant data: the mean equals any single sample
    let t_many = cpse_scores(&mut m, &constant_split(7), &norm, 3).unwrap();
    let t_single = cpse_scores(&mut m, &constant_split(1), &norm, 3).unwrap();
    for (a, b) in t_many.layers.iter().zip(&t_single.layers) {
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    // scorer/model mismatch
    let mut sca = resnet8(AttentionKind::Sca(ScaConfig::default()), 0);
    assert!(matches!(cpse_scores(&mut sca, &one, &norm, 8), Err(Error::Scorer(_))));
}

#[test]
fn accuracy_examples() {
    let ds = synthetic(10, 10, 18);
    let norm = Normalizer::fit(&ds.train).unwrap();
    let mut m = resnet8(AttentionKind::None, 0);
    m.visit_params(&mut |n, v, _| {
        if n.starts_with("fc.") {
            v.fill(0.0);
        }
    });
    assert_eq!(evaluate_accuracy(&mut m, &ds.test, &norm, 16).unwrap(), 0.1);
    assert!(evaluate_accuracy(&mut m, &Split::default(), &norm, 16).is_err());

    let mut m = resnet8(AttentionKind::None, 9);
    train(&mut m, &ds, &quick(2, 0), None).unwrap();
    let batched = evaluate_accuracy(&mut m, &ds.test, &norm, 37).unwrap();
    let mut hits = 0;
    for i in 0..ds.test.len() {
        let (x, y) = cpsca_core::data::make_batch(&ds.test, &[i], &norm, Augment::none(), None);
        let logits = m.predict(x).unwrap();
        let d = logits.data();
        let best = (0..10).fold(0, |b, j| if d[j] > d[b] { j } else { b });
        hits += usize::from(best == y[0]);
    }
    assert_eq!(batched, hits as f64 / ds.test.len() as f64);

    // one correctly classified sample
    let i = (0..ds.test.len())
        .find(|&i| {
            let (x, y) = cpsca_core::data::make_batch(&ds.test, &[i], &norm, Augment::none(), None);
            let d = m.predict(x).unwrap();
            let best = (0..10).fold(0, |b, j| if d.data()[j] > d.data()[b] { j } else { b });
            best == y[0]
        })
        .expect("some sample is classified correctly");
    assert_eq!(evaluate_accuracy(&mut m, &ds.test.select(&[i]), &norm, 4).unwrap(), 1.0);
}
