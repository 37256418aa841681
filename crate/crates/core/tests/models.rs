mod common;

use r2gconv::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use r2gconv::data::{make_symmetry_breaking_set, orbit_logit_spread, LabeledImageSet, Provenance};
use r2gconv::layers::Mode;
use r2gconv::metrics::{
    equivariance_error, layer_suite, lipschitz_probe, model_tap, model_taps, prop1_check, prop2_check, Actions,
    ProbeSet, LAYER_SUITE,
};
use r2gconv::model::{canvas_for, Model, ModelSpec};
use r2gconv::record::Split;
use r2gconv::train::{evaluate, train_with, TrainConfig, TrainData, Trainer};
use r2gconv::{Error, Tensor};

const WIDTHS: [usize; 4] = [4, 8, 8, 8];

fn spec(mode: Mode, size: usize, classes: usize) -> ModelSpec {
    ModelSpec {
        input_size: size,
        canvas: canvas_for(size),
        ..ModelSpec::toy(&WIDTHS, mode, 0.1, classes)
    }
}

fn probes(size: usize, seed: u64) -> ProbeSet<f64> {
    ProbeSet::gaussian(6, &[1, 1, size, size], seed).unwrap()
}

fn ee(model: &Model<f64>, tap: &str, rep: r2gconv::group::Representation, p: &ProbeSet<f64>) -> f64 {
    let actions = Actions {
        input: r2gconv::group::Representation::Spatial,
        output: rep,
    };
    equivariance_error(model_tap(model, tap), p, actions).unwrap().ee
}

#[test]
fn strict_model_is_invariant_at_every_tap() {
    let m = Model::<f64>::build(&spec(Mode::Strict, 17, 5), 3).unwrap();
    let p = probes(17, 4);
    for (name, rep) in model_taps(&m).unwrap() {
        let e = ee(&m, &name, rep, &p);
        assert!(e <= 1e-9, "{name}: {e}");
    }
}

#[test]
fn ee_vanishes_at_zero_scale_at_every_tap() {
    let base = Model::<f64>::build(&spec(Mode::Relaxed, 17, 5), 5).unwrap();
    let p = probes(17, 6);
    for t in [0.0, 0.5] {
        let mut m = base.clone();
        m.scale_deltas(t);
        for (name, rep) in model_taps(&m).unwrap().into_iter().skip(1) {
            let e = ee(&m, &name, rep, &p);
            assert!(if t == 0.0 { e <= 1e-9 } else { e > 1e-6 }, "{name} at scale {t}: {e}");
        }
    }
}

#[test]
fn layer_ee_is_monotone_in_delta_scale() {
    for seed in 0..3 {
        let sweep: Vec<_> = [0.0, 0.25, 0.5, 1.0]
            .iter()
            .map(|&t| layer_suite::<f64>(Mode::Relaxed, 0.1, t, 4, seed).unwrap())
            .collect();
        for i in 0..LAYER_SUITE.len() {
            let col: Vec<f64> = sweep.iter().map(|r| r[i].1).collect();
            assert!(col[0] <= 1e-10, "{} {col:?}", LAYER_SUITE[i]);
            assert!(col.windows(2).all(|w| w[1] >= w[0] - 1e-6), "{} {col:?}", LAYER_SUITE[i]);
        }
    }
}

#[test]
fn propositions_hold_across_modes_and_perturbations() {
    let p = probes(17, 8);
    for mode in [Mode::Strict, Mode::Relaxed, Mode::Plain] {
        let m = Model::<f64>::build(&spec(mode, 17, 4), 9).unwrap();
        let phi = model_tap(&m, "head");
        let p1 = prop1_check(&phi, &p, Actions::INVARIANT).unwrap();
        assert!(p1.check.holds, "{mode}: {:?}", p1.check);
        let mut near = m.clone();
        for id in near.params.trainable_ids() {
            let v = near.params.get(id).map(|x| x * (1.0 + 1e-3));
            near.params.set(id, v).unwrap();
        }
        let p2 = prop2_check(&phi, model_tap(&near, "head"), &p, Actions::INVARIANT).unwrap();
        assert!(p2.check.holds, "{mode}: {:?}", p2.check);
        if mode == Mode::Relaxed {
            let mut strict = m.clone();
            strict.scale_deltas(0.0);
            let p2 = prop2_check(&phi, model_tap(&strict, "head"), &p, Actions::INVARIANT).unwrap();
            assert!(p2.check.holds && p2.ee_b <= 1e-9);
        }
    }
}

#[test]
fn lipschitz_estimate_is_stable_across_seeds() {
    let m = Model::<f64>::build(&spec(Mode::Relaxed, 17, 4), 2).unwrap();
    let p = ProbeSet::<f64>::gaussian(16, &[1, 1, 17, 17], 12).unwrap();
    let ks: Vec<f64> = (0..3)
        .map(|s| lipschitz_probe(model_tap(&m, "head"), &p, 64, s).unwrap())
        .collect();
    let (lo, hi) = ks.iter().fold((f64::MAX, 0.0f64), |(l, h), &k| (l.min(k), h.max(k)));
    assert!(lo > 0.0 && hi <= 1.25 * lo, "{ks:?}");
}

#[test]
fn strict_logits_cannot_separate_quadrants() {
    let m = Model::<f32>::build(&ModelSpec::toy(&WIDTHS, Mode::Strict, 0.0, 4), 1).unwrap();
    for scale in [0.0, 1.0] {
        let set = make_symmetry_breaking_set(16, scale, 3).unwrap();
        let spread = orbit_logit_spread(m.logits(&set.images).unwrap().data(), 4);
        assert!(spread <= 1e-4, "defect scale {scale}: {spread}");
    }
    let relaxed = Model::<f32>::build(&ModelSpec::toy(&WIDTHS, Mode::Relaxed, 0.1, 4), 1).unwrap();
    let set = make_symmetry_breaking_set(16, 1.0, 3).unwrap();
    assert!(orbit_logit_spread(relaxed.logits(&set.images).unwrap().data(), 4) > 1e-4);
}

fn tiny_set(n: usize, classes: usize, seed: u64) -> LabeledImageSet {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut images = Tensor::<f32>::uniform(&[n, 1, 12, 12], 0.0, 0.2, &mut rng);
    for (i, &l) in labels.iter().enumerate() {
        for r in 0..12 {
            images.data_mut()[i * 144 + r * 12 + 2 + 3 * l] += 0.8;
        }
    }
    LabeledImageSet::new(images, labels, Provenance::Synthetic).unwrap()
}

fn small_config(seed: u64, mode: Mode) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 16,
        learning_rate: 3e-3,
        mode,
        widths: WIDTHS.to_vec(),
        num_classes: 3,
        rotate_train: false,
        subset_train: None,
        subset_test: None,
        ee_probes: 0,
        ..TrainConfig::new(seed)
    }
}

#[test]
fn training_is_deterministic_step_by_step() {
    let cfg = small_config(21, Mode::Relaxed);
    let set = tiny_set(48, 3, 1);
    let mut a = Trainer::new(&cfg, 12).unwrap();
    let mut b = Trainer::new(&cfg, 12).unwrap();
    for step in 0..3 {
        let idx: Vec<usize> = (step * 16..(step + 1) * 16).collect();
        let (x, y) = set.batch(&idx).unwrap();
        let la = a.train_step(x.clone(), &y).unwrap();
        let lb = b.train_step(x, &y).unwrap();
        assert_eq!(la.0.to_bits(), lb.0.to_bits());
        assert_eq!(a.model.params, b.model.params);
    }
    assert_eq!(a.checkpoint().encode().unwrap(), b.checkpoint().encode().unwrap());
}

#[test]
fn loss_falls_below_chance() {
    let cfg = TrainConfig {
        epochs: 4,
        ..small_config(4, Mode::Strict)
    };
    let set = tiny_set(64, 3, 2);
    let data = TrainData::prepare(&cfg, &set, &set).unwrap();
    let mut records = Vec::new();
    train_with(&cfg, &data, |r| records.push(r.clone())).unwrap();
    let train: Vec<_> = records.iter().filter(|r| r.split == Split::Train).collect();
    assert!(train[0].loss < 1.2 * (3f64).ln());
    assert!(train.last().unwrap().loss < train[0].loss, "{train:?}");
}

#[test]
fn untrained_classifier_is_near_chance() {
    let mut m = Model::<f32>::build(&ModelSpec::toy(&WIDTHS, Mode::Relaxed, 0.1, 10), 0).unwrap();
    let head = m.params.entries().iter().position(|e| e.name.starts_with("head.")).unwrap();
    for e in m.params.ids().skip(head).collect::<Vec<_>>() {
        let z = Tensor::zeros(m.params.get(e).shape());
        m.params.set(e, z).unwrap();
    }
    let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
    let set = LabeledImageSet::new(Tensor::zeros(&[100, 1, 28, 28]), labels, Provenance::Test).unwrap();
    let eval = evaluate(&m, &set).unwrap();
    assert_eq!(eval.top1_error_percent, 90.0);
    assert!((eval.loss - (10f64).ln()).abs() < 1e-5);
}

#[test]
fn checkpoint_files_round_trip_and_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::<f32>::build(&ModelSpec::toy(&WIDTHS, Mode::Relaxed, 0.1, 3), 7).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &Checkpoint::from_model(&m, Default::default(), vec![])).unwrap();
    let (back, _) = load_checkpoint(&path).unwrap();
    let x = Tensor::<f32>::from_fn(&[2, 1, 28, 28], |i| ((i * 31) % 17) as f32 / 17.0);
    let (a, b) = (m.logits(&x).unwrap(), back.logits(&x).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));

    let bytes = std::fs::read(&path).unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, &bytes[..10]).unwrap();
    assert!(matches!(load_checkpoint(&bad), Err(Error::Truncated { .. })));
    let missing = dir.path().join("nope.ckpt");
    match load_checkpoint(&missing) {
        Err(e @ Error::Io(_)) => assert!(e.to_string().contains("nope.ckpt"), "{e}"),
        other => panic!("unexpected {other:?}"),
    }
}
