use image::RgbImage;

use super::*;
use crate::dataset::{Label, MultiLabelMask};

fn tiny(head: HeadKind, classes: &[&str]) -> ArchitectureSpec {
    ArchitectureSpec {
        encoder_blocks: vec![EncoderBlock { convs: 1, channels: 4 }, EncoderBlock { convs: 1, channels: 6 }],
        input_size: (8, 8),
        in_channels: 3,
        classes: classes.iter().map(|s| s.to_string()).collect(),
        head,
        leaky_slope: DEFAULT_LEAKY_SLOPE,
        seed: 3,
    }
}

fn input<T: Real>(n: usize, h: usize, w: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape::new(n, 3, h, w);
    Tensor::from_vec(s, (0..s.len()).map(|_| T::from_f64_lossy(rng.random_range(-0.5..0.5))).collect()).unwrap()
}

fn random_mask(classes: &[String], h: usize, w: usize, seed: u64) -> MultiLabelMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planes = classes.iter().map(|_| (0..h * w).map(|_| rng.random_range(0..4u8)).collect()).collect();
    MultiLabelMask::from_planes(w, h, classes.to_vec(), planes).unwrap()
}

#[test]
fn every_head_keeps_input_resolution() {
    let heads = [
        HeadKind::baseline(),
        HeadKind::Multihead,
        HeadKind::Separable,
        HeadKind::compatibility(),
    ];
    for head in heads {
        let spec = ArchitectureSpec {
            input_size: (16, 16),
            ..ArchitectureSpec::toy(head.clone())
        };
        let (g, store) = Graph::build::<f32>(&spec).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(input(2, 16, 16, 1)).unwrap();
        let out = g.forward(&mut tape, &store, x, BnMode::Train).unwrap();
        match head {
            HeadKind::Baseline { .. } => {
                assert_eq!(tape.shape(out.joint.unwrap()), Shape::new(2, 12, 16, 16));
            }
            _ => {
                for stage in &out.stages {
                    assert_eq!(stage.len(), 11);
                    let all = tape.concat_channels(stage).unwrap();
                    assert_eq!(tape.shape(all), Shape::new(2, 44, 16, 16));
                }
            }
        }
    }
}

#[test]
fn indivisible_input_is_rejected() {
    let spec = ArchitectureSpec {
        input_size: (62, 64),
        ..ArchitectureSpec::toy(HeadKind::Multihead)
    };
    let err = Graph::build::<f32>(&spec).unwrap_err().to_string();
    assert!(err.contains("divisible"), "{err}");
    let bad = ArchitectureSpec {
        classes: vec![],
        ..ArchitectureSpec::toy(HeadKind::Multihead)
    };
    assert!(Graph::build::<f32>(&bad).is_err());
    assert!(Graph::build::<f32>(&ArchitectureSpec::toy(HeadKind::Compatibility { repeats: 0 })).is_err());
}

#[test]
fn separable_decoder_has_no_square_kernels() {
    let (g, _) = Graph::build::<f32>(&ArchitectureSpec::toy(HeadKind::Separable)).unwrap();
    let layers = g.describe();
    let dec: Vec<&LayerInfo> = layers
        .iter()
        .filter(|l| matches!(l.section, Section::Decoder | Section::Head))
        .collect();
    let mut triples = 0;
    for (i, l) in dec.iter().enumerate() {
        if let LayerKind::Conv { kh, kw, .. } = l.kind {
            assert_ne!((kh, kw), (3, 3), "{}", l.name);
            if (kh, kw) == (1, 9) {
                assert!(matches!(dec[i + 1].kind, LayerKind::BatchNorm { .. }));
                assert!(matches!(dec[i + 2].kind, LayerKind::Conv { kh: 9, kw: 1, .. }));
                triples += 1;
            } else {
                assert_eq!((kh, kw), (9, 1));
                assert!(matches!(dec[i - 2].kind, LayerKind::Conv { kh: 1, kw: 9, .. }));
            }
        }
    }
    // 4 decoder convs plus 11 heads
    assert_eq!(triples, 15);
}

#[test]
fn compatibility_block_counts() {
    let (g, store) = Graph::build::<f32>(&ArchitectureSpec::toy(HeadKind::compatibility())).unwrap();
    assert_eq!(g.loss_terms(), 33);
    let ids = g.compat_param_ids();
    assert_eq!(ids.len(), 22);
    let per_conv = 3 * 3 * 44 * 4 + 4;
    assert_eq!(per_conv, 1588);
    let total: usize = ids.iter().map(|&id| store.get(id).value.len()).sum();
    assert_eq!(total, 17_468);
    assert_eq!(g.compat_repeat_ids(0), g.compat_repeat_ids(1));
    for id in ids {
        assert!(store.get(id).share_id.as_deref().unwrap().starts_with("compat."));
    }
}

#[test]
fn compatibility_block_is_shape_closed() {
    for repeats in [1, 3] {
        let spec = tiny(HeadKind::Compatibility { repeats }, &["a", "b"]);
        let (g, store) = Graph::build::<f64>(&spec).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(input(1, 8, 8, 2)).unwrap();
        let out = g.forward(&mut tape, &store, x, BnMode::Train).unwrap();
        assert_eq!(out.stages.len(), repeats + 1);
        for s in &out.stages {
            for &v in s {
                assert_eq!(tape.shape(v), Shape::new(1, 4, 8, 8));
            }
        }
    }
}

fn loss_and_grads(g: &Graph, store: &mut ParamStore<f64>, x: &Tensor<f64>, mask: &MultiLabelMask) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone()).unwrap();
    let out = g.forward(&mut tape, store, xv, BnMode::Train).unwrap();
    let t = g.targets(&[mask]).unwrap();
    let loss = total_loss(&mut tape, g, &out, &t, &LossConfig::default()).unwrap();
    store.zero_grad();
    tape.backward(loss.total, store).unwrap();
    tape.value(loss.total).data()[0]
}

#[test]
fn shared_block_gradients_sum_over_repeats() {
    let spec = tiny(HeadKind::Compatibility { repeats: 2 }, &["a", "b"]);
    let (g, mut shared) = Graph::build::<f64>(&spec).unwrap();
    let (ug, mut unshared) = g.unshare(&shared);
    let x = input(1, 8, 8, 5);
    let mask = random_mask(&spec.classes, 8, 8, 6);
    let a = loss_and_grads(&g, &mut shared, &x, &mask);
    let b = loss_and_grads(&ug, &mut unshared, &x, &mask);
    assert!((a - b).abs() <= 1e-10 * a.abs());
    let r0 = ug.compat_repeat_ids(0);
    let r1 = ug.compat_repeat_ids(1);
    for (k, id) in g.compat_repeat_ids(0).into_iter().enumerate() {
        let gs = &shared.get(id).grad;
        let g0 = &unshared.get(r0[k]).grad;
        let g1 = &unshared.get(r1[k]).grad;
        for i in 0..gs.len() {
            let sum = g0.data()[i] + g1.data()[i];
            assert!((gs.data()[i] - sum).abs() <= 1e-10 * sum.abs().max(1e-12), "{}", shared.get(id).name);
        }
    }
}

#[test]
fn all_unknown_target_gives_zero_loss() {
    let spec = tiny(HeadKind::Separable, &["a", "b"]);
    let (g, store) = Graph::build::<f64>(&spec).unwrap();
    let mut mask = MultiLabelMask::new(8, 8, spec.classes.clone()).unwrap();
    for c in 0..2 {
        mask.plane_mut(c).fill(Label::Unk as u8);
    }
    let mut tape = Tape::new();
    let x = tape.input(input(1, 8, 8, 1)).unwrap();
    let out = g.forward(&mut tape, &store, x, BnMode::Train).unwrap();
    let loss = total_loss(&mut tape, &g, &out, &g.targets(&[&mask]).unwrap(), &LossConfig::default()).unwrap();
    assert_eq!(loss.terms.len(), 2);
    assert_eq!(tape.value(loss.total).data()[0], 0.0);
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let spec = tiny(HeadKind::Multihead, &["a", "b"]);
    let (g, _) = Graph::build::<f32>(&spec).unwrap();
    let mask = MultiLabelMask::new(8, 8, vec!["a".into(), "c".into()]).unwrap();
    let err = g.targets(&[&mask]).unwrap_err().to_string();
    assert!(err.contains("'b'"), "{err}");
}

#[test]
fn refinement_copies_by_name() {
    let mh = ArchitectureSpec::toy(HeadKind::Multihead);
    let (_, src) = Graph::build::<f32>(&mh).unwrap();
    let (_, mut same) = Graph::build::<f32>(&ArchitectureSpec { seed: 9, ..mh.clone() }).unwrap();
    let fresh = init_refinement(&mut same, &src, 1, REFINEMENT_SCALE).unwrap();
    assert!(fresh.is_empty());
    for (id, p) in same.iter() {
        assert_eq!(p.value, src.get(id).value);
    }

    let sep = ArchitectureSpec::toy(HeadKind::Separable);
    let (_, mut a) = Graph::build::<f32>(&sep).unwrap();
    let (_, mut b) = Graph::build::<f32>(&sep).unwrap();
    let fa = init_refinement(&mut a, &src, 4, REFINEMENT_SCALE).unwrap();
    init_refinement(&mut b, &src, 4, REFINEMENT_SCALE).unwrap();
    for ((_, pa), (_, pb)) in a.iter().zip(b.iter()) {
        assert_eq!(pa.value.data(), pb.value.data());
    }
    for (_, p) in a.iter() {
        if p.name.starts_with("enc") {
            assert_eq!(p.value, src.get(src.find(&p.name).unwrap()).value, "{}", p.name);
        }
        let is_sep = p.name.contains(".h.") || p.name.contains(".v.");
        if is_sep && p.name.ends_with(".weight") {
            assert!(fa.contains(&p.name));
            assert!(p.value.data().iter().all(|v| v.abs() <= 2.0 * REFINEMENT_SCALE as f32));
        }
    }
}

#[test]
fn refinement_rejects_shape_mismatch() {
    let (_, src) = Graph::build::<f32>(&tiny(HeadKind::Multihead, &["a"])).unwrap();
    let mut wider = tiny(HeadKind::Multihead, &["a"]);
    wider.encoder_blocks[0].channels = 5;
    let (_, mut dst) = Graph::build::<f32>(&wider).unwrap();
    let err = init_refinement(&mut dst, &src, 0, REFINEMENT_SCALE).unwrap_err().to_string();
    assert!(err.contains("enc0.conv0.weight"), "{err}");
}

#[test]
fn refinement_preserves_copied_features() {
    let base = tiny(HeadKind::baseline(), &["a"]);
    let base = ArchitectureSpec {
        head: HeadKind::Baseline {
            joint_labels: vec!["background".into(), "a".into()],
        },
        ..base
    };
    let (bg, bs) = Graph::build::<f64>(&base).unwrap();
    let (mg, mut ms) = Graph::build::<f64>(&tiny(HeadKind::Multihead, &["a"])).unwrap();
    init_refinement(&mut ms, &bs, 0, 0.0).unwrap();
    let x = input(1, 8, 8, 3);
    let feats = |g: &Graph, s: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let v = tape.input(x.clone()).unwrap();
        let out = g.forward(&mut tape, s, v, BnMode::Eval).unwrap();
        tape.value(out.features).clone()
    };
    assert_eq!(feats(&bg, &bs), feats(&mg, &ms));
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let spec = tiny(HeadKind::Separable, &["a", "b"]);
    let (g, mut store) = Graph::build::<f32>(&spec).unwrap();
    let before = store.snapshot();
    let data = TrainSet::new(
        vec![RgbImage::from_pixel(8, 8, image::Rgb([10, 200, 30])); 2],
        vec![random_mask(&spec.classes, 8, 8, 1), random_mask(&spec.classes, 8, 8, 2)],
    )
    .unwrap();
    let mut sched = TrainSchedule::single(0.0, 5, 1);
    sched.weight_decay = 0.0;
    sched.batch_size = 2;
    let report = train(&g, &mut store, &data, &sched, &LossConfig::default(), |_, _| Control::Continue).unwrap();
    assert_eq!(report.losses.len(), 5);
    for (v, p) in before.0.iter().zip(store.iter()) {
        assert_eq!(v, &p.1.value);
    }
}

#[test]
fn frozen_phase_keeps_base_bit_identical() {
    let spec = tiny(HeadKind::Compatibility { repeats: 2 }, &["a", "b"]);
    let (g, mut store) = Graph::build::<f32>(&spec).unwrap();
    let data = TrainSet::new(
        vec![RgbImage::from_fn(8, 8, |x, y| image::Rgb([(x * 30) as u8, (y * 30) as u8, 0])); 2],
        vec![random_mask(&spec.classes, 8, 8, 1), random_mask(&spec.classes, 8, 8, 2)],
    )
    .unwrap();
    let before = store.clone();
    let mut sched = TrainSchedule::compatibility(0.05, 4, 0.0, 0, 2);
    sched.batch_size = 2;
    train(&g, &mut store, &data, &sched, &LossConfig::default(), |_, _| Control::Continue).unwrap();
    let compat: HashSet<ParamId> = g.compat_param_ids().into_iter().collect();
    let mut changed = 0;
    for (id, p) in store.iter() {
        if compat.contains(&id) {
            changed += (p.value != before.get(id).value) as usize;
        } else {
            assert_eq!(p.value, before.get(id).value, "{}", p.name);
        }
    }
    assert!(changed > 0);
    assert_eq!(store.all_stats(), before.all_stats());
}

#[test]
fn training_is_deterministic_and_learns() {
    let spec = tiny(HeadKind::Multihead, &["a"]);
    let mask = |flip: bool| {
        let mut m = MultiLabelMask::new(8, 8, vec!["a".into()]).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let pos = (x < 4) ^ flip;
                m.set(0, x, y, if pos { Label::Pos } else { Label::Neg });
            }
        }
        m
    };
    let img = |flip: bool| RgbImage::from_fn(8, 8, |x, _| if (x < 4) ^ flip { image::Rgb([250, 250, 250]) } else { image::Rgb([5, 5, 5]) });
    let data = TrainSet::new(vec![img(false), img(true)], vec![mask(false), mask(true)]).unwrap();
    let run = || {
        let (g, mut store) = Graph::build::<f32>(&spec).unwrap();
        let mut sched = TrainSchedule::single(0.1, 60, 7);
        sched.batch_size = 2;
        let r = train(&g, &mut store, &data, &sched, &LossConfig::default(), |_, _| Control::Continue).unwrap();
        (r, store)
    };
    let (r1, s1) = run();
    let (r2, s2) = run();
    assert_eq!(r1.losses, r2.losses);
    for ((_, a), (_, b)) in s1.iter().zip(s2.iter()) {
        assert_eq!(a.value, b.value);
    }
    let head: f64 = r1.losses[..10].iter().sum();
    let tail: f64 = r1.losses[50..].iter().sum();
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

#[test]
fn divergence_restores_snapshot() {
    let spec = tiny(HeadKind::Multihead, &["a"]);
    let (g, mut store) = Graph::build::<f32>(&spec).unwrap();
    let data = TrainSet::new(vec![RgbImage::new(8, 8)], vec![random_mask(&spec.classes, 8, 8, 3)]).unwrap();
    let before = store.snapshot();
    let mut sched = TrainSchedule::single(1e30, 10, 1);
    sched.batch_size = 2;
    let err = train(&g, &mut store, &data, &sched, &LossConfig::default(), |_, _| Control::Continue).unwrap_err();
    assert!(matches!(err, Error::Diverged { restored: 0, .. }), "{err}");
    for (v, (_, p)) in before.0.iter().zip(store.iter()) {
        assert_eq!(v, &p.value);
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.weights");
    let (g, store) = Graph::build::<f32>(&ArchitectureSpec::toy(HeadKind::compatibility())).unwrap();
    save_checkpoint(&path, &g, &store).unwrap();
    let (g2, s2) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(g2.spec(), g.spec());
    assert_eq!(s2.len(), store.len());
    for ((_, a), (_, b)) in s2.iter().zip(store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn spec_json_round_trip() {
    let spec = ArchitectureSpec::small(HeadKind::compatibility());
    let text = serde_json::to_string(&spec).unwrap();
    assert!(text.contains("\"kind\":\"compatibility\""));
    let back: ArchitectureSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, spec);
}
