use rand::Rng;

use super::*;
use crate::backbone::{BackboneConfig, CnnConfig, VitConfig};
use crate::tensor::bilinear_resize;

fn cnn() -> Backbone {
    let mut b = Backbone::new(BackboneConfig::ToyCnn(CnnConfig::default()), 8, 0).unwrap();
    b.freeze();
    b
}

fn desk() -> Backbone {
    let mut b = Backbone::new(BackboneConfig::ToyCnn(CnnConfig::desk()), 8, 0).unwrap();
    b.freeze();
    b
}

fn vit() -> Backbone {
    let mut b = Backbone::new(BackboneConfig::ToyVit(VitConfig::default()), 8, 0).unwrap();
    b.freeze();
    b
}

fn image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![3, 56, 56], |_| rng.random_range(-2.0..2.0))
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn explanation_shapes_follow_the_largest_tap() {
    let b = cnn();
    let att = Attention::new(&b, AttentionConfig::default(), 0).unwrap();
    assert_eq!(att.fusion_channels(), 448);
    assert_eq!(att.params().get("fusion.weight").shape(), &[8, 448, 1, 1]);
    let (_, e) = att.explain(&b, &image(1)).unwrap();
    assert_eq!(e.maps.shape(), &[8, 14, 14]);

    let v = vit();
    let att = Attention::new(&v, AttentionConfig::default(), 0).unwrap();
    let (_, e) = att.explain(&v, &image(1)).unwrap();
    assert_eq!(e.maps.shape(), &[8, 7, 7]);
}

#[test]
fn explain_runs_the_backbone_once() {
    let b = desk();
    let att = Attention::new(&b, AttentionConfig::default(), 0).unwrap();
    assert_eq!(b.forward_passes(), 0);
    let (p1, e1) = att.explain(&b, &image(2)).unwrap();
    assert_eq!(b.forward_passes(), 1);
    let (p2, e2) = att.explain(&b, &image(2)).unwrap();
    assert_eq!((p1, e1), (p2, e2));
}

fn branch_on(att: &Attention, i: usize, l: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, att.params(), false);
    let mut s = vec![1];
    s.extend_from_slice(l.shape());
    let x = tape.constant(l.clone().reshape(s).unwrap());
    let (y, _) = att.feature_branch(&mut tape, &bound, i, x, NormStats::Batch).unwrap();
    tape.value(y).outer(0)
}

#[test]
fn zero_conv_branch_collapses_to_resized_relu() {
    let b = cnn();
    let cfg = AttentionConfig { batch_norm: false, ..AttentionConfig::default() };
    let mut att = Attention::new(&b, cfg, 0).unwrap();
    let w = att.params().get("branch1.conv.weight").shape().to_vec();
    att.params_mut().insert("branch1.conv.weight", Tensor::zeros(w));
    let l = random(&[128, 7, 7], 3);
    let out = branch_on(&att, 1, &l);
    assert_eq!(out.shape(), &[128, 14, 14]);
    let expected = bilinear_resize(&l.map(|v| v.max(0.0)), 14, 14).unwrap();
    assert!(out.max_abs_diff(&expected) < 1e-15);

    let cfg = AttentionConfig { batch_norm: false, skip: false, ..AttentionConfig::default() };
    let mut att = Attention::new(&b, cfg, 0).unwrap();
    let w = att.params().get("branch0.conv.weight").shape().to_vec();
    att.params_mut().insert("branch0.conv.weight", Tensor::zeros(w));
    let out = branch_on(&att, 0, &random(&[64, 14, 14], 4));
    assert!(out.data().iter().all(|v| *v == 0.0));
}

#[test]
fn branch_rejects_wrong_channels() {
    let b = desk();
    let att = Attention::new(&b, AttentionConfig::default(), 0).unwrap();
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, att.params(), false);
    let x = tape.constant(Tensor::zeros([1, 5, 14, 14]));
    assert!(att.feature_branch(&mut tape, &bound, 0, x, NormStats::Batch).is_err());
}

#[test]
fn zero_fusion_gives_half_in_training_mode() {
    let b = desk();
    let mut att = Attention::new(&b, AttentionConfig::default(), 0).unwrap();
    let ws = att.params().get("fusion.weight").shape().to_vec();
    att.params_mut().insert("fusion.weight", Tensor::zeros(ws));
    att.params_mut().insert("fusion.bias", Tensor::zeros([8]));
    let mut tape = Tape::new();
    let x = tape.constant(random(&[2, 3, 56, 56], 5));
    let fwd = b.forward(&mut tape, x, false).unwrap();
    let out = att.forward(&mut tape, &fwd.features, NormStats::Batch, false).unwrap();
    let e = tape.sigmoid(out.logits);
    assert!(tape.value(e).data().iter().all(|v| *v == 0.5));
    // Constant maps are degenerate under min-max scaling.
    let (_, maps) = att.explain(&b, &image(6)).unwrap();
    assert!(maps.maps.data().iter().all(|v| *v == 0.0));
}

#[test]
fn inference_maps_span_the_unit_interval() {
    let raw = random(&[4, 5, 5], 7);
    let m = inference_maps(&raw);
    for n in 0..4 {
        let c = m.outer(n);
        assert_eq!(c.min(), 0.0);
        assert!((c.max() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn every_variant_is_constructible() {
    let b = desk();
    for v in Variant::ALL {
        let att = Attention::new(&b, v.config(), 1).unwrap();
        assert_eq!(att.branches().len(), v.config().layers);
        let (_, e) = att.explain(&b, &image(8)).unwrap();
        assert_eq!(e.num_classes(), 8);
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    let one = Attention::new(&b, Variant::OneLayer.config(), 1).unwrap();
    assert_eq!(one.branches()[0].layer, "pool3");
    assert!(Attention::new(&b, AttentionConfig { layers: 4, ..Default::default() }, 0).is_err());
}

#[test]
fn randomizing_a_stage_only_touches_it() {
    let b = desk();
    let att = Attention::new(&b, AttentionConfig::default(), 1).unwrap();
    assert_eq!(att.stages(), vec![Stage::Fusion, Stage::Branch(2), Stage::Branch(1), Stage::Branch(0)]);
    let r = att.randomized(Stage::Branch(1), 9).unwrap();
    for (name, t) in att.params().iter() {
        let same = r.params().get(name) == t;
        assert_eq!(same, !name.starts_with("branch1.conv"), "{name}");
    }
    assert!(att.randomized(Stage::Branch(3), 0).is_err());
}

#[test]
fn parameter_file_round_trip() {
    let b = vit();
    let mut att = Attention::new(&b, Variant::NoSkip.config(), 3).unwrap();
    att.update_running(&[
        BatchStats { mean: vec![0.5; 64], var: vec![2.0; 64] },
        BatchStats { mean: vec![0.1; 64], var: vec![3.0; 64] },
        BatchStats { mean: vec![0.2; 64], var: vec![4.0; 64] },
    ]);
    let mut buf = Vec::new();
    att.write_to(&mut buf).unwrap();
    let back = Attention::read_from(buf.as_slice()).unwrap();
    assert_eq!(back.params(), att.params());
    assert_eq!(back.running_stats(), att.running_stats());
    assert_eq!(back.config(), att.config());
    let x = image(4);
    assert_eq!(back.explain(&b, &x).unwrap(), att.explain(&b, &x).unwrap());
}

#[test]
fn running_stats_follow_momentum() {
    let b = desk();
    let mut att = Attention::new(&b, AttentionConfig::default(), 3).unwrap();
    let c = att.branches()[0].channels;
    let stats: Vec<BatchStats> =
        att.branches().iter().map(|s| BatchStats { mean: vec![1.0; s.channels], var: vec![3.0; s.channels] }).collect();
    att.update_running(&stats);
    let m = att.running_stats().get("branch0.bn.running_mean");
    let v = att.running_stats().get("branch0.bn.running_var");
    assert_eq!(m.data(), vec![0.1; c].as_slice());
    assert!(v.data().iter().all(|x| (x - 1.2).abs() < 1e-15));
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn maps_stay_in_unit_range(seed in any::<u64>(), scale in 0.01f64..50.0) {
            let b = desk();
            let att = Attention::new(&b, AttentionConfig::default(), seed).unwrap();
            let x = image(seed).map(|v| v * scale);
            let (_, e) = att.explain(&b, &x).unwrap();
            prop_assert!(e.maps.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let mut tape = Tape::new();
            let input = tape.constant(x.reshape(vec![1, 3, 56, 56]).unwrap());
            let fwd = b.forward(&mut tape, input, false).unwrap();
            let out = att.forward(&mut tape, &fwd.features, NormStats::Batch, false).unwrap();
            let s = tape.sigmoid(out.logits);
            prop_assert!(tape.value(s).data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
