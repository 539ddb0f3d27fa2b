use super::*;
use crate::data::generate_dataset;

fn input(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    Tensor::from_fn(vec![n, 3, 56, 56], |_| rng.random_range(-1.0..1.0))
}

fn feature_shapes(b: &Backbone) -> Vec<Vec<usize>> {
    let (_, feats) = b.forward_with_features(&input(1, 3).reshape(vec![3, 56, 56]).unwrap()).unwrap();
    feats.maps.iter().map(|m| m.shape().to_vec()).collect()
}

#[test]
fn toycnn_taps_follow_the_last_three_pools() {
    let b = Backbone::new(BackboneConfig::ToyCnn(CnnConfig::default()), 8, 0).unwrap();
    assert_eq!(feature_shapes(&b), vec![vec![64, 14, 14], vec![128, 7, 7], vec![256, 3, 3]]);
    assert_eq!(b.feature_layers(), ["pool1", "pool2", "pool3"]);
    let desk = Backbone::new(BackboneConfig::ToyCnn(CnnConfig::desk()), 8, 0).unwrap();
    let expected: Vec<Vec<usize>> = CnnConfig::desk().tap_shapes().iter().map(|s| s.to_vec()).collect();
    assert_eq!(feature_shapes(&desk), expected);
}

#[test]
fn toyvit_taps_are_token_matrices() {
    let b = Backbone::new(BackboneConfig::ToyVit(VitConfig::default()), 8, 0).unwrap();
    assert_eq!(feature_shapes(&b), vec![vec![50, 64]; 3]);
    assert_eq!(b.feature_kind(), FeatureKind::Vit);
}

#[test]
fn rejects_bad_configs_and_inputs() {
    let bad_tap = CnnConfig { taps: vec!["pool3".into(), "pool1".into()], ..CnnConfig::default() };
    assert!(Backbone::new(BackboneConfig::ToyCnn(bad_tap), 8, 0).is_err());
    let bad_patch = VitConfig { patch: 5, ..VitConfig::default() };
    assert!(Backbone::new(BackboneConfig::ToyVit(bad_patch), 8, 0).is_err());
    let b = Backbone::new(BackboneConfig::ToyCnn(CnnConfig::desk()), 8, 0).unwrap();
    assert!(matches!(b.predict(&Tensor::zeros([1, 3, 64, 64])), Err(Error::Shape(_))));
}

#[test]
fn predictions_are_normalized() {
    for cfg in [BackboneConfig::ToyCnn(CnnConfig::desk()), BackboneConfig::ToyVit(VitConfig::default())] {
        let b = Backbone::new(cfg, 5, 2).unwrap();
        for p in b.predict(&input(3, 9)).unwrap() {
            assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(p.class, Tensor::new([5], p.logits.clone()).unwrap().argmax());
            assert_eq!(p.confidence, p.probabilities[p.class]);
        }
    }
}

#[test]
fn forward_is_pure_and_counts_passes() {
    let b = Backbone::new(BackboneConfig::ToyVit(VitConfig::default()), 4, 1).unwrap();
    let x = input(2, 4);
    let before = b.params().fingerprint();
    let a = b.predict(&x).unwrap();
    let c = b.predict(&x).unwrap();
    assert_eq!(a, c);
    assert_eq!(b.params().fingerprint(), before);
    assert_eq!(b.forward_passes(), 4);
    b.reset_forward_passes();
    assert_eq!(b.forward_passes(), 0);
}

#[test]
fn frozen_backbone_gets_no_gradients() {
    let mut b = Backbone::new(BackboneConfig::ToyCnn(CnnConfig::desk()), 4, 1).unwrap();
    b.freeze();
    assert!(b.params_mut().is_err());
    let mut tape = Tape::new();
    let x = tape.leaf(input(1, 5), true);
    assert!(b.forward(&mut tape, x, true).is_err());
    let out = b.forward(&mut tape, x, false).unwrap();
    let loss = tape.cross_entropy(out.logits, &[0]);
    tape.backward(loss).unwrap();
    assert!(out.bound.iter().all(|(_, v)| tape.grad(v).is_none()));
    assert!(tape.grad(x).is_some());
}

#[test]
fn parameter_file_round_trip() {
    let b = Backbone::new(BackboneConfig::ToyVit(VitConfig::default()), 6, 7).unwrap();
    let mut buf = Vec::new();
    b.write_to(&mut buf).unwrap();
    let back = Backbone::read_from(buf.as_slice()).unwrap();
    assert!(back.is_frozen());
    assert_eq!(back.config(), b.config());
    assert_eq!(back.params().fingerprint(), b.params().fingerprint());
    let x = input(1, 1);
    assert_eq!(back.predict(&x).unwrap(), b.predict(&x).unwrap());
}

#[test]
fn randomizing_a_layer_touches_only_that_group() {
    let b = Backbone::new(BackboneConfig::ToyCnn(CnnConfig::desk()), 4, 1).unwrap();
    let groups = b.layer_groups();
    let r = b.with_layer_randomized(groups.len() - 1, 99).unwrap();
    let group = &groups.last().unwrap().1;
    for (name, t) in b.params().iter() {
        if group.iter().any(|n| n == name) {
            // Biases start at zero, so only weights are guaranteed to move.
            if name.ends_with("weight") {
                assert_ne!(r.params().get(name), t, "{name}");
            }
        } else {
            assert_eq!(r.params().get(name), t, "{name}");
        }
    }
}

#[test]
fn short_pretraining_learns_something_and_freezes() {
    let data = generate_dataset(3, 12, 4).unwrap();
    let mut b = Backbone::new(BackboneConfig::ToyCnn(CnnConfig::desk()), 4, 0).unwrap();
    let cfg = PretrainConfig { epochs: 3, batch_size: 8, ..PretrainConfig::default() };
    let reports = pretrain_backbone(&mut b, &data, &cfg, |_| true).unwrap();
    assert_eq!(reports.len(), 3);
    assert!(reports[2].loss < reports[0].loss);
    assert!(b.is_frozen());
    assert!(pretrain_backbone(&mut b, &data, &cfg, |_| true).is_err());
}
