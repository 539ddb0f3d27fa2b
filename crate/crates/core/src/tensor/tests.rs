use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Checks every input of `build` against central differences. The op output
/// is contracted with a fixed random tensor so each output element carries a
/// distinct weight.
fn check(name: &str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.shape(out).to_vec()
    };
    let weights = random(&probe_shape, &mut rng);
    let scalar = |tape: &mut Tape, vars: &[Var]| {
        let out = build(tape, vars);
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w);
        tape.sum(prod)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = scalar(&mut tape, &vars);
    tape.backward(loss).unwrap();

    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).expect("gradient").clone();
        let numeric = numeric_grad(input, STEP, |probe| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, v)| t.constant(if j == k { probe.clone() } else { v.clone() }))
                .collect();
            let l = scalar(&mut t, &vs);
            t.value(l).item()
        });
        let err = max_rel_error(&analytic, &numeric, 1e-8);
        assert!(err < TOL, "{name}: input {k} relative error {err:e}");
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn grad_elementwise_and_broadcast() {
    let mut r = rng();
    let (a, b) = (random(&[3, 4], &mut r), random(&[3, 4], &mut r));
    check("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check("mul_bcast", vec![random(&[2, 3, 4], &mut r), random(&[2, 1, 4], &mut r)], |t, v| t.mul(v[0], v[1]));
    check("add_bcast", vec![random(&[1, 3, 4], &mut r), random(&[2, 3, 4], &mut r)], |t, v| t.add(v[0], v[1]));
    check("scale", vec![a.clone()], |t, v| t.scale(v[0], -2.5));
    check("add_scalar", vec![a.clone()], |t, v| t.add_scalar(v[0], 3.0));
    check("sigmoid", vec![a.clone()], |t, v| t.sigmoid(v[0]));
    check("gelu", vec![a.clone()], |t, v| t.gelu(v[0]));
    check("square", vec![a.clone()], |t, v| t.square(v[0]));
    // Keep inputs away from the kink at zero.
    let away = a.map(|x| if x.abs() < 0.05 { 0.3 } else { x });
    check("relu", vec![away], |t, v| t.relu(v[0]));
    let positive = a.map(|x| x.abs() + 0.1);
    check("pow", vec![positive], |t, v| t.pow(v[0], 0.3));
}

#[test]
fn grad_reductions_and_layout() {
    let mut r = rng();
    let a = random(&[3, 4], &mut r);
    check("sum", vec![a.clone()], |t, v| t.sum(v[0]));
    check("mean", vec![a.clone()], |t, v| t.mean(v[0]));
    check("reshape", vec![a.clone()], |t, v| t.reshape(v[0], &[2, 6]));
    check("permute", vec![random(&[2, 3, 4], &mut r)], |t, v| t.permute(v[0], &[2, 0, 1]));
    check("concat", vec![a.clone(), random(&[3, 2], &mut r)], |t, v| t.concat(&[v[0], v[1]], 1));
    check("slice", vec![a.clone()], |t, v| t.slice(v[0], 1, 1, 3));
    check("index_select", vec![a.clone()], |t, v| t.index_select(v[0], 1, &[3, 0, 3]));
}

#[test]
fn grad_conv_pool_resize() {
    let mut r = rng();
    check(
        "conv3x3",
        vec![random(&[2, 3, 5, 4], &mut r), random(&[4, 3, 3, 3], &mut r), random(&[4], &mut r)],
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    );
    check("conv1x1", vec![random(&[2, 3, 3, 4], &mut r), random(&[5, 3, 1, 1], &mut r)], |t, v| {
        t.conv2d(v[0], v[1], None, 1, 0)
    });
    check("conv_strided", vec![random(&[1, 2, 8, 8], &mut r), random(&[3, 2, 4, 4], &mut r)], |t, v| {
        t.conv2d(v[0], v[1], None, 4, 0)
    });
    // Distinct values keep the pooling argmax stable under perturbation.
    let pooled = Tensor::from_fn([1, 2, 4, 5], |i| ((i * 37) % 40) as f64 * 0.1);
    check("max_pool", vec![pooled], |t, v| t.max_pool2d(v[0]));
    check("resize_up", vec![random(&[2, 3, 4], &mut r)], |t, v| t.resize(v[0], 7, 5));
    check("resize_down", vec![random(&[1, 6, 6], &mut r)], |t, v| t.resize(v[0], 4, 3));
}

#[test]
fn grad_normalization_and_attention_ops() {
    let mut r = rng();
    let x = random(&[3, 2, 3, 4], &mut r);
    let (g, b) = (random(&[2], &mut r), random(&[2], &mut r));
    check("batch_norm_train", vec![x.clone(), g.clone(), b.clone()], |t, v| t.batch_norm_train(v[0], v[1], v[2]).0);
    check("batch_norm_eval", vec![x, g, b], |t, v| t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 1.5]));
    check("layer_norm", vec![random(&[3, 4], &mut r), random(&[4], &mut r), random(&[4], &mut r)], |t, v| {
        t.layer_norm(v[0], v[1], v[2])
    });
    check("linear", vec![random(&[2, 3, 4], &mut r), random(&[5, 4], &mut r), random(&[5], &mut r)], |t, v| {
        t.linear(v[0], v[1], Some(v[2]))
    });
    check("bmm", vec![random(&[2, 3, 4], &mut r), random(&[2, 4, 2], &mut r)], |t, v| t.bmm(v[0], v[1]));
    check("softmax", vec![random(&[3, 4], &mut r)], |t, v| t.softmax(v[0]));
    check("cross_entropy", vec![random(&[3, 4], &mut r)], |t, v| t.cross_entropy(v[0], &[1, 3, 0]));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new([2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
    let sq = tape.mul(x, x);
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let mut tape = Tape::new();
    let frozen = tape.constant(Tensor::ones([3]));
    let p = tape.param(Tensor::full([3], 2.0));
    let prod = tape.mul(frozen, p);
    let s = tape.sum(prod);
    tape.backward(s).unwrap();
    assert!(tape.grad(frozen).is_none());
    assert!(tape.grad(p).is_some());
}

#[test]
fn backward_rejects_non_scalar_and_detached() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::ones([2]));
    assert!(tape.backward(p).is_err());
    let c = tape.constant(Tensor::ones([2]));
    let s = tape.sum(c);
    assert!(tape.backward(s).is_err());
}

#[test]
fn clear_releases_nodes() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::ones([4]));
    tape.sum(p);
    assert_eq!(tape.len(), 2);
    tape.clear();
    assert!(tape.is_empty());
}

#[test]
fn resize_identity_constant_and_ramp() {
    let t = Tensor::from_fn([3, 8, 8], |i| (i as f64).sin());
    assert_eq!(bilinear_resize(&t, 8, 8).unwrap(), t);

    let c = Tensor::full([1, 2, 2], 5.0);
    let up = bilinear_resize(&c, 4, 4).unwrap();
    assert!(up.data().iter().all(|&v| v == 5.0));

    let row = Tensor::new([1, 1, 2], vec![1.0, 3.0]).unwrap();
    let out = bilinear_resize(&row, 1, 4).unwrap();
    let expected = [1.0, 5.0 / 3.0, 7.0 / 3.0, 3.0];
    for (a, b) in out.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
    assert!(bilinear_resize(&row, 0, 4).is_err());
}

#[test]
fn standardize_cases() {
    let t = Tensor::from_fn([3, 2, 2], |i| i as f64 * 0.1);
    assert_eq!(standardize(&t, &[0.0; 3], &[1.0; 3]).unwrap(), t);

    let px = Tensor::full([3, 1, 1], 0.485);
    let s = standardize(&px, &[0.485, 0.456, 0.406], &[0.229, 0.224, 0.225]).unwrap();
    assert_eq!(s.data()[0], 0.0);

    let zero = Tensor::zeros([2, 2, 2]);
    let (mu, sd) = ([0.3, 0.6], [0.2, 0.4]);
    let z = standardize(&zero, &mu, &sd).unwrap();
    assert!(z.data()[..4].iter().all(|&v| (v + 0.3 / 0.2).abs() < 1e-15));
    assert!(z.data()[4..].iter().all(|&v| (v + 0.6 / 0.4).abs() < 1e-15));

    // The value-level and taped versions agree bit for bit.
    let img = Tensor::from_fn([1, 3, 4, 4], |i| (i as f64 * 0.37).sin());
    let (m3, s3) = ([0.485, 0.456, 0.406], [0.229, 0.224, 0.225]);
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let y = tape.standardize(x, &m3, &s3);
    assert_eq!(tape.value(y), &standardize(&img, &m3, &s3).unwrap());

    assert!(standardize(&zero, &mu, &[0.2, 0.0]).is_err());
    assert!(standardize(&zero, &mu, &[0.2, -1.0]).is_err());
}

#[test]
fn minmax_cases() {
    let close = |t: Tensor, want: &[f64]| {
        for (a, b) in t.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    };
    close(minmax_normalize(&Tensor::new([3], vec![2.0, 4.0, 6.0]).unwrap()), &[0.0, 0.5, 1.0]);
    close(minmax_normalize(&Tensor::new([3], vec![-1.0, 0.0, 3.0]).unwrap()), &[0.0, 0.25, 1.0]);
    assert!(minmax_normalize(&Tensor::full([4], 3.3)).data().iter().all(|&v| v == 0.0));
}

mod props {
    use proptest::prelude::*;

    use super::super::*;

    proptest! {
        #[test]
        fn standardized_minmax_is_finite(values in proptest::collection::vec(-1e6f64..1e6, 12)) {
            let t = Tensor::new([3, 2, 2], values).unwrap();
            let m = minmax_normalize(&t);
            prop_assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let s = standardize(&m, &[0.5; 3], &[0.25; 3]).unwrap();
            prop_assert!(s.is_finite());
        }

        #[test]
        fn resize_preserves_constants(v in -10.0f64..10.0, h in 1usize..6, w in 1usize..6, th in 1usize..9, tw in 1usize..9) {
            let t = Tensor::full([2, h, w], v);
            let r = bilinear_resize(&t, th, tw).unwrap();
            prop_assert!(r.data().iter().all(|&x| x == v));
        }
    }
}
