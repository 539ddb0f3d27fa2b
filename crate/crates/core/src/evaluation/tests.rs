use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::{BackboneConfig, CnnConfig};
use crate::data::generate_dataset;
use crate::explainer::{ConstantMaps, RandomMaps};

/// Brute force: sort all (value, index) pairs and keep the first k.
fn phi_oracle(values: &[f64], v: f64) -> Vec<f64> {
    let k = (v * values.len() as f64 / 100.0).ceil() as usize;
    let mut pairs: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut out = vec![0.0; values.len()];
    for &(x, i) in pairs.iter().take(k) {
        out[i] = x;
    }
    out
}

/// Dense Gaussian elimination with partial pivoting on the 4-neighbour
/// mean conditions, written independently of the sparse solver.
fn dense_impute(plane: &[f64], remove: &[bool], h: usize, w: usize) -> Vec<f64> {
    let unknown: Vec<usize> = (0..h * w).filter(|&p| remove[p]).collect();
    let n = unknown.len();
    let mut a = vec![vec![0.0; n + 1]; n];
    for (row, &p) in unknown.iter().enumerate() {
        let (y, x) = ((p / w) as isize, (p % w) as isize);
        for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (ny, nx) = (y + dy, x + dx);
            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                continue;
            }
            let q = ny as usize * w + nx as usize;
            a[row][row] += 1.0;
            match unknown.iter().position(|&u| u == q) {
                Some(col) => a[row][col] -= 1.0,
                None => a[row][n] += plane[q],
            }
        }
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
        a.swap(col, piv);
        let pivot = a[col].clone();
        for (r, row) in a.iter_mut().enumerate() {
            if r != col {
                let f = row[col] / pivot[col];
                row.iter_mut().zip(&pivot).skip(col).for_each(|(x, p)| *x -= f * p);
            }
        }
    }
    let mut out = plane.to_vec();
    for (row, &p) in unknown.iter().enumerate() {
        out[p] = a[row][n] / a[row][row];
    }
    out
}

#[test]
fn threshold_examples() {
    let m = Tensor::new([2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    assert_eq!(threshold_phi_v(&m, 100.0).unwrap(), m);
    assert_eq!(threshold_phi_v(&m, 50.0).unwrap().data(), &[0.0, 0.0, 0.3, 0.4]);
    let flat = Tensor::full([2, 2], 0.7);
    assert_eq!(threshold_phi_v(&flat, 50.0).unwrap().data(), &[0.7, 0.7, 0.0, 0.0]);
    assert!(threshold_phi_v(&m, 0.0).is_err());
    assert!(threshold_phi_v(&m, 100.5).is_err());
}

#[test]
fn threshold_matches_sort_oracle_on_tied_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let levels = rng.random_range(1..5);
        let m = Tensor::from_fn(vec![h, w], |_| rng.random_range(0..levels) as f64 / 4.0);
        let v = rng.random_range(1..=100) as f64;
        assert_eq!(threshold_phi_v(&m, v).unwrap().data(), phi_oracle(m.data(), v).as_slice());
    }
}

#[test]
fn ad_ic_arithmetic() {
    let r = ad_ic_from(&[0.8], &[0.4]).unwrap();
    assert_eq!((r.ad, r.ic), (50.0, 0.0));
    let r = ad_ic_from(&[0.5, 0.2], &[0.5, 0.2]).unwrap();
    assert_eq!((r.ad, r.ic), (0.0, 0.0));
    let r = ad_ic_from(&[0.5, 0.0, 0.2], &[0.25, 0.3, 0.4]).unwrap();
    assert_eq!((r.ad, r.ic, r.excluded), (25.0, 50.0, 1));
    assert!(ad_ic_from(&[0.0], &[0.1]).is_err());
}

#[test]
fn single_hole_takes_the_neighbour_mean() {
    let mut img = Tensor::zeros([1, 3, 3]);
    for (p, v) in [(1, 0.2), (3, 0.4), (5, 0.6), (7, 0.8)] {
        img.data_mut()[p] = v;
    }
    let mut remove = vec![false; 9];
    remove[4] = true;
    let out = road_impute(&img, &remove, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!((out.data()[4] - 0.5).abs() < 1e-15);
}

#[test]
fn uniform_image_is_a_fixed_point() {
    let img = Tensor::full([3, 8, 8], 0.4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let remove: Vec<bool> = (0..64).map(|_| rng.random_bool(0.7)).collect();
    let out = road_impute(&img, &remove, 0.0, &mut rng).unwrap();
    assert_eq!(out, img);
}

#[test]
fn sparse_infill_matches_dense_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let img = Tensor::from_fn(vec![2, 6, 6], |_| rng.random::<f64>());
        let mut remove: Vec<bool> = (0..36).map(|_| rng.random_bool(0.6)).collect();
        remove[rng.random_range(0..36)] = false;
        let out = road_impute(&img, &remove, 0.0, &mut rng).unwrap();
        for c in 0..2 {
            let plane = &img.data()[c * 36..(c + 1) * 36];
            let want = dense_impute(plane, &remove, 6, 6);
            let got = &out.data()[c * 36..(c + 1) * 36];
            let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-8, "{err}");
        }
    }
}

#[test]
fn imputation_is_idempotent_and_keeps_known_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = Tensor::from_fn(vec![3, 12, 12], |_| rng.random::<f64>());
    let remove: Vec<bool> = (0..144).map(|i| (i / 12 + i % 12) % 3 != 0 && i % 7 != 0).collect();
    let once = road_impute(&img, &remove, 0.0, &mut rng).unwrap();
    let twice = road_impute(&once, &remove, 0.0, &mut rng).unwrap();
    assert!(once.max_abs_diff(&twice) < 1e-10);
    for c in 0..3 {
        for p in (0..144).filter(|&p| !remove[p]) {
            assert_eq!(once.data()[c * 144 + p], img.data()[c * 144 + p]);
        }
    }
    assert!(road_impute(&img, &[true; 144], 0.0, &mut rng).is_err());
}

#[test]
fn noise_only_touches_imputed_pixels() {
    let img = Tensor::full([1, 4, 4], 0.3);
    let remove: Vec<bool> = (0..16).map(|p| p % 2 == 0).collect();
    let out = road_impute(&img, &remove, 0.5, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    for (p, (v, removed)) in out.data().iter().zip(&remove).enumerate() {
        assert_eq!(*v != 0.3, *removed, "pixel {p}");
    }
}

fn small_setup() -> (Backbone, EvalSet) {
    let data = generate_dataset(5, 10, 4).unwrap();
    let mut b = Backbone::new(BackboneConfig::ToyCnn(CnnConfig::desk()), 4, 0).unwrap();
    b.freeze();
    let opts = EvalOptions { chunk: 3, workers: 1 };
    let set = EvalSet::new(&b, &data.test, &data.stats, &opts).unwrap();
    (b, set)
}

#[test]
fn all_ones_maps_leave_confidence_unchanged() {
    let (b, set) = small_setup();
    let ones = ConstantMaps { height: 7, width: 7, value: 1.0 };
    let opts = EvalOptions { chunk: 3, workers: 1 };
    let maps = explain_all(&ones, &b, &set, &opts).unwrap();
    let masked = masked_confidences(&b, &set, &maps, 100.0, &opts).unwrap();
    assert_eq!(masked, set.confidences);
    let r = ad_ic(&b, &set, &maps, 100.0, &opts).unwrap();
    assert_eq!((r.ad, r.ic), (0.0, 0.0));
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let (b, set) = small_setup();
    let random = RandomMaps { height: 7, width: 7, seed: 1 };
    let one = EvalOptions { chunk: 3, workers: 1 };
    let three = EvalOptions { chunk: 3, workers: 3 };
    let maps = explain_all(&random, &b, &set, &one).unwrap();
    assert_eq!(maps, explain_all(&random, &b, &set, &three).unwrap());
    let cfg = RoadConfig::default();
    let pct = [30.0, 70.0];
    assert_eq!(
        road_curves(&b, &set, &maps, &pct, &cfg, &one).unwrap(),
        road_curves(&b, &set, &maps, &pct, &cfg, &three).unwrap()
    );
    assert_eq!(ad_ic(&b, &set, &maps, 15.0, &one).unwrap(), ad_ic(&b, &set, &maps, 15.0, &three).unwrap());
}

#[test]
fn metric_rows_have_one_line_per_measure_and_threshold() {
    let r = AdIc { ad: 1.0, ic: 2.0, excluded: 0 };
    let rows = ad_ic_rows("toycnn", "ttame", &ADIC_THRESHOLDS.map(|v| (v, r.clone())));
    assert_eq!(rows.len(), 6);
    let mut buf = Vec::new();
    write_rows(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("backbone,explainer,measure,v,value\ntoycnn,ttame,AD,100.0,1.0\n"));
    let curves = RoadCurves { percentages: vec![10.0, 20.0], morf: vec![50.0, 30.0], lerf: vec![80.0, 70.0] };
    let (m, c) = road_rows("toyvit", "random", &curves);
    assert_eq!((m[0].value, m[1].value), (40.0, 75.0));
    assert_eq!(c.len(), 2);
}

proptest! {
    #[test]
    fn top_and_bottom_partition_the_pixels(values in prop::collection::vec(0u8..6, 1..80), v in 1u32..100) {
        let values: Vec<f64> = values.into_iter().map(f64::from).collect();
        let top = top_selection(&values, v as f64).unwrap();
        let bottom = bottom_selection(&values, (100 - v) as f64).unwrap();
        prop_assert!(top.iter().zip(&bottom).all(|(a, b)| a != b));
    }

    #[test]
    fn distinct_values_keep_exactly_the_rounded_up_count(n in 1usize..100, v in 1u32..=100, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Tensor::from_fn(vec![n], |i| i as f64 + rng.random::<f64>() * 0.5 + 0.1);
        let kept = threshold_phi_v(&m, v as f64).unwrap().data().iter().filter(|x| **x != 0.0).count();
        prop_assert_eq!(kept, (v as usize * n).div_ceil(100));
    }
}
