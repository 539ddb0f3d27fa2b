//! Reference explainers: gradient-weighted class activation maps and
//! randomized input sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::adapt;
use crate::backbone::Backbone;
use crate::data::ChannelStats;
use crate::error::{invalid, Error, Result};
use crate::explainer::{ExplainBatch, Explainer};
use crate::tensor::{bilinear_resize, minmax_normalize, standardize, Tape, Tensor};

/// Class activation map from a `[C,H,W]` feature map and the gradient of a
/// class score with respect to it: `minmax(ReLU(Σ_k w_k·A_k))` with `w_k`
/// the spatial mean of channel `k`'s gradient.
pub fn grad_cam_from(a: &Tensor, grad: &Tensor) -> Result<Tensor> {
    if a.ndim() != 3 || a.shape() != grad.shape() {
        return Err(Error::Shape(format!("activation {:?} vs gradient {:?}", a.shape(), grad.shape())));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut cam = vec![0.0; h * w];
    for k in 0..c {
        let g = &grad.data()[k * h * w..(k + 1) * h * w];
        let weight = g.iter().sum::<f64>() / (h * w) as f64;
        let plane = &a.data()[k * h * w..(k + 1) * h * w];
        cam.iter_mut().zip(plane).for_each(|(m, v)| *m += weight * v);
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(minmax_normalize(&Tensor::new([h, w], cam)?))
}

/// Grad-CAM at one of the backbone's taps, upsampled to input resolution.
pub struct GradCam {
    /// Index into the backbone's taps; `None` picks the deepest.
    pub layer: Option<usize>,
}

impl GradCam {
    /// Maps for a standardized `[N,3,H,W]` batch.
    pub fn maps(&self, backbone: &Backbone, x: &Tensor, classes: &[usize]) -> Result<Vec<Tensor>> {
        let taps = backbone.feature_layers().len();
        let layer = self.layer.unwrap_or(taps - 1);
        if layer >= taps {
            return Err(invalid(format!("tap {layer} out of range for {taps} taps")));
        }
        let n = x.shape()[0];
        if classes.len() != n {
            return Err(invalid("one class per image is required"));
        }
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone(), true);
        let out = backbone.forward(&mut tape, input, false)?;
        let k = tape.shape(out.logits)[1];
        if let Some(c) = classes.iter().find(|c| **c >= k) {
            return Err(invalid(format!("class {c} out of range for {k} classes")));
        }
        let flat = tape.reshape(out.logits, &[n * k]);
        let picked: Vec<usize> = classes.iter().enumerate().map(|(i, c)| i * k + c).collect();
        let scores = tape.index_select(flat, 0, &picked);
        let total = tape.sum(scores);
        tape.backward(total)?;
        let feat = out.features[layer];
        let grads = tape.grad(feat).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(feat).to_vec()));
        let values = tape.value(feat);
        let (h, w) = (x.shape()[2], x.shape()[3]);
        (0..n)
            .map(|i| {
                let a = adapt(&values.outer(i), backbone.feature_kind())?;
                let g = adapt(&grads.outer(i), backbone.feature_kind())?;
                bilinear_resize(&grad_cam_from(&a, &g)?, h, w)
            })
            .collect()
    }
}

impl Explainer for GradCam {
    fn name(&self) -> String {
        "gradcam".into()
    }

    fn explain(&self, backbone: &Backbone, batch: &ExplainBatch<'_>) -> Result<Vec<Tensor>> {
        self.maps(backbone, batch.standardized, batch.classes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiseConfig {
    /// Number of random masks, equal to the backbone forward passes spent.
    pub masks: usize,
    /// Cells per side of the coarse binary grid.
    pub grid: usize,
    /// Probability that a cell is kept.
    pub keep: f64,
    pub seed: u64,
    /// Masked images per backbone call.
    pub batch: usize,
}

impl Default for RiseConfig {
    fn default() -> Self {
        RiseConfig { masks: 500, grid: 7, keep: 0.5, seed: 0, batch: 50 }
    }
}

/// The smooth masks used by [`rise`]: `g×g` Bernoulli grids upsampled to
/// `(g+1)·cell` pixels and cropped at a random offset within one cell.
pub fn rise_masks(cfg: &RiseConfig, height: usize, width: usize) -> Result<Vec<Tensor>> {
    if cfg.grid == 0 || !(0.0..=1.0).contains(&cfg.keep) {
        return Err(invalid("RISE needs a non-empty grid and a keep probability in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (ch, cw) = (height.div_ceil(cfg.grid), width.div_ceil(cfg.grid));
    (0..cfg.masks)
        .map(|_| {
            let cells = Tensor::from_fn(vec![cfg.grid, cfg.grid], |_| (rng.random::<f64>() < cfg.keep) as u8 as f64);
            let up = bilinear_resize(&cells, (cfg.grid + 1) * ch, (cfg.grid + 1) * cw)?;
            let (dy, dx) = (rng.random_range(0..ch), rng.random_range(0..cw));
            let uw = up.shape()[1];
            Ok(Tensor::from_fn(vec![height, width], |i| up.data()[(i / width + dy) * uw + i % width + dx]))
        })
        .collect()
}

/// RISE saliency of `class` for a raw `[3,H,W]` image in `[0,1]`:
/// `minmax(Σ_m score(x⊙m)·m / (M·p))`.
pub fn rise(backbone: &Backbone, raw: &Tensor, class: usize, stats: &ChannelStats, cfg: &RiseConfig) -> Result<Tensor> {
    if cfg.masks == 0 || cfg.keep == 0.0 {
        return Err(invalid("RISE needs at least one mask and a non-zero keep probability"));
    }
    if raw.ndim() != 3 {
        return Err(Error::Shape(format!("expected a [C,H,W] image, got {:?}", raw.shape())));
    }
    let (h, w) = (raw.shape()[1], raw.shape()[2]);
    let masks = rise_masks(cfg, h, w)?;
    let mut saliency = vec![0.0; h * w];
    for chunk in masks.chunks(cfg.batch.max(1)) {
        let masked = chunk
            .iter()
            .map(|m| {
                let mut img = raw.clone();
                for plane in img.data_mut().chunks_exact_mut(h * w) {
                    plane.iter_mut().zip(m.data()).for_each(|(v, k)| *v *= k);
                }
                standardize(&img, &stats.mean, &stats.std)
            })
            .collect::<Result<Vec<_>>>()?;
        let preds = backbone.predict(&Tensor::stack(&masked)?)?;
        for (p, m) in preds.iter().zip(chunk) {
            let score = *p.probabilities.get(class).ok_or_else(|| invalid(format!("class {class} out of range")))?;
            saliency.iter_mut().zip(m.data()).for_each(|(s, v)| *s += score * v);
        }
    }
    let norm = cfg.masks as f64 * cfg.keep;
    saliency.iter_mut().for_each(|s| *s /= norm);
    Ok(minmax_normalize(&Tensor::new([h, w], saliency)?))
}

/// [`rise`] as an [`Explainer`].
pub struct Rise {
    pub config: RiseConfig,
    pub stats: ChannelStats,
}

impl Explainer for Rise {
    fn name(&self) -> String {
        "rise".into()
    }

    fn explain(&self, backbone: &Backbone, batch: &ExplainBatch<'_>) -> Result<Vec<Tensor>> {
        (0..batch.len())
            .map(|i| rise(backbone, &batch.raw.outer(i), batch.classes[i], &self.stats, &self.config))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, CnnConfig, VitConfig};

    fn stats() -> ChannelStats {
        ChannelStats { mean: vec![0.5; 3], std: vec![0.25; 3] }
    }

    fn raw(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![3, 56, 56], |_| rng.random::<f64>())
    }

    #[test]
    fn zero_gradients_give_a_zero_map() {
        let a = Tensor::from_fn(vec![2, 3, 3], |i| i as f64);
        let m = grad_cam_from(&a, &Tensor::zeros([2, 3, 3])).unwrap();
        assert!(m.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_channel_with_unit_weight_is_scaled_relu() {
        let a = Tensor::new([1, 2, 2], vec![-1.0, 0.5, 2.0, 1.0]).unwrap();
        let m = grad_cam_from(&a, &Tensor::ones([1, 2, 2])).unwrap();
        let want = minmax_normalize(&Tensor::new([2, 2], vec![0.0, 0.5, 2.0, 1.0]).unwrap());
        assert_eq!(m, want);
    }

    #[test]
    fn two_channel_hand_case() {
        // Channel weights: mean gradient 1.0 and -0.5.
        let a = Tensor::new([2, 1, 2], vec![1.0, 3.0, 2.0, 0.0]).unwrap();
        let g = Tensor::new([2, 1, 2], vec![0.5, 1.5, -1.0, 0.0]).unwrap();
        // 1·[1,3] − 0.5·[2,0] = [0, 3] → [0, 1].
        let m = grad_cam_from(&a, &g).unwrap();
        assert!((m.data()[0]).abs() < 1e-12 && (m.data()[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn grad_cam_maps_cover_the_input() {
        for cfg in [BackboneConfig::ToyCnn(CnnConfig::desk()), BackboneConfig::ToyVit(VitConfig::default())] {
            let mut b = Backbone::new(cfg, 4, 0).unwrap();
            b.freeze();
            let x = standardize(&raw(1), &[0.5; 3], &[0.25; 3]).unwrap().reshape(vec![1, 3, 56, 56]).unwrap();
            let maps = GradCam { layer: None }.maps(&b, &x, &[2]).unwrap();
            assert_eq!(maps[0].shape(), &[56, 56]);
            assert!(maps[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(b.forward_passes(), 1);
        }
    }

    #[test]
    fn rise_counts_one_pass_per_mask_and_is_seeded() {
        let mut b = Backbone::new(BackboneConfig::ToyCnn(CnnConfig::desk()), 4, 0).unwrap();
        b.freeze();
        let cfg = RiseConfig { masks: 12, batch: 5, ..Default::default() };
        let a = rise(&b, &raw(2), 1, &stats(), &cfg).unwrap();
        assert_eq!(b.forward_passes(), 12);
        let again = rise(&b, &raw(2), 1, &stats(), &cfg).unwrap();
        assert_eq!(a, again);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(rise(&b, &raw(2), 1, &stats(), &RiseConfig { masks: 0, ..cfg.clone() }).is_err());
        assert!(rise(&b, &raw(2), 1, &stats(), &RiseConfig { keep: 0.0, ..cfg }).is_err());
    }

    #[test]
    fn constant_scores_leave_only_the_mask_density() {
        let mut b = Backbone::new(BackboneConfig::ToyCnn(CnnConfig::desk()), 4, 0).unwrap();
        let w = b.params().get("fc2.weight").shape().to_vec();
        b.params_mut().unwrap().insert("fc2.weight", Tensor::zeros(w));
        b.freeze();
        let cfg = RiseConfig { masks: 20, seed: 3, ..Default::default() };
        let map = rise(&b, &raw(3), 0, &stats(), &cfg).unwrap();
        let masks = rise_masks(&cfg, 56, 56).unwrap();
        let mut density = Tensor::zeros([56, 56]);
        for m in &masks {
            density = density.zip_map(m, |a, b| a + b);
        }
        // Every class scores 1/4, so the map is the scaled mask density.
        let expected = minmax_normalize(&density.map(|v| v * 0.25 / (20.0 * 0.5)));
        assert!(map.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn all_ones_mask_gives_a_degenerate_map() {
        let mut b = Backbone::new(BackboneConfig::ToyCnn(CnnConfig::desk()), 4, 0).unwrap();
        b.freeze();
        let cfg = RiseConfig { masks: 1, keep: 1.0, ..Default::default() };
        let map = rise(&b, &raw(4), 0, &stats(), &cfg).unwrap();
        assert!(map.data().iter().all(|v| *v == 0.0));
    }
}
