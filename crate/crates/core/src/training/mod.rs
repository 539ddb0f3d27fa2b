//! Training objective of the attention mechanism and its optimization loop.
//!
//! For each image the backbone's predicted class `y` (the model truth) picks
//! the map `E_y` that masks the input; the masked batch goes back through
//! the frozen backbone and its logits are scored with cross-entropy against
//! `y`. A modified total-variation term over `y`'s map and `B − 1` randomly
//! chosen other class maps keeps the maps small and smooth:
//!
//! ```text
//! loss = λ1·CE(logits, y) + λ2·(E(Ψ) + λ3·V(Ψ))
//! E(Ψ) = (1/S) Σ e^λ4
//! V(Ψ) = (1/2S) Σ (Δ_row e)² + (Δ_col e)²     forward differences inside each map
//! S    = number of entries in Ψ
//! ```

mod fit;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use fit::{fit, fit_with, ScheduleConfig, TrainLogRow, TrainingLog};

use crate::attention::{Attention, NormStats};
use crate::backbone::{predictions, Backbone, FeatureKind};
use crate::data::ChannelStats;
use crate::error::{invalid, Error, Result};
use crate::params::Bound;
use crate::tensor::{bilinear_resize, standardize, BatchStats, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda1: 1.5, lambda2: 2.0, lambda3: 0.005, lambda4: 0.3 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(invalid("loss weights must be finite and non-negative"));
        }
        if !(self.lambda4 > 0.0 && self.lambda4 <= 1.0) {
            return Err(invalid(format!("lambda4 must lie in (0, 1], got {}", self.lambda4)));
        }
        Ok(())
    }
}

/// Classes whose maps enter the regularizer for one image; `classes[0]` is
/// the model truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSelection {
    pub classes: Vec<usize>,
}

impl MaskSelection {
    pub fn truth(&self) -> usize {
        self.classes[0]
    }
}

/// `y` plus `b − 1` distinct other classes drawn uniformly.
pub fn select_masks(num_classes: usize, y: usize, b: usize, rng: &mut impl Rng) -> Result<MaskSelection> {
    if y >= num_classes {
        return Err(invalid(format!("class {y} out of range for {num_classes} classes")));
    }
    if b == 0 || b > num_classes {
        return Err(invalid(format!("cannot select {b} maps from {num_classes} classes")));
    }
    let mut classes = vec![y];
    classes.extend(sample(rng, num_classes - 1, b - 1).into_iter().map(|i| if i >= y { i + 1 } else { i }));
    Ok(MaskSelection { classes })
}

fn check_mask(e: &Tensor) -> Result<()> {
    if e.ndim() != 2 {
        return Err(Error::Shape(format!("mask must be [H,W], got {:?}", e.shape())));
    }
    Ok(())
}

/// Masks a raw `[3,H,W]` image in `[0,1]` with a `[h,w]` map.
///
/// The map is upsampled to the image size and broadcast over channels.
/// CNN kind standardizes the masked image; ViT kind masks the standardized
/// image.
pub fn mask_image(e: &Tensor, raw: &Tensor, kind: FeatureKind, stats: &ChannelStats) -> Result<Tensor> {
    check_mask(e)?;
    if raw.ndim() != 3 {
        return Err(Error::Shape(format!("image must be [C,H,W], got {:?}", raw.shape())));
    }
    let (h, w) = (raw.shape()[1], raw.shape()[2]);
    let up = bilinear_resize(e, h, w)?;
    let apply = |img: &Tensor| {
        let mut out = img.clone();
        for plane in out.data_mut().chunks_exact_mut(h * w) {
            plane.iter_mut().zip(up.data()).for_each(|(v, m)| *v *= m);
        }
        out
    };
    match kind {
        FeatureKind::Cnn => standardize(&apply(raw), &stats.mean, &stats.std),
        FeatureKind::Vit => Ok(apply(&standardize(raw, &stats.mean, &stats.std)?)),
    }
}

/// Taped [`mask_image`] over a batch: `masks` is `[N,h,w]`, `raw` is
/// `[N,3,H,W]`.
pub fn mask_batch(tape: &mut Tape, masks: Var, raw: &Tensor, kind: FeatureKind, stats: &ChannelStats) -> Result<Var> {
    let ms = tape.shape(masks).to_vec();
    let rs = raw.shape().to_vec();
    if ms.len() != 3 || rs.len() != 4 || ms[0] != rs[0] {
        return Err(Error::Shape(format!("masks {ms:?} do not match images {rs:?}")));
    }
    let m = tape.reshape(masks, &[ms[0], 1, ms[1], ms[2]]);
    let m = if (ms[1], ms[2]) == (rs[2], rs[3]) { m } else { tape.resize(m, rs[2], rs[3]) };
    Ok(match kind {
        FeatureKind::Cnn => {
            let img = tape.constant(raw.clone());
            let masked = tape.mul(m, img);
            tape.standardize(masked, &stats.mean, &stats.std)
        }
        FeatureKind::Vit => {
            let img = tape.constant(standardize(raw, &stats.mean, &stats.std)?);
            tape.mul(m, img)
        }
    })
}

/// `E(Ψ) + λ3·V(Ψ)` over maps stacked as `[.., H, W]`.
pub fn tv_modified(maps: &Tensor, lambda3: f64, lambda4: f64) -> Result<f64> {
    if maps.ndim() < 2 || maps.numel() == 0 {
        return Err(Error::Shape(format!("maps must be [.., H, W], got {:?}", maps.shape())));
    }
    if let Some(v) = maps.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(invalid(format!("map values must be non-negative, found {v}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(maps.clone(), true);
    let tv = tv_var(&mut tape, x, lambda3, lambda4);
    Ok(tape.value(tv).item())
}

/// Taped modified total variation; see [`tv_modified`].
pub fn tv_var(tape: &mut Tape, maps: Var, lambda3: f64, lambda4: f64) -> Var {
    let s = tape.shape(maps).to_vec();
    let r = s.len();
    let count = s.iter().product::<usize>() as f64;
    let powered = tape.pow(maps, lambda4);
    let area = tape.mean(powered);
    let mut variation = None;
    for axis in [r - 2, r - 1] {
        if s[axis] < 2 {
            continue;
        }
        let hi = tape.slice(maps, axis, 1, s[axis]);
        let lo = tape.slice(maps, axis, 0, s[axis] - 1);
        let d = tape.sub(hi, lo);
        let sq = tape.square(d);
        let total = tape.sum(sq);
        variation = Some(match variation {
            Some(v) => tape.add(v, total),
            None => total,
        });
    }
    match variation {
        Some(v) => {
            let v = tape.scale(v, lambda3 / (2.0 * count));
            tape.add(area, v)
        }
        None => area,
    }
}

/// Tape handles of the loss and its two terms.
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub tv: Var,
}

/// `λ1·CE(logits, y) + λ2·TV'(Ψ)` on a tape.
pub fn composite_loss(tape: &mut Tape, logits: Var, y: &[usize], psi: Var, cfg: &LossConfig) -> Result<LossTerms> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != y.len() {
        return Err(Error::Shape(format!("logits {s:?} for {} targets", y.len())));
    }
    if let Some(bad) = y.iter().find(|c| **c >= s[1]) {
        return Err(invalid(format!("target class {bad} out of range for {} classes", s[1])));
    }
    let ce = tape.cross_entropy(logits, y);
    let tv = tv_var(tape, psi, cfg.lambda3, cfg.lambda4);
    let a = tape.scale(ce, cfg.lambda1);
    let b = tape.scale(tv, cfg.lambda2);
    let total = tape.add(a, b);
    Ok(LossTerms { total, ce, tv })
}

/// Scalar [`composite_loss`] on plain values.
pub fn composite_loss_value(logits: &Tensor, y: &[usize], psi: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let p = tape.constant(psi.clone());
    let terms = composite_loss(&mut tape, l, y, p, cfg)?;
    Ok(tape.value(terms.total).item())
}

/// Everything one training batch puts on the tape.
pub struct BatchLoss {
    pub terms: LossTerms,
    pub bound: Bound,
    pub batch_stats: Vec<BatchStats>,
    /// Model truth of every image.
    pub truth: Vec<usize>,
}

/// How the masked image is formed during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskingRule {
    /// The rule that belongs to the backbone kind.
    #[default]
    Matched,
    /// The other kind's rule.
    Swapped,
}

impl MaskingRule {
    pub fn kind_for(self, backbone: FeatureKind) -> FeatureKind {
        match (self, backbone) {
            (MaskingRule::Matched, k) => k,
            (MaskingRule::Swapped, FeatureKind::Cnn) => FeatureKind::Vit,
            (MaskingRule::Swapped, FeatureKind::Vit) => FeatureKind::Cnn,
        }
    }
}

/// Builds the training loss of a raw `[N,3,56,56]` batch.
///
/// `select` receives each image's index and model truth and returns its
/// mask selection.
pub fn batch_loss(
    tape: &mut Tape,
    backbone: &Backbone,
    att: &Attention,
    raw: &Tensor,
    stats: &ChannelStats,
    cfg: &LossConfig,
    masking: MaskingRule,
    mut select: impl FnMut(usize, usize) -> Result<MaskSelection>,
) -> Result<BatchLoss> {
    if !backbone.is_frozen() {
        return Err(invalid("the backbone must be frozen before training the attention mechanism"));
    }
    let n = raw.shape()[0];
    let input = tape.constant(standardize(raw, &stats.mean, &stats.std)?);
    let fwd = backbone.forward(tape, input, false)?;
    let truth: Vec<usize> = predictions(tape.value(fwd.logits)).iter().map(|p| p.class).collect();
    let out = att.forward(tape, &fwd.features, NormStats::Batch, true)?;
    let maps = tape.sigmoid(out.logits);
    let s = tape.shape(maps).to_vec();
    let (k, h, w) = (s[1], s[2], s[3]);
    let flat = tape.reshape(maps, &[n * k, h, w]);
    let mut psi_rows = Vec::new();
    for (i, &y) in truth.iter().enumerate() {
        let sel = select(i, y)?;
        if sel.truth() != y {
            return Err(invalid("mask selection must start with the model truth"));
        }
        psi_rows.extend(sel.classes.iter().map(|c| i * k + c));
    }
    let psi = tape.index_select(flat, 0, &psi_rows);
    let truth_rows: Vec<usize> = truth.iter().enumerate().map(|(i, y)| i * k + y).collect();
    let e_y = tape.index_select(flat, 0, &truth_rows);
    let masked = mask_batch(tape, e_y, raw, masking.kind_for(backbone.feature_kind()), stats)?;
    let masked_out = backbone.forward(tape, masked, false)?;
    let terms = composite_loss(tape, masked_out.logits, &truth, psi, cfg)?;
    Ok(BatchLoss { terms, bound: out.bound, batch_stats: out.batch_stats, truth })
}
