//! Frozen toy classifiers with feature-map taps.
//!
//! [`Backbone`] wraps either a VGG-style [`cnn`] or a small vision
//! transformer ([`vit`]). Both expose the same surface: a differentiable
//! forward pass on a [`Tape`] that also returns the tapped intermediate
//! feature maps, a forward-pass counter, and per-layer re-initialization
//! for cascading randomization.

pub mod cnn;
mod train;
pub mod vit;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cnn::CnnConfig;
pub use train::{accuracy, pretrain_backbone, EpochReport, PretrainConfig};
pub use vit::VitConfig;

use crate::data::{CHANNELS, CROP_SIZE};
use crate::error::{invalid, Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

/// Shape family of a feature map: CNN maps are `[C,H,W]`, ViT maps are
/// token matrices `[N+1, D]` whose first row is the class token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Cnn,
    Vit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneConfig {
    #[serde(rename = "toycnn")]
    ToyCnn(CnnConfig),
    #[serde(rename = "toyvit")]
    ToyVit(VitConfig),
}

impl BackboneConfig {
    pub fn feature_kind(&self) -> FeatureKind {
        match self {
            BackboneConfig::ToyCnn(_) => FeatureKind::Cnn,
            BackboneConfig::ToyVit(_) => FeatureKind::Vit,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BackboneConfig::ToyCnn(_) => "toycnn",
            BackboneConfig::ToyVit(_) => "toyvit",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BackboneConfig::ToyCnn(c) => c.validate(),
            BackboneConfig::ToyVit(c) => c.validate(),
        }
    }
}

/// Intermediate outputs of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapSet {
    pub kind: FeatureKind,
    pub layers: Vec<String>,
    pub maps: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub class: usize,
    pub confidence: f64,
}

impl Prediction {
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut probabilities = logits.to_vec();
        crate::tensor::softmax_in_place(&mut probabilities);
        let class = Tensor::new([logits.len()], logits.to_vec()).expect("logits").argmax();
        Prediction { logits: logits.to_vec(), confidence: probabilities[class], probabilities, class }
    }

    pub fn probability(&self, class: usize) -> f64 {
        self.probabilities[class]
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardOutput {
    pub logits: Var,
    pub features: Vec<Var>,
    pub bound: Bound,
}

#[derive(Debug)]
pub struct Backbone {
    config: BackboneConfig,
    num_classes: usize,
    params: ParamSet,
    frozen: bool,
    forward_passes: AtomicUsize,
}

impl Clone for Backbone {
    fn clone(&self) -> Self {
        Backbone {
            config: self.config.clone(),
            num_classes: self.num_classes,
            params: self.params.clone(),
            frozen: self.frozen,
            forward_passes: AtomicUsize::new(self.forward_passes()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: BackboneConfig,
    num_classes: usize,
}

impl Backbone {
    /// Freshly initialized, trainable backbone.
    pub fn new(config: BackboneConfig, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(invalid("a classifier needs at least two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match &config {
            BackboneConfig::ToyCnn(c) => c.init(num_classes, &mut rng),
            BackboneConfig::ToyVit(c) => c.init(num_classes, &mut rng),
        };
        Ok(Backbone { config, num_classes, params, frozen: false, forward_passes: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [CHANNELS, CROP_SIZE, CROP_SIZE]
    }

    pub fn feature_kind(&self) -> FeatureKind {
        self.config.feature_kind()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> Result<&mut ParamSet> {
        if self.frozen {
            return Err(invalid("backbone is frozen"));
        }
        Ok(&mut self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Names of the tapped layers, earliest first.
    pub fn feature_layers(&self) -> Vec<String> {
        match &self.config {
            BackboneConfig::ToyCnn(c) => c.taps.clone(),
            BackboneConfig::ToyVit(c) => c.taps.iter().map(|b| format!("block{b}")).collect(),
        }
    }

    /// Number of single-image forward passes executed so far.
    pub fn forward_passes(&self) -> usize {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn reset_forward_passes(&self) {
        self.forward_passes.store(0, Ordering::Relaxed);
    }

    /// Forward pass of a `[N,3,56,56]` standardized batch on `tape`.
    ///
    /// With `trainable` the parameters become gradient leaves; a frozen
    /// backbone refuses this.
    pub fn forward(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<ForwardOutput> {
        if trainable && self.frozen {
            return Err(invalid("cannot train a frozen backbone"));
        }
        let s = tape.shape(x);
        if s.len() != 4 || s[1..] != self.input_shape() {
            return Err(Error::Shape(format!(
                "backbone expects [N,{},{},{}], got {s:?}",
                CHANNELS, CROP_SIZE, CROP_SIZE
            )));
        }
        self.forward_passes.fetch_add(s[0], Ordering::Relaxed);
        let bound = Bound::new(tape, &self.params, trainable);
        let (logits, features) = match &self.config {
            BackboneConfig::ToyCnn(c) => c.forward(tape, &bound, x),
            BackboneConfig::ToyVit(c) => c.forward(tape, &bound, x),
        };
        Ok(ForwardOutput { logits, features, bound })
    }

    /// Predictions and feature maps for a standardized `[3,56,56]` image.
    pub fn forward_with_features(&self, x: &Tensor) -> Result<(Prediction, FeatureMapSet)> {
        let batch = x.clone().reshape(batch_shape(x)?)?;
        let (mut preds, mut feats) = self.forward_batch(&batch)?;
        Ok((preds.remove(0), feats.remove(0)))
    }

    /// Batched variant of [`Backbone::forward_with_features`].
    pub fn forward_batch(&self, x: &Tensor) -> Result<(Vec<Prediction>, Vec<FeatureMapSet>)> {
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let out = self.forward(&mut tape, input, false)?;
        let n = x.shape()[0];
        let preds = predictions(tape.value(out.logits));
        let layers = self.feature_layers();
        let feats = (0..n)
            .map(|i| FeatureMapSet {
                kind: self.feature_kind(),
                layers: layers.clone(),
                maps: out
                    .features
                    .iter()
                    .map(|&f| {
                        let t = tape.value(f).slice_outer(i, i + 1);
                        let inner = t.shape()[1..].to_vec();
                        t.reshape(inner).expect("feature shape")
                    })
                    .collect(),
            })
            .collect();
        Ok((preds, feats))
    }

    /// Predictions only, for a standardized `[N,3,56,56]` batch.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let out = self.forward(&mut tape, input, false)?;
        Ok(predictions(tape.value(out.logits)))
    }

    /// Parameter groups from input to output, one per re-initializable layer.
    pub fn layer_groups(&self) -> Vec<(String, Vec<String>)> {
        match &self.config {
            BackboneConfig::ToyCnn(c) => c.layer_groups(),
            BackboneConfig::ToyVit(c) => c.layer_groups(),
        }
    }

    /// Copy with the named layer group re-drawn from its initializer.
    pub fn with_layer_randomized(&self, group: usize, seed: u64) -> Result<Backbone> {
        let groups = self.layer_groups();
        let (_, names) = groups.get(group).ok_or_else(|| invalid(format!("layer group {group} out of range")))?;
        let fresh = Backbone::new(self.config.clone(), self.num_classes, seed)?;
        let mut out = self.clone();
        out.reset_forward_passes();
        for name in names {
            out.params.insert(name.clone(), fresh.params.get(name).clone());
        }
        Ok(out)
    }

    pub fn write_to(&self, w: impl std::io::Write) -> Result<()> {
        let meta = serde_json::to_string(&Meta { config: self.config.clone(), num_classes: self.num_classes })?;
        self.params.write_to(&meta, w)
    }

    /// Loads a parameter file; the result is frozen.
    pub fn read_from(r: impl std::io::Read) -> Result<Self> {
        let (meta, params) = ParamSet::read_from(r)?;
        let meta: Meta = serde_json::from_str(&meta)?;
        let expected = Backbone::new(meta.config.clone(), meta.num_classes, 0)?;
        for (name, t) in expected.params.iter() {
            match params.try_get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::Format(format!("parameter {name} missing or misshapen"))),
            }
        }
        Ok(Backbone {
            config: meta.config,
            num_classes: meta.num_classes,
            params,
            frozen: true,
            forward_passes: AtomicUsize::new(0),
        })
    }
}

fn batch_shape(x: &Tensor) -> Result<Vec<usize>> {
    if x.ndim() != 3 {
        return Err(Error::Shape(format!("expected a [C,H,W] image, got {:?}", x.shape())));
    }
    let mut s = vec![1];
    s.extend_from_slice(x.shape());
    Ok(s)
}

pub fn predictions(logits: &Tensor) -> Vec<Prediction> {
    let k = logits.shape()[1];
    logits.data().chunks_exact(k).map(Prediction::from_logits).collect()
}

#[cfg(test)]
mod tests;
