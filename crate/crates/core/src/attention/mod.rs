//! The trainable attention mechanism.
//!
//! Each used backbone tap feeds a feature branch (1×1 conv, optional batch
//! norm, optional skip connection, ReLU or sigmoid, bilinear upsampling to
//! the largest tap's spatial size). The fusion module concatenates the
//! branch outputs and maps them with a biased 1×1 conv to one channel per
//! class. During training the class maps go through a sigmoid; at inference
//! each class map is min-max scaled instead.

mod variant;

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use variant::Variant;

use crate::adapter::{adapt, adapt_var};
use crate::backbone::{Backbone, FeatureKind, Prediction};
use crate::error::{invalid, Error, Result};
use crate::params::{fan_in_uniform, Bound, ParamSet};
use crate::tensor::{minmax_normalize, BatchStats, Tape, Tensor, Var};

/// Running-statistics update rate of branch batch norms.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchActivation {
    Relu,
    Sigmoid,
}

impl FromStr for BranchActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(BranchActivation::Relu),
            "sigmoid" => Ok(BranchActivation::Sigmoid),
            _ => Err(invalid(format!("unknown branch activation {s:?}"))),
        }
    }
}

/// Architecture switches of the attention mechanism.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub skip: bool,
    pub batch_norm: bool,
    pub activation: BranchActivation,
    /// How many of the backbone's taps are used, counting back from the
    /// deepest one.
    pub layers: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { skip: true, batch_norm: true, activation: BranchActivation::Relu, layers: 3 }
    }
}

/// Output stage of the class maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapMode {
    /// Sigmoid of the fusion output.
    Train,
    /// Per-class min-max scaling of the fusion output.
    Inference,
}

/// How branch batch norms normalize.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormStats {
    Batch,
    Running,
}

/// Per-class explanation maps `[Cls, H_e, W_e]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplanationMaps {
    pub maps: Tensor,
    pub mode: MapMode,
}

impl ExplanationMaps {
    pub fn num_classes(&self) -> usize {
        self.maps.shape()[0]
    }

    /// The `[H_e, W_e]` map of class `n`.
    pub fn class(&self, n: usize) -> Tensor {
        self.maps.outer(n)
    }
}

/// Shape of one used tap after adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub layer: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Parts that can be re-initialized independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Fusion,
    Branch(usize),
}

/// Tape handles of one attention forward pass.
pub struct AttentionOutput {
    /// Fusion output before the final activation, `[N, Cls, H_e, W_e]`.
    pub logits: Var,
    pub bound: Bound,
    /// Batch statistics of every branch norm, when batch statistics were used.
    pub batch_stats: Vec<BatchStats>,
}

#[derive(Clone, Debug)]
pub struct Attention {
    config: AttentionConfig,
    kind: FeatureKind,
    num_classes: usize,
    /// Index of the first used tap among the backbone's taps.
    first_tap: usize,
    branches: Vec<BranchSpec>,
    params: ParamSet,
    running: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: AttentionConfig,
    kind: FeatureKind,
    num_classes: usize,
    first_tap: usize,
    branches: Vec<BranchSpec>,
}

const RUNNING_MEAN: &str = "bn.running_mean";
const RUNNING_VAR: &str = "bn.running_var";

impl Attention {
    /// Fresh attention mechanism sized for `backbone`'s taps.
    pub fn new(backbone: &Backbone, config: AttentionConfig, seed: u64) -> Result<Self> {
        let taps = backbone.feature_layers();
        if config.layers == 0 || config.layers > taps.len() {
            return Err(invalid(format!(
                "attention uses {} layers but the backbone exposes {}",
                config.layers,
                taps.len()
            )));
        }
        let probe = Tensor::zeros(backbone.input_shape().to_vec());
        let (_, feats) = backbone.forward_with_features(&probe)?;
        backbone.reset_forward_passes();
        let first_tap = taps.len() - config.layers;
        let branches = feats.maps[first_tap..]
            .iter()
            .zip(&taps[first_tap..])
            .map(|(m, layer)| {
                let a = adapt(m, feats.kind)?;
                Ok(BranchSpec {
                    layer: layer.clone(),
                    channels: a.shape()[0],
                    height: a.shape()[1],
                    width: a.shape()[2],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut att = Attention {
            config,
            kind: feats.kind,
            num_classes: backbone.num_classes(),
            first_tap,
            branches,
            params: ParamSet::new(),
            running: ParamSet::new(),
        };
        att.params = att.init(seed);
        for i in 0..att.branches.len() {
            att.reset_running(i);
        }
        Ok(att)
    }

    fn init(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Bound 1/sqrt(fan_in).
        let gain = 1.0 / 3f64.sqrt();
        let mut p = ParamSet::new();
        for (i, b) in self.branches.iter().enumerate() {
            let c = b.channels;
            p.insert(format!("branch{i}.conv.weight"), fan_in_uniform(&[c, c, 1, 1], c, gain, &mut rng));
            if self.config.batch_norm {
                p.insert(format!("branch{i}.bn.gamma"), Tensor::ones([c]));
                p.insert(format!("branch{i}.bn.beta"), Tensor::zeros([c]));
            }
        }
        let total = self.fusion_channels();
        p.insert("fusion.weight", fan_in_uniform(&[self.num_classes, total, 1, 1], total, gain, &mut rng));
        p.insert("fusion.bias", fan_in_uniform(&[self.num_classes], total, gain, &mut rng));
        p
    }

    fn reset_running(&mut self, i: usize) {
        if self.config.batch_norm {
            let c = self.branches[i].channels;
            self.running.insert(format!("branch{i}.{RUNNING_MEAN}"), Tensor::zeros([c]));
            self.running.insert(format!("branch{i}.{RUNNING_VAR}"), Tensor::ones([c]));
        }
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.config
    }

    pub fn feature_kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn branches(&self) -> &[BranchSpec] {
        &self.branches
    }

    pub fn fusion_channels(&self) -> usize {
        self.branches.iter().map(|b| b.channels).sum()
    }

    /// `(H_e, W_e)`: the largest used tap's spatial size.
    pub fn output_size(&self) -> (usize, usize) {
        let h = self.branches.iter().map(|b| b.height).max().unwrap_or(0);
        let w = self.branches.iter().map(|b| b.width).max().unwrap_or(0);
        (h, w)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Batch-norm running statistics.
    pub fn running_stats(&self) -> &ParamSet {
        &self.running
    }

    /// Folds one training batch's statistics into the running averages.
    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (i, s) in stats.iter().enumerate() {
            let mean = self.running.get_mut(&format!("branch{i}.{RUNNING_MEAN}"));
            for (r, b) in mean.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            let var = self.running.get_mut(&format!("branch{i}.{RUNNING_VAR}"));
            for (r, b) in var.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    /// One feature branch on an adapted `[N,C_i,H_i,W_i]` map.
    pub fn feature_branch(
        &self,
        tape: &mut Tape,
        p: &Bound,
        i: usize,
        l: Var,
        norm: NormStats,
    ) -> Result<(Var, Option<BatchStats>)> {
        let spec = &self.branches[i];
        let s = tape.shape(l).to_vec();
        if s.len() != 4 || s[1] != spec.channels {
            return Err(Error::Shape(format!("branch {i} expects {} channels, got {s:?}", spec.channels)));
        }
        let mut x = tape.conv2d(l, p.var(&format!("branch{i}.conv.weight")), None, 1, 0);
        let mut stats = None;
        if self.config.batch_norm {
            let (g, b) = (p.var(&format!("branch{i}.bn.gamma")), p.var(&format!("branch{i}.bn.beta")));
            x = match norm {
                NormStats::Batch => {
                    let (y, st) = tape.batch_norm_train(x, g, b);
                    stats = Some(st);
                    y
                }
                NormStats::Running => {
                    let mean = self.running.get(&format!("branch{i}.{RUNNING_MEAN}")).data().to_vec();
                    let var = self.running.get(&format!("branch{i}.{RUNNING_VAR}")).data().to_vec();
                    tape.batch_norm_eval(x, g, b, &mean, &var)
                }
            };
        }
        if self.config.skip {
            x = tape.add(x, l);
        }
        x = match self.config.activation {
            BranchActivation::Relu => tape.relu(x),
            BranchActivation::Sigmoid => tape.sigmoid(x),
        };
        let (h, w) = self.output_size();
        if (s[2], s[3]) != (h, w) {
            x = tape.resize(x, h, w);
        }
        Ok((x, stats))
    }

    /// Concatenation and the class-map conv; returns pre-activation maps.
    pub fn fusion(&self, tape: &mut Tape, p: &Bound, branch_maps: &[Var]) -> Result<Var> {
        let (h, w) = self.output_size();
        for &a in branch_maps {
            let s = tape.shape(a);
            if s.len() != 4 || s[2] != h || s[3] != w {
                return Err(Error::Shape(format!("fusion expects {h}x{w} maps, got {s:?}")));
            }
        }
        let cat = tape.concat(branch_maps, 1);
        Ok(tape.conv2d(cat, p.var("fusion.weight"), Some(p.var("fusion.bias")), 1, 0))
    }

    /// Runs every branch and the fusion on the raw backbone tap outputs.
    pub fn forward(
        &self,
        tape: &mut Tape,
        features: &[Var],
        norm: NormStats,
        trainable: bool,
    ) -> Result<AttentionOutput> {
        let used = features
            .get(self.first_tap..)
            .filter(|u| u.len() == self.branches.len())
            .ok_or_else(|| invalid(format!("expected {} feature maps", self.first_tap + self.branches.len())))?;
        let bound = Bound::new(tape, &self.params, trainable);
        let mut outs = Vec::with_capacity(used.len());
        let mut batch_stats = Vec::new();
        for (i, &f) in used.iter().enumerate() {
            let l = adapt_var(tape, f, self.kind)?;
            let (a, st) = self.feature_branch(tape, &bound, i, l, norm)?;
            outs.push(a);
            batch_stats.extend(st);
        }
        let logits = self.fusion(tape, &bound, &outs)?;
        Ok(AttentionOutput { logits, bound, batch_stats })
    }

    /// Explanation maps for one standardized `[3,56,56]` image, using a
    /// single backbone forward pass.
    pub fn explain(&self, backbone: &Backbone, x: &Tensor) -> Result<(Prediction, ExplanationMaps)> {
        if x.ndim() != 3 {
            return Err(Error::Shape(format!("expected a [C,H,W] image, got {:?}", x.shape())));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let mut out = self.explain_batch(backbone, &x.clone().reshape(shape)?)?;
        Ok(out.remove(0))
    }

    /// [`Attention::explain`] over a standardized `[N,3,56,56]` batch.
    pub fn explain_batch(&self, backbone: &Backbone, x: &Tensor) -> Result<Vec<(Prediction, ExplanationMaps)>> {
        self.check_backbone(backbone)?;
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let fwd = backbone.forward(&mut tape, input, false)?;
        let preds = crate::backbone::predictions(tape.value(fwd.logits));
        let out = self.forward(&mut tape, &fwd.features, NormStats::Running, false)?;
        let raw = tape.value(out.logits);
        Ok(preds
            .into_iter()
            .enumerate()
            .map(|(i, p)| (p, ExplanationMaps { maps: inference_maps(&raw.outer(i)), mode: MapMode::Inference }))
            .collect())
    }

    fn check_backbone(&self, backbone: &Backbone) -> Result<()> {
        if backbone.feature_kind() != self.kind || backbone.num_classes() != self.num_classes {
            return Err(invalid("attention mechanism was built for a different backbone"));
        }
        Ok(())
    }

    /// Copy with one stage re-drawn from its initializer.
    pub fn randomized(&self, stage: Stage, seed: u64) -> Result<Attention> {
        let fresh = self.init(seed);
        let mut out = self.clone();
        let prefix = match stage {
            Stage::Fusion => "fusion.".to_string(),
            Stage::Branch(i) if i < self.branches.len() => format!("branch{i}."),
            Stage::Branch(i) => return Err(invalid(format!("branch {i} out of range"))),
        };
        for (name, t) in fresh.iter() {
            if name.starts_with(&prefix) {
                out.params.insert(name, t.clone());
            }
        }
        if let Stage::Branch(i) = stage {
            out.reset_running(i);
        }
        Ok(out)
    }

    /// Stages in cascading-randomization order: fusion first, then the
    /// branches from deepest to earliest.
    pub fn stages(&self) -> Vec<Stage> {
        let mut s = vec![Stage::Fusion];
        s.extend((0..self.branches.len()).rev().map(Stage::Branch));
        s
    }

    pub fn write_to(&self, w: impl std::io::Write) -> Result<()> {
        let meta = serde_json::to_string(&Meta {
            config: self.config.clone(),
            kind: self.kind,
            num_classes: self.num_classes,
            first_tap: self.first_tap,
            branches: self.branches.clone(),
        })?;
        let mut all = self.params.clone();
        for (n, t) in self.running.iter() {
            all.insert(n, t.clone());
        }
        all.write_to(&meta, w)
    }

    pub fn read_from(r: impl std::io::Read) -> Result<Self> {
        let (meta, all) = ParamSet::read_from(r)?;
        let meta: Meta = serde_json::from_str(&meta)?;
        let mut att = Attention {
            config: meta.config,
            kind: meta.kind,
            num_classes: meta.num_classes,
            first_tap: meta.first_tap,
            branches: meta.branches,
            params: ParamSet::new(),
            running: ParamSet::new(),
        };
        for i in 0..att.branches.len() {
            att.reset_running(i);
        }
        let expected = att.init(0);
        for (name, t) in expected.iter().chain(att.running.clone().iter()) {
            match all.try_get(name) {
                Some(v) if v.shape() == t.shape() => {}
                _ => return Err(Error::Format(format!("attention parameter {name} missing or misshapen"))),
            }
        }
        for (name, t) in all.iter() {
            if name.contains("running_") {
                att.running.insert(name, t.clone());
            } else {
                att.params.insert(name, t.clone());
            }
        }
        Ok(att)
    }
}

/// Per-class min-max scaling of `[Cls, H, W]` fusion outputs.
pub fn inference_maps(raw: &Tensor) -> Tensor {
    let per_class: Vec<Tensor> = (0..raw.shape()[0]).map(|n| minmax_normalize(&raw.outer(n))).collect();
    Tensor::stack(&per_class).expect("class maps share a shape")
}

#[cfg(test)]
mod tests;
