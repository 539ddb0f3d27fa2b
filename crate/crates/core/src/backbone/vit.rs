//! Small pre-norm vision transformer.
//!
//! A 56×56 input is cut into non-overlapping `patch`×`patch` squares in
//! row-major order, embedded linearly, prefixed with a learned class token
//! and given learned position embeddings. Each block is
//! `x + attn(ln1(x))` followed by `x + mlp(ln2(x))`; the classifier reads
//! the normalized class token. Tap `i` is the token matrix `[N+1, D]` after
//! block `i`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CHANNELS, CROP_SIZE};
use crate::error::{invalid, Result};
use crate::params::{fan_in_uniform, truncated_normal, Bound, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitConfig {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Blocks whose outputs are exposed as feature maps.
    pub taps: Vec<usize>,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig { patch: 8, dim: 64, depth: 4, heads: 4, mlp_ratio: 2, taps: vec![1, 2, 3] }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !CROP_SIZE.is_multiple_of(self.patch) {
            return Err(invalid(format!("patch size {} must divide {CROP_SIZE}", self.patch)));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(invalid(format!("embedding width {} must split into {} heads", self.dim, self.heads)));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(invalid("toyvit needs at least one block and a non-zero MLP ratio"));
        }
        if self.taps.is_empty() || self.taps.iter().any(|t| *t >= self.depth) {
            return Err(invalid(format!("toyvit taps must be block indices below {}", self.depth)));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("toyvit taps must be strictly increasing"));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        CROP_SIZE / self.patch
    }

    /// Number of tokens including the class token.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub(crate) fn init(&self, num_classes: usize, rng: &mut impl Rng) -> ParamSet {
        let d = self.dim;
        let hidden = d * self.mlp_ratio;
        let fan = CHANNELS * self.patch * self.patch;
        let mut p = ParamSet::new();
        p.insert("patch.weight", fan_in_uniform(&[d, CHANNELS, self.patch, self.patch], fan, 1.0, rng));
        p.insert("patch.bias", Tensor::zeros([d]));
        p.insert("cls", truncated_normal(&[1, 1, d], 0.02, rng));
        p.insert("pos", truncated_normal(&[1, self.tokens(), d], 0.02, rng));
        for i in 0..self.depth {
            let b = format!("block{i}");
            p.insert(format!("{b}.ln1.gamma"), Tensor::ones([d]));
            p.insert(format!("{b}.ln1.beta"), Tensor::zeros([d]));
            p.insert(format!("{b}.attn.qkv.weight"), truncated_normal(&[3 * d, d], 0.02, rng));
            p.insert(format!("{b}.attn.qkv.bias"), Tensor::zeros([3 * d]));
            p.insert(format!("{b}.attn.proj.weight"), truncated_normal(&[d, d], 0.02, rng));
            p.insert(format!("{b}.attn.proj.bias"), Tensor::zeros([d]));
            p.insert(format!("{b}.ln2.gamma"), Tensor::ones([d]));
            p.insert(format!("{b}.ln2.beta"), Tensor::zeros([d]));
            p.insert(format!("{b}.mlp.fc1.weight"), truncated_normal(&[hidden, d], 0.02, rng));
            p.insert(format!("{b}.mlp.fc1.bias"), Tensor::zeros([hidden]));
            p.insert(format!("{b}.mlp.fc2.weight"), truncated_normal(&[d, hidden], 0.02, rng));
            p.insert(format!("{b}.mlp.fc2.bias"), Tensor::zeros([d]));
        }
        p.insert("norm.gamma", Tensor::ones([d]));
        p.insert("norm.beta", Tensor::zeros([d]));
        p.insert("head.weight", truncated_normal(&[num_classes, d], 0.02, rng));
        p.insert("head.bias", Tensor::zeros([num_classes]));
        p
    }

    fn attention(&self, tape: &mut Tape, p: &Bound, b: &str, x: Var) -> Var {
        let s = tape.shape(x).to_vec();
        let (n, t, d) = (s[0], s[1], s[2]);
        let (h, dh) = (self.heads, self.dim / self.heads);
        let qkv = tape.linear(x, p.var(&format!("{b}.attn.qkv.weight")), Some(p.var(&format!("{b}.attn.qkv.bias"))));
        let split = |tape: &mut Tape, i: usize| {
            let part = tape.slice(qkv, 2, i * d, (i + 1) * d);
            let part = tape.reshape(part, &[n, t, h, dh]);
            let part = tape.permute(part, &[0, 2, 1, 3]);
            tape.reshape(part, &[n * h, t, dh])
        };
        let q = split(tape, 0);
        let k = split(tape, 1);
        let v = split(tape, 2);
        let kt = tape.permute(k, &[0, 2, 1]);
        let scores = tape.bmm(q, kt);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = tape.softmax(scores);
        let mixed = tape.bmm(weights, v);
        let mixed = tape.reshape(mixed, &[n, h, t, dh]);
        let mixed = tape.permute(mixed, &[0, 2, 1, 3]);
        let mixed = tape.reshape(mixed, &[n, t, d]);
        tape.linear(mixed, p.var(&format!("{b}.attn.proj.weight")), Some(p.var(&format!("{b}.attn.proj.bias"))))
    }

    pub(crate) fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> (Var, Vec<Var>) {
        let n = tape.shape(x)[0];
        let (d, g) = (self.dim, self.grid());
        let emb = tape.conv2d(x, p.var("patch.weight"), Some(p.var("patch.bias")), self.patch, 0);
        let emb = tape.reshape(emb, &[n, d, g * g]);
        let emb = tape.permute(emb, &[0, 2, 1]);
        let cls = tape.index_select(p.var("cls"), 0, &vec![0; n]);
        let tokens = tape.concat(&[cls, emb], 1);
        let mut h = tape.add(tokens, p.var("pos"));
        let mut features = Vec::with_capacity(self.taps.len());
        for i in 0..self.depth {
            let b = format!("block{i}");
            let z = tape.layer_norm(h, p.var(&format!("{b}.ln1.gamma")), p.var(&format!("{b}.ln1.beta")));
            let a = self.attention(tape, p, &b, z);
            h = tape.add(h, a);
            let z = tape.layer_norm(h, p.var(&format!("{b}.ln2.gamma")), p.var(&format!("{b}.ln2.beta")));
            let z = tape.linear(z, p.var(&format!("{b}.mlp.fc1.weight")), Some(p.var(&format!("{b}.mlp.fc1.bias"))));
            let z = tape.gelu(z);
            let z = tape.linear(z, p.var(&format!("{b}.mlp.fc2.weight")), Some(p.var(&format!("{b}.mlp.fc2.bias"))));
            h = tape.add(h, z);
            if self.taps.contains(&i) {
                features.push(h);
            }
        }
        let cls = tape.slice(h, 1, 0, 1);
        let cls = tape.reshape(cls, &[n, d]);
        let cls = tape.layer_norm(cls, p.var("norm.gamma"), p.var("norm.beta"));
        let logits = tape.linear(cls, p.var("head.weight"), Some(p.var("head.bias")));
        (logits, features)
    }

    pub(crate) fn layer_groups(&self) -> Vec<(String, Vec<String>)> {
        let mut groups =
            vec![("embed".to_string(), vec!["patch.weight".into(), "patch.bias".into(), "cls".into(), "pos".into()])];
        for i in 0..self.depth {
            let b = format!("block{i}");
            let names = [
                "ln1.gamma",
                "ln1.beta",
                "attn.qkv.weight",
                "attn.qkv.bias",
                "attn.proj.weight",
                "attn.proj.bias",
                "ln2.gamma",
                "ln2.beta",
                "mlp.fc1.weight",
                "mlp.fc1.bias",
                "mlp.fc2.weight",
                "mlp.fc2.bias",
            ];
            groups.push((b.clone(), names.iter().map(|n| format!("{b}.{n}")).collect()));
        }
        groups.push((
            "head".to_string(),
            vec!["norm.gamma".into(), "norm.beta".into(), "head.weight".into(), "head.bias".into()],
        ));
        groups
    }
}
