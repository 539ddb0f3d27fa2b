//! VGG-style toy CNN: four blocks of two 3×3 conv + ReLU layers, each block
//! followed by 2×2 max pooling, then a two-layer classifier head.
//!
//! On a 56×56 input the pools produce 28, 14, 7 and 3 pixel maps. Taps are
//! named `pool{b}` (after block `b`'s pooling) or `conv{b}` (the block's last
//! activation, before pooling), with blocks numbered from 0.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::params::{fan_in_uniform, Bound, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

pub const BLOCKS: usize = 4;
const CONVS_PER_BLOCK: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    /// Output channels of each block.
    pub channels: Vec<usize>,
    /// Width of the hidden classifier layer.
    pub hidden: usize,
    pub taps: Vec<String>,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            channels: vec![32, 64, 128, 256],
            hidden: 128,
            taps: vec!["pool1".into(), "pool2".into(), "pool3".into()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tap {
    Pool(usize),
    Conv(usize),
}

fn parse_tap(name: &str) -> Option<Tap> {
    let (ctor, rest): (fn(usize) -> Tap, &str) =
        if let Some(r) = name.strip_prefix("pool") { (Tap::Pool, r) } else { (Tap::Conv, name.strip_prefix("conv")?) };
    rest.parse().ok().filter(|b| *b < BLOCKS).map(ctor)
}

const SPATIAL: [usize; BLOCKS] = [28, 14, 7, 3];

impl CnnConfig {
    /// Narrow variant used for CPU-bound experiments.
    pub fn desk() -> Self {
        CnnConfig { channels: vec![8, 16, 32, 64], hidden: 64, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != BLOCKS || self.channels.contains(&0) || self.hidden == 0 {
            return Err(invalid(format!("toycnn needs {BLOCKS} non-zero block widths and a hidden width")));
        }
        if self.taps.is_empty() {
            return Err(invalid("toycnn needs at least one feature tap"));
        }
        let mut order = Vec::new();
        for t in &self.taps {
            let tap = parse_tap(t).ok_or_else(|| invalid(format!("unknown toycnn tap {t:?}")))?;
            order.push(match tap {
                Tap::Conv(b) => 2 * b,
                Tap::Pool(b) => 2 * b + 1,
            });
        }
        if order.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("toycnn taps must be listed in network order"));
        }
        Ok(())
    }

    /// `[C,H,W]` of every tap on a 56×56 input.
    pub fn tap_shapes(&self) -> Vec<[usize; 3]> {
        self.taps
            .iter()
            .map(|t| match parse_tap(t).expect("validated tap") {
                Tap::Pool(b) => [self.channels[b], SPATIAL[b], SPATIAL[b]],
                Tap::Conv(b) => {
                    [self.channels[b], 2 * SPATIAL[b] + (b == 3) as usize, 2 * SPATIAL[b] + (b == 3) as usize]
                }
            })
            .collect()
    }

    fn conv_name(b: usize, j: usize) -> String {
        format!("block{b}.conv{j}")
    }

    pub(crate) fn init(&self, num_classes: usize, rng: &mut impl Rng) -> ParamSet {
        let relu_gain = 2f64.sqrt();
        let mut p = ParamSet::new();
        let mut in_ch = 3;
        for b in 0..BLOCKS {
            for j in 0..CONVS_PER_BLOCK {
                let out = self.channels[b];
                let name = Self::conv_name(b, j);
                p.insert(format!("{name}.weight"), fan_in_uniform(&[out, in_ch, 3, 3], in_ch * 9, relu_gain, rng));
                p.insert(format!("{name}.bias"), Tensor::zeros([out]));
                in_ch = out;
            }
        }
        let flat = self.channels[BLOCKS - 1] * SPATIAL[BLOCKS - 1] * SPATIAL[BLOCKS - 1];
        p.insert("fc1.weight", fan_in_uniform(&[self.hidden, flat], flat, relu_gain, rng));
        p.insert("fc1.bias", Tensor::zeros([self.hidden]));
        p.insert("fc2.weight", fan_in_uniform(&[num_classes, self.hidden], self.hidden, 1.0, rng));
        p.insert("fc2.bias", Tensor::zeros([num_classes]));
        p
    }

    pub(crate) fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> (Var, Vec<Var>) {
        let taps: Vec<Tap> = self.taps.iter().map(|t| parse_tap(t).expect("validated tap")).collect();
        let mut features = Vec::with_capacity(taps.len());
        let mut h = x;
        for b in 0..BLOCKS {
            for j in 0..CONVS_PER_BLOCK {
                let name = Self::conv_name(b, j);
                let w = p.var(&format!("{name}.weight"));
                let bias = p.var(&format!("{name}.bias"));
                let z = tape.conv2d(h, w, Some(bias), 1, 1);
                h = tape.relu(z);
            }
            if taps.contains(&Tap::Conv(b)) {
                features.push(h);
            }
            h = tape.max_pool2d(h);
            if taps.contains(&Tap::Pool(b)) {
                features.push(h);
            }
        }
        let n = tape.shape(h)[0];
        let flat: usize = tape.shape(h)[1..].iter().product();
        let h = tape.reshape(h, &[n, flat]);
        let z = tape.linear(h, p.var("fc1.weight"), Some(p.var("fc1.bias")));
        let h = tape.relu(z);
        let logits = tape.linear(h, p.var("fc2.weight"), Some(p.var("fc2.bias")));
        (logits, features)
    }

    pub(crate) fn layer_groups(&self) -> Vec<(String, Vec<String>)> {
        let mut groups = Vec::new();
        for b in 0..BLOCKS {
            for j in 0..CONVS_PER_BLOCK {
                let name = Self::conv_name(b, j);
                groups.push((name.clone(), vec![format!("{name}.weight"), format!("{name}.bias")]));
            }
        }
        for fc in ["fc1", "fc2"] {
            groups.push((fc.to_string(), vec![format!("{fc}.weight"), format!("{fc}.bias")]));
        }
        groups
    }
}
