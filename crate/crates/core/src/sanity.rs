//! Cascading-randomization sanity checks: progressively re-initialize the
//! backbone (logits first) or the attention mechanism (fusion first) and
//! watch how far explanations move from the originals.

use serde::{Deserialize, Serialize};

use crate::attention::{Attention, Stage};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::explainer::{ExplainBatch, Explainer, Ttame};
use crate::tensor::Tensor;

/// Maps below this similarity to the originals pass the check.
pub const SANITY_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub value: f64,
    /// Set when either map is constant and the correlation is undefined;
    /// `value` is then 0.
    pub degenerate: bool,
}

/// Ranks starting at 1, ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        idx[start..end].iter().for_each(|&i| ranks[i] = rank);
        start = end;
    }
    ranks
}

/// Spearman rank correlation of two equally shaped maps.
pub fn map_similarity(a: &Tensor, b: &Tensor) -> Result<Similarity> {
    if a.shape() != b.shape() || a.numel() == 0 {
        return Err(Error::Shape(format!("cannot compare maps {:?} and {:?}", a.shape(), b.shape())));
    }
    let (ra, rb) = (average_ranks(a.data()), average_ranks(b.data()));
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - mean, y - mean);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(Similarity { value: 0.0, degenerate: true });
    }
    Ok(Similarity { value: (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0), degenerate: false })
}

/// Maps after one cumulative randomization step.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeStep {
    /// What has been randomized so far, by its last stage; `"none"` first.
    pub stage: String,
    pub maps: Vec<Tensor>,
}

impl CascadeStep {
    /// Mean similarity of these maps to `original`, image by image.
    pub fn similarity_to(&self, original: &[Tensor]) -> Result<f64> {
        let sims = self.maps.iter().zip(original).map(|(a, b)| map_similarity(a, b)).collect::<Result<Vec<_>>>()?;
        Ok(sims.iter().map(|s| s.value).sum::<f64>() / sims.len() as f64)
    }
}

/// Seed of the `i`-th randomization step.
fn step_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1)
}

/// Re-initializes backbone layer groups from the output back to the input,
/// explaining `batch` (with its original classes) after every step. The
/// given backbone is left untouched.
pub fn cascade_randomize_backbone(
    backbone: &Backbone,
    explainer: &dyn Explainer,
    batch: &ExplainBatch<'_>,
    seed: u64,
) -> Result<Vec<CascadeStep>> {
    let mut steps = vec![CascadeStep { stage: "none".into(), maps: explainer.explain(backbone, batch)? }];
    let groups = backbone.layer_groups();
    let mut current = backbone.clone();
    for (i, g) in (0..groups.len()).rev().enumerate() {
        current = current.with_layer_randomized(g, step_seed(seed, i))?;
        steps.push(CascadeStep { stage: groups[g].0.clone(), maps: explainer.explain(&current, batch)? });
    }
    Ok(steps)
}

/// Re-initializes the attention mechanism fusion first, then each branch
/// from the deepest tap to the earliest.
pub fn cascade_randomize_attention(
    backbone: &Backbone,
    att: &Attention,
    batch: &ExplainBatch<'_>,
    seed: u64,
) -> Result<Vec<CascadeStep>> {
    let mut steps = vec![CascadeStep { stage: "none".into(), maps: Ttame(att).explain(backbone, batch)? }];
    let mut current = att.clone();
    for (i, stage) in att.stages().into_iter().enumerate() {
        current = current.randomized(stage, step_seed(seed, i))?;
        let name = match stage {
            Stage::Fusion => "fusion".to_string(),
            Stage::Branch(b) => format!("branch{b}"),
        };
        steps.push(CascadeStep { stage: name, maps: Ttame(&current).explain(backbone, batch)? });
    }
    Ok(steps)
}

/// One line of the sanity-check similarity table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub backbone: String,
    pub explainer: String,
    pub cascade: String,
    pub seed: u64,
    pub step: usize,
    pub stage: String,
    pub similarity: f64,
}

pub fn similarity_rows(
    backbone: &str,
    explainer: &str,
    cascade: &str,
    seed: u64,
    steps: &[CascadeStep],
) -> Result<Vec<SimilarityRow>> {
    let original = &steps[0].maps;
    steps
        .iter()
        .enumerate()
        .map(|(step, s)| {
            Ok(SimilarityRow {
                backbone: backbone.into(),
                explainer: explainer.into(),
                cascade: cascade.into(),
                seed,
                step,
                stage: s.stage.clone(),
                similarity: s.similarity_to(original)?,
            })
        })
        .collect()
}
