//! Faithfulness measures: Average Drop / Increase in Confidence under
//! top-`v%` masking, and ROAD removal curves (most and least relevant
//! first) with noisy linear imputation.

mod road;

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use road::{road_impute, RoadConfig, ROAD_NOISE_STD};

use crate::backbone::Backbone;
use crate::data::{test_batch, ChannelStats, Sample};
use crate::error::{invalid, Error, Result};
use crate::explainer::{ExplainBatch, Explainer};
use crate::tensor::{bilinear_resize, standardize, Tensor};
use crate::training::mask_image;

/// Thresholds of the AD/IC table.
pub const ADIC_THRESHOLDS: [f64; 3] = [100.0, 50.0, 15.0];
/// Removal percentages of the ROAD curves.
pub const ROAD_PERCENTAGES: [f64; 9] = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0];

/// Number of pixels `⌈v·n/100⌉` kept at threshold `v`.
pub fn keep_count(v: f64, n: usize) -> Result<usize> {
    if !(v > 0.0 && v <= 100.0) {
        return Err(invalid(format!("threshold {v} outside (0, 100]")));
    }
    Ok(((v * n as f64 / 100.0).ceil() as usize).min(n))
}

/// Indices of `values` from largest to smallest, ties in index order.
fn ranked(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// The top `v%` of `values`.
pub fn top_selection(values: &[f64], v: f64) -> Result<Vec<bool>> {
    let k = keep_count(v, values.len())?;
    let mut keep = vec![false; values.len()];
    ranked(values).into_iter().take(k).for_each(|i| keep[i] = true);
    Ok(keep)
}

/// The bottom `v%` of `values`: the complement of the top `(100 − v)%`, so
/// the two selections partition the pixels exactly.
pub fn bottom_selection(values: &[f64], v: f64) -> Result<Vec<bool>> {
    if !(v > 0.0 && v < 100.0) {
        return Err(invalid(format!("removal percentage {v} outside (0, 100)")));
    }
    Ok(top_selection(values, 100.0 - v)?.into_iter().map(|k| !k).collect())
}

/// `φ_v`: keeps the top `v%` of a map at their values and zeroes the rest.
pub fn threshold_phi_v(map: &Tensor, v: f64) -> Result<Tensor> {
    let keep = top_selection(map.data(), v)?;
    let data = map.data().iter().zip(&keep).map(|(x, k)| if *k { *x } else { 0.0 }).collect();
    Tensor::new(map.shape().to_vec(), data)
}

/// Batch size and worker count of an evaluation run. Results do not depend
/// on `workers`; they do depend on `chunk` only through floating-point
/// summation order inside the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub chunk: usize,
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { chunk: 50, workers: 1 }
    }
}

impl EvalOptions {
    /// Maps `f` over consecutive index ranges of `n` items and concatenates
    /// the results in order.
    fn run<T: Send>(&self, n: usize, f: impl Fn(Range<usize>) -> Result<Vec<T>> + Sync) -> Result<Vec<T>> {
        let chunk = self.chunk.max(1);
        let ranges: Vec<Range<usize>> = (0..n).step_by(chunk).map(|s| s..(s + chunk).min(n)).collect();
        let parts: Vec<Vec<T>> = if self.workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.workers)
                .build()
                .map_err(|e| invalid(format!("worker pool: {e}")))?;
            pool.install(|| ranges.into_par_iter().map(&f).collect::<Result<_>>())?
        } else {
            ranges.into_iter().map(&f).collect::<Result<_>>()?
        };
        Ok(parts.into_iter().flatten().collect())
    }
}

/// Test images with the backbone's own prediction for each.
pub struct EvalSet {
    pub ids: Vec<u32>,
    /// Raw `[N,3,56,56]` centre crops.
    pub raw: Tensor,
    pub standardized: Tensor,
    /// Model truth `y` of each image.
    pub classes: Vec<usize>,
    /// Confidence `ψ` on `y` of the unmasked image.
    pub confidences: Vec<f64>,
    pub stats: ChannelStats,
}

impl EvalSet {
    pub fn new(backbone: &Backbone, samples: &[Sample], stats: &ChannelStats, opts: &EvalOptions) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("evaluation needs at least one image"));
        }
        let raw = test_batch(samples)?;
        let standardized = standardize(&raw, &stats.mean, &stats.std)?;
        let n = samples.len();
        let preds = opts.run(n, |r| backbone.predict(&standardized.slice_outer(r.start, r.end)))?;
        Ok(EvalSet {
            ids: samples.iter().map(|s| s.id).collect(),
            raw,
            standardized,
            classes: preds.iter().map(|p| p.class).collect(),
            confidences: preds.iter().map(|p| p.confidence).collect(),
            stats: stats.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Explanation maps of every image for its model truth.
pub fn explain_all(
    explainer: &dyn Explainer,
    backbone: &Backbone,
    set: &EvalSet,
    opts: &EvalOptions,
) -> Result<Vec<Tensor>> {
    opts.run(set.len(), |r| {
        let raw = set.raw.slice_outer(r.start, r.end);
        let standardized = set.standardized.slice_outer(r.start, r.end);
        let batch = ExplainBatch {
            raw: &raw,
            standardized: &standardized,
            classes: &set.classes[r.clone()],
            ids: &set.ids[r.clone()],
        };
        let maps = explainer.explain(backbone, &batch)?;
        if maps.len() != r.len() {
            return Err(invalid(format!("{} returned {} maps for {} images", explainer.name(), maps.len(), r.len())));
        }
        Ok(maps)
    })
}

fn check_maps(set: &EvalSet, maps: &[Tensor]) -> Result<()> {
    if maps.len() != set.len() {
        return Err(invalid(format!("{} maps for {} images", maps.len(), set.len())));
    }
    if let Some(m) = maps.iter().find(|m| m.ndim() != 2) {
        return Err(Error::Shape(format!("explanation maps must be [H,W], got {:?}", m.shape())));
    }
    Ok(())
}

/// Confidences on each image's model truth after transforming image `i`
/// with `input(i)`.
fn confidences_of(
    backbone: &Backbone,
    set: &EvalSet,
    opts: &EvalOptions,
    input: impl Fn(usize) -> Result<Tensor> + Sync,
) -> Result<Vec<f64>> {
    opts.run(set.len(), |r| {
        let xs = r.clone().map(&input).collect::<Result<Vec<_>>>()?;
        let preds = backbone.predict(&Tensor::stack(&xs)?)?;
        Ok(preds.iter().zip(&set.classes[r]).map(|(p, &c)| p.probability(c)).collect())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdIc {
    /// Average Drop, in percent.
    pub ad: f64,
    /// Increase in Confidence, in percent.
    pub ic: f64,
    /// Images with `ψ = 0`, left out of both averages.
    pub excluded: usize,
}

/// AD and IC from unmasked confidences `ψ` and masked confidences `ψ^φ`.
pub fn ad_ic_from(confidence: &[f64], masked: &[f64]) -> Result<AdIc> {
    if confidence.len() != masked.len() || confidence.is_empty() {
        return Err(invalid("AD/IC needs matching, non-empty confidence lists"));
    }
    let (mut drop, mut inc, mut used) = (0.0, 0.0, 0usize);
    for (&p, &q) in confidence.iter().zip(masked) {
        if p <= 0.0 {
            continue;
        }
        drop += (p - q).max(0.0) / p;
        inc += if q > p { 1.0 } else { 0.0 };
        used += 1;
    }
    let excluded = confidence.len() - used;
    if excluded > 0 {
        log::warn!("{excluded} images with zero confidence left out of AD/IC");
    }
    if used == 0 {
        return Err(invalid("every image has zero confidence"));
    }
    Ok(AdIc { ad: 100.0 * drop / used as f64, ic: 100.0 * inc / used as f64, excluded })
}

/// Masked confidences `ψ^φ` at threshold `v`: each map is thresholded with
/// [`threshold_phi_v`] and applied with the backbone's own masking rule.
pub fn masked_confidences(
    backbone: &Backbone,
    set: &EvalSet,
    maps: &[Tensor],
    v: f64,
    opts: &EvalOptions,
) -> Result<Vec<f64>> {
    check_maps(set, maps)?;
    let kind = backbone.feature_kind();
    confidences_of(backbone, set, opts, |i| {
        mask_image(&threshold_phi_v(&maps[i], v)?, &set.raw.outer(i), kind, &set.stats)
    })
}

pub fn ad_ic(backbone: &Backbone, set: &EvalSet, maps: &[Tensor], v: f64, opts: &EvalOptions) -> Result<AdIc> {
    let masked = masked_confidences(backbone, set, maps, v, opts)?;
    ad_ic_from(&set.confidences, &masked)
}

/// Mean confidence (percent) after ROAD removal at each percentage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadCurves {
    pub percentages: Vec<f64>,
    pub morf: Vec<f64>,
    pub lerf: Vec<f64>,
}

impl RoadCurves {
    pub fn morf_average(&self) -> f64 {
        self.morf.iter().sum::<f64>() / self.morf.len() as f64
    }

    pub fn lerf_average(&self) -> f64 {
        self.lerf.iter().sum::<f64>() / self.lerf.len() as f64
    }
}

/// Which end of the ranking ROAD removes first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Removal {
    MostRelevantFirst,
    LeastRelevantFirst,
}

/// Confidences after removing `v%` of each image's pixels with ROAD.
pub fn road_confidences(
    backbone: &Backbone,
    set: &EvalSet,
    maps: &[Tensor],
    v: f64,
    removal: Removal,
    cfg: &RoadConfig,
    opts: &EvalOptions,
) -> Result<Vec<f64>> {
    check_maps(set, maps)?;
    let (h, w) = (set.raw.shape()[2], set.raw.shape()[3]);
    confidences_of(backbone, set, opts, |i| {
        let up = bilinear_resize(&maps[i], h, w)?;
        let remove = match removal {
            Removal::MostRelevantFirst => top_selection(up.data(), v)?,
            Removal::LeastRelevantFirst => bottom_selection(up.data(), v)?,
        };
        let mut rng = cfg.rng_for(set.ids[i], v, removal);
        let imputed = road_impute(&set.raw.outer(i), &remove, cfg.noise_std, &mut rng)?;
        standardize(&imputed, &set.stats.mean, &set.stats.std)
    })
}

pub fn road_curves(
    backbone: &Backbone,
    set: &EvalSet,
    maps: &[Tensor],
    percentages: &[f64],
    cfg: &RoadConfig,
    opts: &EvalOptions,
) -> Result<RoadCurves> {
    if percentages.is_empty() {
        return Err(invalid("ROAD needs at least one percentage"));
    }
    let mean = |xs: Vec<f64>| 100.0 * xs.iter().sum::<f64>() / xs.len() as f64;
    let mut curves = RoadCurves { percentages: percentages.to_vec(), morf: vec![], lerf: vec![] };
    for &v in percentages {
        curves.morf.push(mean(road_confidences(backbone, set, maps, v, Removal::MostRelevantFirst, cfg, opts)?));
        curves.lerf.push(mean(road_confidences(backbone, set, maps, v, Removal::LeastRelevantFirst, cfg, opts)?));
    }
    Ok(curves)
}

/// One line of the metrics table. Averaged ROAD scores leave `v` empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub backbone: String,
    pub explainer: String,
    pub measure: String,
    pub v: Option<f64>,
    pub value: f64,
}

/// One point of a ROAD curve pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub backbone: String,
    pub explainer: String,
    pub v: f64,
    pub morf: f64,
    pub lerf: f64,
}

/// `AD` and `IC` rows at every threshold.
pub fn ad_ic_rows(backbone: &str, explainer: &str, results: &[(f64, AdIc)]) -> Vec<MetricRow> {
    let row = |measure: &str, v: f64, value: f64| MetricRow {
        backbone: backbone.into(),
        explainer: explainer.into(),
        measure: measure.into(),
        v: Some(v),
        value,
    };
    results.iter().flat_map(|(v, r)| [row("AD", *v, r.ad), row("IC", *v, r.ic)]).collect()
}

/// Averaged `MoRF` and `LeRF` rows plus the curve table.
pub fn road_rows(backbone: &str, explainer: &str, curves: &RoadCurves) -> (Vec<MetricRow>, Vec<CurveRow>) {
    let avg = |measure: &str, value: f64| MetricRow {
        backbone: backbone.into(),
        explainer: explainer.into(),
        measure: measure.into(),
        v: None,
        value,
    };
    let metrics = vec![avg("MoRF", curves.morf_average()), avg("LeRF", curves.lerf_average())];
    let points = curves
        .percentages
        .iter()
        .zip(curves.morf.iter().zip(&curves.lerf))
        .map(|(&v, (&morf, &lerf))| CurveRow { backbone: backbone.into(), explainer: explainer.into(), v, morf, lerf })
        .collect();
    (metrics, points)
}

/// Writes serializable rows as CSV with a header line.
pub fn write_rows<T: Serialize>(rows: &[T], w: impl std::io::Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
