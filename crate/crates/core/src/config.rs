//! The JSON run configuration. Every field has a default, so a document
//! only needs the values it changes.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, Variant};
use crate::backbone::{BackboneConfig, CnnConfig, PretrainConfig, VitConfig};
use crate::baselines::RiseConfig;
use crate::error::{invalid, Error, Result};
use crate::evaluation::{EvalOptions, RoadConfig, ADIC_THRESHOLDS, ROAD_PERCENTAGES};
use crate::training::{LossConfig, ScheduleConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Toycnn,
    Toyvit,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 2] = [BackboneKind::Toycnn, BackboneKind::Toyvit];

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Toycnn => "toycnn",
            BackboneKind::Toyvit => "toyvit",
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toycnn" => Ok(BackboneKind::Toycnn),
            "toyvit" => Ok(BackboneKind::Toyvit),
            _ => Err(invalid(format!("unknown backbone {s:?} (expected toycnn or toyvit)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_per_class: usize,
    pub num_classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_per_class: 100, num_classes: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCamConfig {
    /// Tap index; `null` uses the deepest tap.
    pub layer: Option<usize>,
}

#[allow(clippy::derivable_impls)]
impl Default for GradCamConfig {
    fn default() -> Self {
        GradCamConfig { layer: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub adic_thresholds: Vec<f64>,
    pub road_percentages: Vec<f64>,
    pub road: RoadConfig,
    pub options: EvalOptions,
    /// Evaluate only the first this-many test images; `null` uses all.
    pub max_images: Option<usize>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            adic_thresholds: ADIC_THRESHOLDS.to_vec(),
            road_percentages: ROAD_PERCENTAGES.to_vec(),
            road: RoadConfig::default(),
            options: EvalOptions::default(),
            max_images: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SanityConfig {
    pub images: usize,
    /// Randomization seeds, each giving one full cascade.
    pub seeds: Vec<u64>,
    /// Images per step written as heatmaps.
    pub heatmaps: usize,
}

impl Default for SanityConfig {
    fn default() -> Self {
        SanityConfig { images: 20, seeds: vec![0, 1, 2], heatmaps: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    /// Also train the full variant with the other backbone kind's masking.
    pub swapped_masking: bool,
    pub epochs: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { variants: Variant::ALL.to_vec(), swapped_masking: true, epochs: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Master seed; every stage derives its own stream from it. The `seed`
    /// fields of the sections below are mixed into their stage's stream.
    pub seed: u64,
    pub data: DataConfig,
    pub toycnn: CnnConfig,
    pub toyvit: VitConfig,
    pub pretrain: PretrainConfig,
    pub attention: AttentionConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    /// Peak learning rates tried on the validation split; empty keeps
    /// `schedule.max_lr`.
    pub lr_grid: Vec<f64>,
    pub gradcam: GradCamConfig,
    pub rise: RiseConfig,
    pub evaluation: EvaluationConfig,
    pub sanity: SanityConfig,
    pub ablation: AblationConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            data: DataConfig::default(),
            toycnn: CnnConfig::default(),
            toyvit: VitConfig::default(),
            pretrain: PretrainConfig::default(),
            attention: AttentionConfig::default(),
            loss: LossConfig::default(),
            schedule: ScheduleConfig::default(),
            lr_grid: vec![0.05, 0.1, 0.2],
            gradcam: GradCamConfig::default(),
            rise: RiseConfig::default(),
            evaluation: EvaluationConfig::default(),
            sanity: SanityConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Config::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn backbone(&self, kind: BackboneKind) -> BackboneConfig {
        match kind {
            BackboneKind::Toycnn => BackboneConfig::ToyCnn(self.toycnn.clone()),
            BackboneKind::Toyvit => BackboneConfig::ToyVit(self.toyvit.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.schedule.validate()?;
        for kind in BackboneKind::ALL {
            self.backbone(kind).validate()?;
        }
        if self.lr_grid.iter().any(|lr| !(*lr > 0.0)) {
            return Err(invalid("learning-rate grid entries must be positive"));
        }
        if self.evaluation.adic_thresholds.iter().any(|v| !(*v > 0.0 && *v <= 100.0)) {
            return Err(invalid("AD/IC thresholds must lie in (0, 100]"));
        }
        if self.evaluation.road_percentages.iter().any(|v| !(*v > 0.0 && *v < 100.0)) {
            return Err(invalid("ROAD percentages must lie in (0, 100)"));
        }
        if self.sanity.images == 0 || self.sanity.seeds.is_empty() {
            return Err(invalid("sanity checks need images and at least one seed"));
        }
        Ok(())
    }

    /// Seed of one named stage, derived from the master seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        // FNV-1a over the stage name, mixed with the master seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        for b in stage.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}
