//! End-to-end commands over a working directory: dataset generation,
//! backbone pretraining, attention training, explanation export,
//! evaluation, sanity checks and ablations.
//!
//! Every command writes its artifacts under [`Workspace::out`] and is
//! deterministic given the configuration.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Attention, AttentionConfig, Variant};
use crate::backbone::{accuracy, pretrain_backbone, Backbone, EpochReport, PretrainConfig};
use crate::baselines::{GradCam, Rise, RiseConfig};
use crate::config::{BackboneKind, Config};
use crate::data::{crop_for, generate_dataset, DatasetSplits, Mode, Sample};
use crate::error::{invalid, Error, Result};
use crate::evaluation::{
    ad_ic, ad_ic_rows, explain_all, road_curves, road_rows, write_rows, EvalSet, MetricRow, RoadConfig,
};
use crate::explainer::{ExplainBatch, Explainer, RandomMaps, Ttame};
use crate::io::write_pgm;
use crate::sanity::{cascade_randomize_attention, cascade_randomize_backbone, similarity_rows, SimilarityRow};
use crate::tensor::{standardize, Tensor};
use crate::training::{fit, MaskingRule, ScheduleConfig, TrainingLog};

pub const DATASET_FILE: &str = "dataset.ttds";

/// Where artifacts are written and where the dataset lives.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub out: PathBuf,
    pub data_dir: PathBuf,
}

impl Workspace {
    /// `data_dir` defaults to `out`.
    pub fn new(out: impl Into<PathBuf>, data_dir: Option<PathBuf>) -> Self {
        let out = out.into();
        let data_dir = data_dir.unwrap_or_else(|| out.clone());
        Workspace { out, data_dir }
    }

    pub fn dataset(&self) -> PathBuf {
        self.data_dir.join(DATASET_FILE)
    }

    pub fn backbone(&self, kind: BackboneKind) -> PathBuf {
        self.out.join(format!("{kind}.ttpm"))
    }

    pub fn attention(&self, kind: BackboneKind) -> PathBuf {
        self.out.join(format!("{kind}_ttame.ttpm"))
    }

    fn create(&self, path: &Path) -> Result<BufWriter<File>> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(BufWriter::new(File::create(path)?))
    }

    fn open(&self, path: &Path, what: &str) -> Result<BufReader<File>> {
        File::open(path)
            .map(BufReader::new)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{what} {}: {e}", path.display()))))
    }

    pub fn load_data(&self) -> Result<DatasetSplits> {
        DatasetSplits::read_from(self.open(&self.dataset(), "dataset")?)
    }

    pub fn load_backbone(&self, kind: BackboneKind) -> Result<Backbone> {
        Backbone::read_from(self.open(&self.backbone(kind), "backbone")?)
    }

    pub fn load_attention(&self, kind: BackboneKind) -> Result<Attention> {
        Attention::read_from(self.open(&self.attention(kind), "attention parameters")?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplainerKind {
    Ttame,
    Gradcam,
    Rise,
    /// Uniform noise at the attention mechanism's resolution.
    Random,
}

impl ExplainerKind {
    pub fn name(self) -> &'static str {
        match self {
            ExplainerKind::Ttame => "ttame",
            ExplainerKind::Gradcam => "gradcam",
            ExplainerKind::Rise => "rise",
            ExplainerKind::Random => "random",
        }
    }
}

impl FromStr for ExplainerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ttame" => Ok(ExplainerKind::Ttame),
            "gradcam" => Ok(ExplainerKind::Gradcam),
            "rise" => Ok(ExplainerKind::Rise),
            "random" => Ok(ExplainerKind::Random),
            _ => Err(invalid(format!("unknown explainer {s:?} (expected ttame, gradcam, rise or random)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Adic,
    Road,
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adic" => Ok(Measure::Adic),
            "road" => Ok(Measure::Road),
            _ => Err(invalid(format!("unknown measure {s:?} (expected adic or road)"))),
        }
    }
}

/// A trained backbone, its attention mechanism (when one exists) and the
/// dataset statistics, from which any explainer can be built.
pub struct Explainers<'a> {
    pub cfg: &'a Config,
    pub backbone: &'a Backbone,
    pub attention: Option<&'a Attention>,
    pub data: &'a DatasetSplits,
}

impl Explainers<'_> {
    pub fn build(&self, kind: ExplainerKind) -> Result<Box<dyn Explainer + '_>> {
        Ok(match kind {
            ExplainerKind::Ttame => {
                Box::new(Ttame(self.attention.ok_or_else(|| invalid("no trained attention mechanism"))?))
            }
            ExplainerKind::Gradcam => Box::new(GradCam { layer: self.cfg.gradcam.layer }),
            ExplainerKind::Rise => {
                let config =
                    RiseConfig { seed: self.cfg.stage_seed("rise") ^ self.cfg.rise.seed, ..self.cfg.rise.clone() };
                Box::new(Rise { config, stats: self.data.stats.clone() })
            }
            ExplainerKind::Random => {
                let (height, width) = match self.attention {
                    Some(a) => a.output_size(),
                    None => Attention::new(self.backbone, self.cfg.attention.clone(), 0)?.output_size(),
                };
                Box::new(RandomMaps { height, width, seed: self.cfg.stage_seed("random-maps") })
            }
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DataReport {
    pub path: PathBuf,
    pub num_classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub fn gen_data(cfg: &Config, ws: &Workspace) -> Result<DataReport> {
    let data = generate_dataset(cfg.stage_seed("data"), cfg.data.n_per_class, cfg.data.num_classes)?;
    let path = ws.dataset();
    let mut w = ws.create(&path)?;
    data.write_to(&mut w)?;
    std::io::Write::flush(&mut w)?;
    Ok(DataReport {
        path,
        num_classes: data.num_classes,
        train: data.train.len(),
        val: data.val.len(),
        test: data.test.len(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BackboneReport {
    pub backbone: BackboneKind,
    pub epochs: Vec<EpochReport>,
    pub test_accuracy: f64,
}

/// Pretrains and freezes a backbone of `kind`.
pub fn pretrain(cfg: &Config, kind: BackboneKind, data: &DatasetSplits) -> Result<(Backbone, Vec<EpochReport>)> {
    let mut b = Backbone::new(cfg.backbone(kind), data.num_classes, cfg.stage_seed(&format!("{kind}-init")))?;
    let pcfg = PretrainConfig {
        seed: cfg.stage_seed(&format!("{kind}-pretrain")) ^ cfg.pretrain.seed,
        ..cfg.pretrain.clone()
    };
    let reports = pretrain_backbone(&mut b, data, &pcfg, |r| {
        log::info!("{kind} epoch {}: loss {:.4}, val accuracy {:.3}", r.epoch, r.loss, r.val_accuracy);
        true
    })?;
    Ok((b, reports))
}

pub fn train_backbone(cfg: &Config, ws: &Workspace, kind: BackboneKind) -> Result<BackboneReport> {
    let data = ws.load_data()?;
    let (b, epochs) = pretrain(cfg, kind, &data)?;
    let test_accuracy = accuracy(&b, &data.test, &data.stats)?;
    let mut w = ws.create(&ws.backbone(kind))?;
    b.write_to(&mut w)?;
    std::io::Write::flush(&mut w)?;
    write_rows(&epochs, ws.create(&ws.out.join(format!("{kind}_pretrain.csv")))?)?;
    Ok(BackboneReport { backbone: kind, epochs, test_accuracy })
}

/// Trains one attention mechanism on the training split.
pub fn train_attention(
    cfg: &Config,
    backbone: &Backbone,
    data: &DatasetSplits,
    attention: &AttentionConfig,
    schedule: &ScheduleConfig,
    seed: u64,
) -> Result<(Attention, TrainingLog)> {
    let mut att = Attention::new(backbone, attention.clone(), seed)?;
    let sched = ScheduleConfig { seed: seed.wrapping_add(1) ^ schedule.seed, ..schedule.clone() };
    let log = fit(backbone, &mut att, &data.train, &data.stats, &cfg.loss, &sched)?;
    Ok((att, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrTrial {
    pub max_lr: f64,
    pub ad15: f64,
    pub ic15: f64,
    /// `IC(15%) − AD(15%)` on the validation split; higher is better.
    pub score: f64,
}

/// Trains one mechanism per entry of `cfg.lr_grid` and keeps the one
/// scoring best on the validation split (first on ties).
pub fn select_learning_rate(
    cfg: &Config,
    backbone: &Backbone,
    data: &DatasetSplits,
    seed: u64,
) -> Result<(Attention, TrainingLog, Vec<LrTrial>)> {
    let grid = if cfg.lr_grid.is_empty() { vec![cfg.schedule.max_lr] } else { cfg.lr_grid.clone() };
    let opts = cfg.evaluation.options;
    let val = EvalSet::new(backbone, &data.val, &data.stats, &opts)?;
    let mut best: Option<(Attention, TrainingLog, f64)> = None;
    let mut trials = Vec::new();
    for &max_lr in &grid {
        let sched = ScheduleConfig { max_lr, ..cfg.schedule.clone() };
        let (att, log) = train_attention(cfg, backbone, data, &cfg.attention, &sched, seed)?;
        let maps = explain_all(&Ttame(&att), backbone, &val, &opts)?;
        let r = ad_ic(backbone, &val, &maps, 15.0, &opts)?;
        let score = r.ic - r.ad;
        log::info!("max_lr {max_lr}: AD15 {:.2}, IC15 {:.2}", r.ad, r.ic);
        trials.push(LrTrial { max_lr, ad15: r.ad, ic15: r.ic, score });
        if best.as_ref().is_none_or(|b| score > b.2) {
            best = Some((att, log, score));
        }
    }
    let (att, log, _) = best.expect("non-empty grid");
    Ok((att, log, trials))
}

#[derive(Clone, Debug, Serialize)]
pub struct ExplainerReport {
    pub backbone: BackboneKind,
    pub trials: Vec<LrTrial>,
    pub final_epoch_loss: f64,
}

pub fn train_explainer(cfg: &Config, ws: &Workspace, kind: BackboneKind) -> Result<ExplainerReport> {
    let data = ws.load_data()?;
    let backbone = ws.load_backbone(kind)?;
    let (att, log, trials) = select_learning_rate(cfg, &backbone, &data, cfg.stage_seed(&format!("{kind}-ttame")))?;
    let mut w = ws.create(&ws.attention(kind))?;
    att.write_to(&mut w)?;
    std::io::Write::flush(&mut w)?;
    log.write_csv(ws.create(&ws.out.join(format!("{kind}_ttame_train.csv")))?)?;
    write_rows(&trials, ws.create(&ws.out.join(format!("{kind}_lr_search.csv")))?)?;
    Ok(ExplainerReport { backbone: kind, trials, final_epoch_loss: *log.epoch_losses().last().unwrap_or(&f64::NAN) })
}

fn find_sample(data: &DatasetSplits, id: u32) -> Result<&Sample> {
    data.train
        .iter()
        .chain(&data.val)
        .chain(&data.test)
        .find(|s| s.id == id)
        .ok_or_else(|| invalid(format!("no image with id {id}")))
}

/// Loads the attention mechanism when the explainer needs one.
fn attention_for(ws: &Workspace, kind: BackboneKind, explainer: ExplainerKind) -> Result<Option<Attention>> {
    match explainer {
        ExplainerKind::Ttame => ws.load_attention(kind).map(Some),
        _ => Ok(None),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExplainReport {
    pub image: u32,
    pub label: usize,
    pub predicted: usize,
    pub confidence: f64,
    pub class: usize,
    pub heatmap: PathBuf,
}

/// Explains one image of the dataset, by default for its predicted class.
pub fn explain(
    cfg: &Config,
    ws: &Workspace,
    kind: BackboneKind,
    explainer: ExplainerKind,
    image: u32,
    class: Option<usize>,
) -> Result<ExplainReport> {
    let data = ws.load_data()?;
    let backbone = ws.load_backbone(kind)?;
    let att = attention_for(ws, kind, explainer)?;
    let sample = find_sample(&data, image)?;
    // Test-mode crops are centred and draw nothing from the generator.
    let raw = crop_for(&sample.image, Mode::Test, &mut ChaCha8Rng::seed_from_u64(0))?;
    let x = standardize(&raw, &data.stats.mean, &data.stats.std)?;
    let (pred, _) = backbone.forward_with_features(&x)?;
    let class = class.unwrap_or(pred.class);
    if class >= backbone.num_classes() {
        return Err(invalid(format!("class {class} out of range for {} classes", backbone.num_classes())));
    }
    let set = Explainers { cfg, backbone: &backbone, attention: att.as_ref(), data: &data };
    let e = set.build(explainer)?;
    let (raw_b, x_b) = (Tensor::stack(&[raw])?, Tensor::stack(&[x])?);
    let maps =
        e.explain(&backbone, &ExplainBatch { raw: &raw_b, standardized: &x_b, classes: &[class], ids: &[image] })?;
    let heatmap = ws.out.join(format!("explain_{kind}_{}_{image}_c{class}.pgm", explainer.name()));
    let mut w = ws.create(&heatmap)?;
    write_pgm(&maps[0], &mut w)?;
    std::io::Write::flush(&mut w)?;
    Ok(ExplainReport { image, label: sample.label, predicted: pred.class, confidence: pred.confidence, class, heatmap })
}

fn test_subset<'a>(cfg: &Config, data: &'a DatasetSplits) -> &'a [Sample] {
    let n = cfg.evaluation.max_images.unwrap_or(data.test.len()).min(data.test.len());
    &data.test[..n]
}

/// AD/IC and/or ROAD of one explainer on the test split. `v` overrides the
/// configured thresholds of every requested measure.
pub fn evaluate(
    cfg: &Config,
    ws: &Workspace,
    kind: BackboneKind,
    explainer: ExplainerKind,
    measures: &[Measure],
    v: Option<&[f64]>,
) -> Result<Vec<MetricRow>> {
    let data = ws.load_data()?;
    let backbone = ws.load_backbone(kind)?;
    let att = attention_for(ws, kind, explainer)?;
    let opts = cfg.evaluation.options;
    let set = EvalSet::new(&backbone, test_subset(cfg, &data), &data.stats, &opts)?;
    let builder = Explainers { cfg, backbone: &backbone, attention: att.as_ref(), data: &data };
    let e = builder.build(explainer)?;
    let maps = explain_all(e.as_ref(), &backbone, &set, &opts)?;
    let (bname, ename) = (kind.name(), explainer.name());
    let mut rows = Vec::new();
    for m in measures {
        match m {
            Measure::Adic => {
                let vs = v.unwrap_or(&cfg.evaluation.adic_thresholds);
                let results = vs
                    .iter()
                    .map(|&t| Ok((t, ad_ic(&backbone, &set, &maps, t, &opts)?)))
                    .collect::<Result<Vec<_>>>()?;
                rows.extend(ad_ic_rows(bname, ename, &results));
            }
            Measure::Road => {
                let vs = v.unwrap_or(&cfg.evaluation.road_percentages);
                let road = RoadConfig {
                    seed: cfg.stage_seed("road") ^ cfg.evaluation.road.seed,
                    ..cfg.evaluation.road.clone()
                };
                let curves = road_curves(&backbone, &set, &maps, vs, &road, &opts)?;
                let (metrics, points) = road_rows(bname, ename, &curves);
                rows.extend(metrics);
                write_rows(&points, ws.create(&ws.out.join(format!("curves_{kind}_{ename}.csv")))?)?;
            }
        }
    }
    write_rows(&rows, ws.create(&ws.out.join(format!("metrics_{kind}_{ename}.csv")))?)?;
    Ok(rows)
}

/// Cascading randomization of the backbone and of the attention mechanism
/// for every configured seed.
pub fn sanity(cfg: &Config, ws: &Workspace, kind: BackboneKind) -> Result<Vec<SimilarityRow>> {
    let data = ws.load_data()?;
    let backbone = ws.load_backbone(kind)?;
    let att = ws.load_attention(kind)?;
    let n = cfg.sanity.images.min(data.test.len());
    let set = EvalSet::new(&backbone, &data.test[..n], &data.stats, &cfg.evaluation.options)?;
    let batch = ExplainBatch { raw: &set.raw, standardized: &set.standardized, classes: &set.classes, ids: &set.ids };
    let mut rows = Vec::new();
    for &seed in &cfg.sanity.seeds {
        let cascades = [
            ("backbone", cascade_randomize_backbone(&backbone, &Ttame(&att), &batch, seed)?),
            ("attention", cascade_randomize_attention(&backbone, &att, &batch, seed)?),
        ];
        for (name, steps) in cascades {
            rows.extend(similarity_rows(kind.name(), "ttame", name, seed, &steps)?);
            for (i, step) in steps.iter().enumerate() {
                for (map, id) in step.maps.iter().zip(&set.ids).take(cfg.sanity.heatmaps) {
                    let path = ws
                        .out
                        .join("sanity")
                        .join(kind.name())
                        .join(format!("{name}_s{seed}_{i:02}_{}_img{id}.pgm", step.stage));
                    let mut w = ws.create(&path)?;
                    write_pgm(map, &mut w)?;
                    std::io::Write::flush(&mut w)?;
                }
            }
        }
    }
    write_rows(&rows, ws.create(&ws.out.join(format!("sanity_{kind}.csv")))?)?;
    Ok(rows)
}

/// One ablation entry: an architecture variant, optionally trained with the
/// other backbone kind's masking rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub variant: Variant,
    pub masking: MaskingRule,
}

impl Ablation {
    pub fn name(&self) -> String {
        match self.masking {
            MaskingRule::Matched => self.variant.name().to_string(),
            MaskingRule::Swapped => format!("{}+swapped-masking", self.variant.name()),
        }
    }

    /// The configured ablation set.
    pub fn from_config(cfg: &Config) -> Vec<Ablation> {
        let mut out: Vec<Ablation> =
            cfg.ablation.variants.iter().map(|&variant| Ablation { variant, masking: MaskingRule::Matched }).collect();
        if cfg.ablation.swapped_masking {
            out.push(Ablation { variant: Variant::Full, masking: MaskingRule::Swapped });
        }
        out
    }
}

/// Trains every ablation entry for `cfg.ablation.epochs` epochs and scores
/// it with AD/IC on the test split. Rows are written as each entry finishes.
pub fn ablate(cfg: &Config, ws: &Workspace, kind: BackboneKind, entries: &[Ablation]) -> Result<Vec<MetricRow>> {
    let data = ws.load_data()?;
    let backbone = ws.load_backbone(kind)?;
    let opts = cfg.evaluation.options;
    let set = EvalSet::new(&backbone, test_subset(cfg, &data), &data.stats, &opts)?;
    let path = ws.out.join(format!("ablation_{kind}.csv"));
    let mut out = csv::Writer::from_writer(ws.create(&path)?);
    let mut rows = Vec::new();
    for entry in entries {
        let sched = ScheduleConfig { epochs: cfg.ablation.epochs, masking: entry.masking, ..cfg.schedule.clone() };
        let seed = cfg.stage_seed(&format!("{kind}-ablation-{}", entry.name()));
        let (att, _) = train_attention(cfg, &backbone, &data, &entry.variant.config(), &sched, seed)?;
        let maps = explain_all(&Ttame(&att), &backbone, &set, &opts)?;
        let results = cfg
            .evaluation
            .adic_thresholds
            .iter()
            .map(|&t| Ok((t, ad_ic(&backbone, &set, &maps, t, &opts)?)))
            .collect::<Result<Vec<_>>>()?;
        let entry_rows = ad_ic_rows(kind.name(), &format!("ttame:{}", entry.name()), &results);
        for r in &entry_rows {
            out.serialize(r)?;
        }
        out.flush()?;
        rows.extend(entry_rows);
    }
    Ok(rows)
}
