use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Backbone;
use crate::data::{preprocess, test_batch, ChannelStats, DatasetSplits, Mode, Sample};
use crate::error::{invalid, Error, Result};
use crate::optim::{Adam, OneCycle};
use crate::tensor::{standardize, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 30, lr: 3e-3, batch_size: 32, weight_decay: 1e-4, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Trains `b` with Adam under a one-cycle schedule and freezes it.
///
/// `on_epoch` sees each report as it is produced; returning `false` stops
/// early.
pub fn pretrain_backbone(
    b: &mut Backbone,
    data: &DatasetSplits,
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(&EpochReport) -> bool,
) -> Result<Vec<EpochReport>> {
    if b.is_frozen() {
        return Err(invalid("backbone is already trained and frozen"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(invalid("pretraining needs positive epochs, batch size and learning rate"));
    }
    if data.train.is_empty() {
        return Err(invalid("empty training split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let schedule = OneCycle::new(cfg.lr, cfg.epochs * steps_per_epoch);
    let mut opt = Adam::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut reports = Vec::new();
    let mut step = 0;
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images = chunk
                .iter()
                .map(|&i| preprocess(&data.train[i], Mode::Train, &data.stats, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.train[i].label).collect();
            tape.clear();
            let x = tape.constant(Tensor::stack(&images)?);
            let out = b.forward(&mut tape, x, true)?;
            let loss = tape.cross_entropy(out.logits, &labels);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi, detail: format!("cross-entropy {value}") });
            }
            tape.backward(loss)?;
            let grads = out.bound.grads(&tape, b.params());
            let preds = super::predictions(tape.value(out.logits));
            correct += preds.iter().zip(&labels).filter(|(p, l)| p.class == **l).count();
            loss_sum += value * chunk.len() as f64;
            opt.step(b.params_mut()?, &grads, schedule.lr(step));
            step += 1;
        }
        let report = EpochReport {
            epoch,
            loss: loss_sum / data.train.len() as f64,
            train_accuracy: correct as f64 / data.train.len() as f64,
            val_accuracy: accuracy(b, &data.val, &data.stats)?,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train {:.3} val {:.3}",
            report.loss,
            report.train_accuracy,
            report.val_accuracy
        );
        let keep_going = on_epoch(&report);
        reports.push(report);
        if !keep_going {
            break;
        }
    }
    b.freeze();
    b.reset_forward_passes();
    Ok(reports)
}

/// Fraction of `samples` classified correctly from their test-mode crops.
pub fn accuracy(b: &Backbone, samples: &[Sample], stats: &ChannelStats) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("accuracy of an empty set"));
    }
    let mut correct = 0;
    for chunk in samples.chunks(64) {
        let x = standardize(&test_batch(chunk)?, &stats.mean, &stats.std)?;
        let preds = b.predict(&x)?;
        correct += preds.iter().zip(chunk).filter(|(p, s)| p.class == s.label).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}
