use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_loss, select_masks, LossConfig, MaskingRule};
use crate::attention::Attention;
use crate::backbone::Backbone;
use crate::data::{crop_for, ChannelStats, Mode, Sample};
use crate::error::{invalid, Error, Result};
use crate::optim::{OneCycle, Sgd};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub max_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub warmup_fraction: f64,
    pub start_fraction: f64,
    pub final_fraction: f64,
    /// Maps per image in the regularizer (`B`), the model truth included.
    pub masks_per_image: usize,
    pub masking: MaskingRule,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            max_lr: 0.1,
            epochs: 4,
            batch_size: 16,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            warmup_fraction: 0.3,
            start_fraction: 0.04,
            final_fraction: 1e-4,
            masks_per_image: 4,
            masking: MaskingRule::Matched,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.masks_per_image == 0 {
            return Err(invalid("epochs, batch size and maps per image must be positive"));
        }
        if !(self.max_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("need a positive learning rate and momentum in [0, 1)"));
        }
        let fractions = [self.warmup_fraction, self.start_fraction, self.final_fraction];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(invalid("schedule fractions must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn schedule(&self, total_steps: usize) -> OneCycle {
        OneCycle {
            max_lr: self.max_lr,
            total_steps,
            warmup_fraction: self.warmup_fraction,
            start_fraction: self.start_fraction,
            final_fraction: self.final_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub tv: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainingLog {
    /// Mean step loss of each epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let epochs = self.rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let rows: Vec<_> = self.rows.iter().filter(|r| r.epoch == e).collect();
                rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64
            })
            .collect()
    }

    pub fn write_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Trains `att` on `train` with SGD and a one-cycle schedule.
pub fn fit(
    backbone: &Backbone,
    att: &mut Attention,
    train: &[Sample],
    stats: &ChannelStats,
    loss: &LossConfig,
    sched: &ScheduleConfig,
) -> Result<TrainingLog> {
    fit_with(backbone, att, train, stats, loss, sched, |_, _| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with(
    backbone: &Backbone,
    att: &mut Attention,
    train: &[Sample],
    stats: &ChannelStats,
    loss: &LossConfig,
    sched: &ScheduleConfig,
    mut on_epoch: impl FnMut(usize, &Attention),
) -> Result<TrainingLog> {
    loss.validate()?;
    sched.validate()?;
    if train.is_empty() {
        return Err(invalid("empty training split"));
    }
    if sched.masks_per_image > att.num_classes() {
        return Err(invalid(format!("{} maps per image exceed {} classes", sched.masks_per_image, att.num_classes())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let steps_per_epoch = train.len().div_ceil(sched.batch_size);
    let schedule = sched.schedule(sched.epochs * steps_per_epoch);
    let mut opt = Sgd::new(sched.momentum, sched.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog::default();
    let mut tape = Tape::new();
    let num_classes = att.num_classes();
    let mut step = 0;
    for epoch in 0..sched.epochs {
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(sched.batch_size).enumerate() {
            let crops =
                chunk.iter().map(|&i| crop_for(&train[i].image, Mode::Train, &mut rng)).collect::<Result<Vec<_>>>()?;
            let raw = Tensor::stack(&crops)?;
            tape.clear();
            let out = batch_loss(&mut tape, backbone, att, &raw, stats, loss, sched.masking, |_, y| {
                select_masks(num_classes, y, sched.masks_per_image, &mut rng)
            })?;
            let value = tape.value(out.terms.total).item();
            if !value.is_finite() {
                let first = train[chunk[0]].id;
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    detail: format!("loss {value} (batch starts at image id {first})"),
                });
            }
            tape.backward(out.terms.total)?;
            let grads = out.bound.grads(&tape, att.params());
            let lr = schedule.lr(step);
            opt.step(att.params_mut(), &grads, lr);
            att.update_running(&out.batch_stats);
            log.rows.push(TrainLogRow {
                epoch,
                step,
                lr,
                loss: value,
                ce: tape.value(out.terms.ce).item(),
                tv: tape.value(out.terms.tv).item(),
            });
            step += 1;
        }
        let losses = log.epoch_losses();
        log::info!("attention epoch {epoch}: loss {:.4}", losses[epoch]);
        on_epoch(epoch, att);
    }
    Ok(log)
}
