//! First-order optimizers and the one-cycle learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::tensor::Tensor;

/// SGD with classical momentum and optional L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: ParamSet,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: ParamSet::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        for (name, g) in grads.iter() {
            let p = params.get_mut(name);
            if self.velocity.try_get(name).is_none() {
                self.velocity.insert(name, Tensor::zeros(p.shape().to_vec()));
            }
            let v = self.velocity.get_mut(name);
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let d = gv + self.weight_decay * *pv;
                *vv = self.momentum * *vv + d;
                *pv -= lr * *vv;
            }
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u32,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: ParamSet::new(), v: ParamSet::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name);
            if self.m.try_get(name).is_none() {
                self.m.insert(name, Tensor::zeros(p.shape().to_vec()));
                self.v.insert(name, Tensor::zeros(p.shape().to_vec()));
            }
            let decay = if p.ndim() > 1 { self.weight_decay } else { 0.0 };
            let m = self.m.get_mut(name).data_mut();
            let v = self.v.get_mut(name).data_mut();
            for (i, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *pv -= lr * (update + decay * *pv);
            }
        }
    }
}

/// One-cycle schedule: linear warm-up from `start_fraction·max_lr` to
/// `max_lr`, then cosine decay to `final_fraction·max_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub start_fraction: f64,
    pub final_fraction: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        OneCycle { max_lr, total_steps, warmup_fraction: 0.3, start_fraction: 0.04, final_fraction: 1e-4 }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.max_lr;
        }
        let last = (self.total_steps - 1) as f64;
        let s = (step as f64).min(last);
        let peak = self.warmup_fraction * last;
        let start = self.start_fraction * self.max_lr;
        let end = self.final_fraction * self.max_lr;
        if s <= peak && peak > 0.0 {
            start + (self.max_lr - start) * s / peak
        } else {
            let p = if last > peak { (s - peak) / (last - peak) } else { 1.0 };
            end + (self.max_lr - end) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        }
    }
}
