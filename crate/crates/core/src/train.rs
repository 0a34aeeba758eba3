//! Shared training machinery: Adam, epoch history and seeded batching.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Grads, StatUpdate, BN_MOMENTUM};
use crate::params::ParamGroup;

/// Adam with the Keras defaults (`beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-7`).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(lr: f64, groups: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            step: 0,
            first: vec![None; groups],
            second: vec![None; groups],
        }
    }

    /// Applies one update. Groups that are frozen or have no gradient are untouched.
    pub fn step(&mut self, groups: &mut [ParamGroup], grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let corr1 = 1.0 - self.beta1.powi(t);
        let corr2 = 1.0 - self.beta2.powi(t);
        for (i, (group, grad)) in groups.iter_mut().zip(&grads.groups).enumerate() {
            let Some(grad) = grad else { continue };
            if !group.trainable || group.kind.is_statistic() {
                continue;
            }
            let m = self.first[i].get_or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.second[i].get_or_insert_with(|| vec![0.0; grad.len()]);
            for (((p, g), m), v) in group.data.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Folds batch statistics into the running mean/variance groups.
pub(crate) fn commit_stats(groups: &mut [ParamGroup], updates: &[StatUpdate]) {
    for u in updates {
        for (r, b) in groups[u.mean_group].data.iter_mut().zip(&u.batch_mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in groups[u.var_group].data.iter_mut().zip(&u.batch_var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch index across the whole run.
    pub epoch: usize,
    /// Fine-tuning stage the epoch belongs to, when training is staged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<usize>,
    pub train_loss: f64,
    pub val_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_auc: Option<f64>,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were retained (lowest validation loss).
    pub best_epoch: Option<usize>,
}

impl TrainingHistory {
    pub fn push(&mut self, record: EpochRecord) {
        debug_assert!(self.records.last().map_or(true, |r| r.epoch < record.epoch));
        self.records.push(record);
    }

    pub fn first_train_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.train_loss)
    }

    pub fn last_train_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_loss)
    }

    /// Losses and metrics without wall-clock, for determinism comparisons.
    pub fn numeric_trace(&self) -> Vec<(usize, f64, f64, Option<f64>, Option<f64>)> {
        self.records
            .iter()
            .map(|r| (r.epoch, r.train_loss, r.val_loss, r.val_accuracy, r.val_auc))
            .collect()
    }
}

/// Tracks the best validation loss and the parameters that produced it.
pub(crate) struct BestKeeper {
    pub best_loss: f64,
    pub best_epoch: Option<usize>,
    pub best_groups: Option<Vec<ParamGroup>>,
}

impl BestKeeper {
    pub fn new() -> Self {
        BestKeeper {
            best_loss: f64::INFINITY,
            best_epoch: None,
            best_groups: None,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64, groups: &[ParamGroup]) {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = Some(epoch);
            self.best_groups = Some(groups.to_vec());
        }
    }
}

/// Shuffled mini-batches of indices for one epoch.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub(crate) struct Stopwatch(Instant);

impl Stopwatch {
    pub fn start() -> Self {
        Stopwatch(Instant::now())
    }

    pub fn secs(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}
