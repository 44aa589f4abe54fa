//! Optimisation loop, run configuration and checkpoints.

mod checkpoint;
mod config;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointHeader, ParamEntry, CHECKPOINT_MAGIC};
pub use config::{DataSource, EvalConfig, Normalization, RunConfig, TrainConfig, KEYS};
pub use optim::{clip_grad_norm, lr_at, steps_per_epoch, GradAccumulator, Sgd};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{epoch_order, Dataset, Phase};
use crate::error::{HerbsError, Result};
use crate::net::{ForwardOptions, HerbsNet, LossBreakdown};

/// Means over one epoch's samples plus the schedule values it ran with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken once the epoch finished.
    pub step: usize,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    pub temperature: f64,
    pub loss_m: f64,
    pub loss_d: f64,
    pub loss_l: f64,
    pub loss_r: f64,
    pub loss_heads: f64,
    pub loss_bs: f64,
    pub loss_herbs: f64,
    /// Fused-prediction accuracy on the augmented training batches.
    pub train_acc: f64,
    pub seconds: f64,
}

pub struct Trainer {
    pub net: HerbsNet,
    pub cfg: TrainConfig,
    pub opt: Sgd,
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
}

impl Trainer {
    pub fn new(net: HerbsNet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Sgd::new(&net.store, cfg.momentum, cfg.weight_decay);
        Ok(Self { net, cfg, opt, epoch: 0, step: 0 })
    }

    /// Continues from a saved state; momentum buffers included.
    pub fn resume(net: HerbsNet, cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(net, cfg)?;
        if let Some(v) = &ckpt.velocity {
            if v.len() != t.opt.velocity.len() {
                return Err(HerbsError::Checkpoint("momentum buffer count differs from parameters".into()));
            }
            t.opt.velocity = v.clone();
        }
        t.epoch = ckpt.header.epoch;
        t.step = ckpt.header.step;
        Ok(t)
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.cfg.epochs * steps_per_epoch(samples, self.cfg.batch_size, self.cfg.accum_steps)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(HerbsError::Empty("training set".into()));
        }
        let start = Instant::now();
        let epoch = self.epoch;
        let total = self.total_steps(data.len());
        let aug = self.cfg.augment();
        let order = epoch_order(data.len(), self.cfg.seed, epoch as u64);
        let chunks: Vec<&[usize]> = order.chunks(self.cfg.batch_size).collect();
        let first_lr = lr_at(self.step.min(total), total, self.cfg.lr)?;

        let mut acc = GradAccumulator::new();
        let mut sums = LossBreakdown::default();
        let mut correct = 0usize;
        for (micro, idx) in chunks.iter().enumerate() {
            let batch = data.batch(idx, Phase::Train, &aug, self.cfg.seed, epoch as u64)?;
            let opts = ForwardOptions { epoch: epoch as u64, ..Default::default() };
            let (out, grads) = self.net.loss_and_grads(&batch, opts)?;
            let losses = out.losses.expect("training pass computes losses");
            if let Some(component) = losses.first_non_finite() {
                return Err(HerbsError::NonFiniteLoss { component, epoch, step: micro });
            }
            if grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(HerbsError::NonFiniteLoss { component: "gradient", epoch, step: micro });
            }
            let n = idx.len() as f64;
            add_scaled(&mut sums, &losses, n);
            sums.temperature = losses.temperature;
            sums.lambda_r = losses.lambda_r;
            let labels = batch.labels.as_deref().unwrap_or_default();
            correct += out.bundle.predictions().iter().zip(labels).filter(|(p, l)| p == l).count();

            acc.add(grads);
            if acc.len() == self.cfg.accum_steps || micro + 1 == chunks.len() {
                let mut mean = acc.take_mean().expect("non-empty window");
                if let Some(max) = self.cfg.grad_clip {
                    clip_grad_norm(&mut mean, max);
                }
                let lr = lr_at(self.step.min(total), total, self.cfg.lr)?;
                self.opt.step(&mut self.net.store, &mean, lr);
                self.step += 1;
                if !self.net.store.all_finite() {
                    return Err(HerbsError::NonFiniteParams);
                }
            }
        }
        self.epoch += 1;
        let n = data.len() as f64;
        Ok(EpochRecord {
            epoch,
            step: self.step,
            lr: first_lr,
            temperature: sums.temperature,
            loss_m: sums.loss_m / n,
            loss_d: sums.loss_d / n,
            loss_l: sums.loss_l / n,
            loss_r: sums.loss_r / n,
            loss_heads: sums.loss_heads / n,
            loss_bs: sums.loss_bs / n,
            loss_herbs: sums.loss_herbs / n,
            train_acc: correct as f64 / n,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs the remaining epochs, handing each record to `on_epoch`.
    pub fn fit(
        &mut self,
        data: &Dataset,
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let mut records = Vec::new();
        while !self.finished() {
            let rec = self.run_epoch(data)?;
            on_epoch(self, &rec)?;
            records.push(rec);
        }
        Ok(records)
    }
}

fn add_scaled(acc: &mut LossBreakdown, l: &LossBreakdown, w: f64) {
    acc.loss_m += w * l.loss_m;
    acc.loss_d += w * l.loss_d;
    acc.loss_l += w * l.loss_l;
    acc.loss_r += w * l.loss_r;
    acc.loss_heads += w * l.loss_heads;
    acc.loss_bs += w * l.loss_bs;
    acc.loss_herbs += w * l.loss_herbs;
}
