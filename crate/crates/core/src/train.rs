//! SGD training loop, learning-rate schedule and gradient clipping.

use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use crate::corpus::{make_batches, sequential_batches, NliExample};
use crate::error::{Error, Result};
use crate::gradcheck::Parameterized;
use crate::head::predict;
use crate::model::Model;
use crate::tensor::NumArray;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epoch_decay: f64,
    pub drop_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub min_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            epoch_decay: 0.99,
            drop_decay: 0.2,
            clip_norm: 5.0,
            batch_size: 64,
            max_epochs: 20,
            min_lr: 1e-5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x <= 1.0;
        if !in_unit(self.epoch_decay) || !in_unit(self.drop_decay) {
            return Err(Error::Config(format!(
                "decay factors must lie in (0, 1], got epoch_decay={} drop_decay={}",
                self.epoch_decay, self.drop_decay
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.lr0 >= 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!("lr0 must be finite and non-negative, got {}", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.min_lr >= 0.0) {
            return Err(Error::Config(format!("min_lr must be non-negative, got {}", self.min_lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub next_lr: f64,
}

/// Scales all gradients by `max_norm / g` when the global L2 norm `g`
/// exceeds `max_norm`. Returns `g`.
pub fn clip_global_norm(grads: &mut [NumArray], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = grads.iter().map(NumArray::sum_squares).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    Ok(norm)
}

/// `p ← p − lr·g` for every parameter.
pub fn sgd_step<M: Parameterized + ?Sized>(model: &mut M, grads: &[NumArray], lr: f64) -> Result<()> {
    let mut params = model.params_mut();
    if params.len() != grads.len() {
        return Err(Error::shape("sgd_step", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
        for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * d;
        }
    }
    Ok(())
}

/// Next learning rate. A drop is strict: equal accuracies count as no drop.
pub fn lr_update(cfg: &TrainConfig, lr: f64, prev_val_acc: Option<f64>, new_val_acc: f64) -> f64 {
    match prev_val_acc {
        Some(prev) if new_val_acc < prev => lr * cfg.drop_decay,
        _ => lr * cfg.epoch_decay,
    }
}

pub fn evaluate_accuracy(model: &Model, examples: &[NliExample], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluate_accuracy"));
    }
    let mut correct = 0usize;
    for batch in sequential_batches(examples, batch_size)? {
        let out = model.forward_batch(&batch, false)?;
        correct += count_correct(&out.logits, &batch.label_indices());
    }
    Ok(correct as f64 / examples.len() as f64)
}

fn count_correct(logits: &NumArray, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| predict(logits.row(i)).index() == y)
        .count()
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best_model: Model,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub reports: Vec<EpochReport>,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

/// Trains `model` in place and returns the best-on-validation copy.
///
/// `on_epoch` sees each report as soon as it is complete and may stop
/// training early by returning `ControlFlow::Break`.
pub fn fit(
    model: &mut Model,
    train: &[NliExample],
    val: &[NliExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport) -> ControlFlow<()>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("fit: training set"));
    }
    if val.is_empty() {
        return Err(Error::Empty("fit: validation set"));
    }
    let mut lr = cfg.lr0;
    let mut prev_acc = None;
    let mut best: Option<(f64, usize, Model)> = None;
    let mut reports = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let batches = make_batches(train, cfg.batch_size, epoch_seed(cfg.seed, epoch))?;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, batch) in batches.iter().enumerate() {
            let diverged = |loss: f64| Error::Divergence { epoch, batch: b, loss };
            let mut out = match model.forward_batch(batch, true) {
                Ok(out) => out,
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            if !out.loss.is_finite() {
                return Err(diverged(out.loss));
            }
            loss_sum += out.loss * batch.len() as f64;
            correct += count_correct(&out.logits, &batch.label_indices());
            match clip_global_norm(&mut out.grads, cfg.clip_norm) {
                Ok(_) => {}
                Err(Error::NonFiniteGradient) => return Err(diverged(out.loss)),
                Err(e) => return Err(e),
            }
            sgd_step(model, &out.grads, lr)?;
        }
        let val_acc = evaluate_accuracy(model, val, cfg.batch_size)?;
        let next_lr = lr_update(cfg, lr, prev_acc, val_acc);
        let report = EpochReport {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
            lr,
            next_lr,
        };
        let flow = on_epoch(&report);
        reports.push(report);

        if best.as_ref().map_or(true, |(acc, _, _)| val_acc > *acc) {
            best = Some((val_acc, epoch, model.clone()));
        }
        prev_acc = Some(val_acc);
        lr = next_lr;
        if flow.is_break() || lr < cfg.min_lr {
            break;
        }
    }
    let (best_val_acc, best_epoch, best_model) = best.expect("at least one epoch ran");
    Ok(FitOutcome {
        best_model,
        best_val_acc,
        best_epoch,
        reports,
    })
}
