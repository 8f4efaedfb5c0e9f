//! AdamW training on synthetic clouds.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Task;
use super::net::{argmax_rows, derive_seed, Model};
use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tape, Tensor};
use crate::par;
use crate::pointio::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    AdamW,
}

impl FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(Optimizer::AdamW),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Stop after the first epoch whose test accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
            optimizer: Optimizer::AdamW,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Cosine decay from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step as f64 / total as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * t).cos())
}

/// Adam with decoupled weight decay. Decay applies to weight matrices and
/// kernels only, not to norms, biases or the state-matrix logarithm.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    decay: Vec<bool>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            decay: store
                .ids()
                .map(|id| store.get(id).rank() >= 2 && !store.name(id).ends_with("a_log"))
                .collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in store.values_mut().iter_mut().enumerate() {
            let decay = if self.decay[i] { lr * self.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i].data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w -= lr * update + decay * *w;
            }
        }
    }
}

/// Training targets of `pc` for the model's task.
pub fn targets(task: Task, pc: &PointCloud) -> Result<Vec<usize>> {
    match task {
        Task::Recognition => pc
            .class_id
            .map(|c| vec![c])
            .ok_or_else(|| Error::Contract("recognition needs a class id per cloud".into())),
        Task::Segmentation => pc
            .labels
            .clone()
            .ok_or_else(|| Error::Contract("segmentation needs per-point labels".into())),
    }
}

pub struct SampleOutcome {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub correct: usize,
    pub total: usize,
}

/// Loss, parameter gradients and accuracy counts of one cloud.
pub fn sample_gradients(model: &Model, pc: &PointCloud, plan_seed: u64) -> Result<SampleOutcome> {
    let want = targets(model.config().task, pc)?;
    let tape = Tape::new();
    let b = model.store.bind(&tape);
    let logits = model.forward(&tape, &b, pc, plan_seed)?;
    let loss = tape.cross_entropy(logits, &want)?;
    let pred = argmax_rows(&tape.value(logits));
    let correct = pred.iter().zip(&want).filter(|(p, w)| p == w).count();
    let value = tape.value(loss).item();
    let grads = tape.grad(loss, b.vars())?;
    Ok(SampleOutcome {
        loss: value,
        grads,
        correct,
        total: want.len(),
    })
}

/// Fraction of correct predictions over `set` in evaluation mode.
pub fn accuracy(model: &Model, set: &[PointCloud]) -> Result<f64> {
    let counts = par::map_range(set.len(), |i| -> Result<(usize, usize)> {
        let want = targets(model.config().task, &set[i])?;
        let pred = model.classify(&set[i])?;
        Ok((pred.iter().zip(&want).filter(|(p, w)| p == w).count(), want.len()))
    });
    let (mut hit, mut total) = (0, 0);
    for c in counts {
        let (h, t) = c?;
        hit += h;
        total += t;
    }
    Ok(hit as f64 / total.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_test_acc: f64,
    /// Parameters at the best epoch, in store order.
    pub best_params: Vec<Tensor>,
}

impl TrainReport {
    pub fn final_metrics(&self) -> Option<&EpochMetrics> {
        self.history.last()
    }
}

/// Mean loss and summed gradients over one batch. Per-sample work may run
/// in parallel; the reduction is always in sample order.
fn batch_step(model: &Model, batch: &[&PointCloud], seeds: &[u64]) -> Result<(f64, Vec<Tensor>, usize, usize)> {
    let outcomes = par::map_range(batch.len(), |j| sample_gradients(model, batch[j], seeds[j]));
    let mut loss = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    let (mut correct, mut total) = (0, 0);
    for o in outcomes {
        let o = o?;
        loss += o.loss;
        correct += o.correct;
        total += o.total;
        match &mut grads {
            None => grads = Some(o.grads),
            Some(acc) => acc.iter_mut().zip(&o.grads).for_each(|(a, g)| a.add_assign(g)),
        }
    }
    let mut grads = grads.expect("non-empty batch");
    let scale = 1.0 / batch.len() as f64;
    grads.iter_mut().for_each(|g| g.scale_assign(scale));
    Ok((loss * scale, grads, correct, total))
}

/// Train `model` in place. `on_epoch` sees every epoch's metrics as soon as
/// they exist. Training shuffles the data and draws a fresh serialization
/// plan per sample and step, all derived from `tc.seed`.
pub fn train_toy(
    model: &mut Model,
    train: &[PointCloud],
    test: &[PointCloud],
    tc: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    tc.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Contract("training needs non-empty train and test sets".into()));
    }
    if model.config().num_classes < 2 {
        return Err(Error::Config("training needs at least 2 classes".into()));
    }
    let mut opt = AdamW::new(&model.store, tc.weight_decay);
    let steps_per_epoch = train.len().div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * tc.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport {
        history: Vec::new(),
        best_epoch: 0,
        best_test_acc: f64::NEG_INFINITY,
        best_params: model.store.values().to_vec(),
    };
    let mut step = 0;
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &[epoch as u64])));
        let (mut loss_sum, mut correct, mut total) = (0.0, 0, 0);
        for (b, idx) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<&PointCloud> = idx.iter().map(|&i| &train[i]).collect();
            let seeds: Vec<u64> = idx
                .iter()
                .map(|&i| derive_seed(tc.seed, &[epoch as u64, b as u64, i as u64]))
                .collect();
            let (loss, grads, c, t) = batch_step(model, &batch, &seeds)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, step, loss });
            }
            opt.step(&mut model.store, &grads, cosine_lr(tc.lr, step, total_steps));
            step += 1;
            loss_sum += loss * batch.len() as f64;
            correct += c;
            total += t;
        }
        let metrics = EpochMetrics {
            epoch,
            train_acc: correct as f64 / total as f64,
            test_acc: accuracy(model, test)?,
            loss: loss_sum / train.len() as f64,
        };
        on_epoch(&metrics);
        report.history.push(metrics);
        if metrics.test_acc > report.best_test_acc {
            report.best_test_acc = metrics.test_acc;
            report.best_epoch = epoch;
            report.best_params = model.store.values().to_vec();
        }
        if tc.target_accuracy.is_some_and(|t| metrics.test_acc >= t) {
            break;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub acc: f64,
}

/// Fit a single cloud with a fixed serialization plan and constant rate.
/// Stops once the cloud is classified perfectly, or after `max_steps`.
/// Entry `i` of the result describes the model after `i` updates.
pub fn overfit(
    model: &mut Model,
    pc: &PointCloud,
    max_steps: usize,
    lr: f64,
    stop_when_fit: bool,
) -> Result<Vec<StepMetrics>> {
    let mut opt = AdamW::new(&model.store, 0.0);
    let seed = model.config().shuffle_seed;
    let mut history = Vec::with_capacity(max_steps + 1);
    for step in 0..=max_steps {
        let o = sample_gradients(model, pc, seed)?;
        if !o.loss.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                step,
                loss: o.loss,
            });
        }
        let acc = o.correct as f64 / o.total as f64;
        history.push(StepMetrics {
            step,
            loss: o.loss,
            acc,
        });
        if step == max_steps || (stop_when_fit && acc == 1.0) {
            break;
        }
        opt.step(&mut model.store, &o.grads, lr);
    }
    Ok(history)
}
