//! Minibatch training and top-k evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::backbone::ModuleGraph;
use crate::error::{Error, Result};
use crate::harness::data::{Dataset, Split};
use crate::harness::optim::{adamw_step, AdamWConfig, OptimizerState};
use crate::init::{derive_seed, rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub top1: f64,
    pub top5: f64,
}

/// Everything a training run reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub method: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl MetricsLog {
    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    /// Mean training loss over the last epoch.
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }

    pub fn final_accuracy(&self) -> Option<(f64, f64)> {
        self.epochs.last().map(|e| (e.top1, e.top5))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds the per-epoch minibatch shuffle.
    pub seed: u64,
}

/// Train the graph's trainable parameters with AdamW on cross-entropy,
/// logging each step and evaluating on `data.eval` after every epoch.
pub fn train(graph: &mut ModuleGraph, data: &Dataset, opts: &TrainOptions) -> Result<MetricsLog> {
    if opts.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let multiplier = graph.method().map_or(1.0, |m| m.lr_multiplier);
    let mut log = MetricsLog {
        method: graph.method().map_or_else(|| "full".to_string(), |m| m.label()),
        seed: opts.seed,
        ..Default::default()
    };
    if opts.epochs == 0 {
        return Ok(log);
    }
    if data.train.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut state = OptimizerState::new(graph.params(), opts.optimizer, multiplier)?;
    let mut shuffle = rng(derive_seed(opts.seed, "shuffle"));
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let (images, labels) = data.train.batch(chunk)?;
            let loss = train_step(graph, &mut state, &images, &labels)?;
            log.steps.push(StepRecord {
                step: state.step,
                loss,
                lr: opts.optimizer.lr,
            });
            total += loss;
            batches += 1;
        }
        log.epoch_losses.push(total / batches as f64);
        let acc = evaluate(graph, &data.eval, opts.batch_size)?;
        log.epochs.push(EpochRecord {
            epoch: epoch as u64,
            top1: acc.top1,
            top5: acc.top5,
        });
    }
    Ok(log)
}

/// Forward, backward and one optimizer update on a single batch; returns the
/// batch loss.
pub fn train_step(
    graph: &mut ModuleGraph,
    state: &mut OptimizerState,
    images: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let fwd = graph.forward(&mut tape, images)?;
    let loss = tape.cross_entropy(fwd.logits, labels)?;
    let value = tape.value(loss).item()?;
    tape.backward(loss)?;
    let store = graph.params_mut();
    store.zero_grads();
    store.accumulate_grads(&tape, &fwd.params)?;
    adamw_step(store, state)?;
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
}

/// Top-1 and top-min(5, k) accuracy of `logits [n, k]`. A class outranks the
/// label when its logit is larger, or equal with a lower index.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize]) -> Result<Accuracy> {
    if labels.is_empty() {
        return Err(Error::EmptySplit);
    }
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits {shape:?} for {} labels",
            labels.len()
        )));
    }
    let k = shape[1];
    let top = k.min(5);
    let (mut hit1, mut hit5) = (0usize, 0usize);
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        if y >= k {
            return Err(Error::InvalidLabel { label: y, classes: k });
        }
        let ly = row[y];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > ly || (v == ly && j < y))
            .count();
        hit1 += (rank < 1) as usize;
        hit5 += (rank < top) as usize;
    }
    let n = labels.len() as f64;
    Ok(Accuracy {
        top1: hit1 as f64 / n,
        top5: hit5 as f64 / n,
    })
}

/// Accuracy of the graph on a split, predicted in batches of `batch_size`.
pub fn evaluate(graph: &ModuleGraph, split: &Split, batch_size: usize) -> Result<Accuracy> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    let k = graph.config().num_classes;
    let mut all = Vec::with_capacity(split.len() * k);
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, _) = split.batch(chunk)?;
        all.extend_from_slice(graph.predict(&images)?.data());
    }
    topk_accuracy(&Tensor::from_vec(&[split.len(), k], all)?, &split.labels)
}
