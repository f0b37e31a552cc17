//! Loss, the gradient-descent update and the local training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelParams, Network};
use crate::dataset::{ClientDataset, Split};
use crate::error::{Error, Result};
use crate::label::{StabilityLabel, CLASS_COUNT};
use crate::seed::derive_seed;

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean (optionally class-weighted) cross-entropy over a batch of probability rows.
pub fn loss(probs: &[f64], labels: &[StabilityLabel], class_weights: Option<&[f64; CLASS_COUNT]>) -> Result<f64> {
    if probs.len() != labels.len() * CLASS_COUNT {
        return Err(Error::Shape(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(n, l)| {
            let w = class_weights.map_or(1.0, |w| w[l.index()]);
            -w * probs[n * CLASS_COUNT + l.index()].max(PROB_FLOOR).ln()
        })
        .sum();
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub class_weights: Option<[f64; CLASS_COUNT]>,
    /// Index of the first epoch in a longer schedule. Each epoch's shuffle and
    /// dropout stream is seeded from `(seed, epoch_offset + e)`.
    pub epoch_offset: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            local_epochs: 8,
            batch_size: 64,
            seed: 0,
            class_weights: None,
            epoch_offset: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.local_epochs == 0 {
            return Err(Error::invalid("local_epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invalid("class weights must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    /// Number of parameter updates applied so far.
    pub iteration: u64,
}

/// `θ ← θ − lr · grad`. Rejects non-finite gradients before touching `params`.
pub fn sgd_step(params: &mut ModelParams, grad: &[f64], learning_rate: f64, state: &mut TrainState) -> Result<()> {
    if grad.len() != params.values.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, parameters {}",
            grad.len(),
            params.values.len()
        )));
    }
    if let Some((i, g)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {i} is {g} at iteration {}",
            state.iteration
        )));
    }
    for (p, g) in params.values.iter_mut().zip(grad) {
        *p -= learning_rate * g;
    }
    state.iteration += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// `NaN` when the dataset has no validation split.
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub epochs: Vec<EpochMetrics>,
    pub state: TrainState,
}

impl TrainOutcome {
    pub fn final_val_accuracy(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.val_accuracy)
    }
}

/// Runs `cfg.local_epochs` epochs of shuffled mini-batch SGD on the training split.
pub fn train_local(
    net: &Network,
    params_in: &ModelParams,
    data: &ClientDataset,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.shape.len() != net.input_len() {
        return Err(Error::Shape(format!(
            "dataset windows hold {} features, network expects {}",
            data.shape.len(),
            net.input_len()
        )));
    }
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::invalid(format!("client {} has an empty training split", data.client_id)));
    }
    let has_val = !data.indices(Split::Validation).is_empty();
    let weights = cfg.class_weights.as_ref();
    let mut params = params_in.clone();
    let width = net.input_len();
    let mut inputs = vec![0.0; cfg.batch_size * width];
    let mut labels = Vec::with_capacity(cfg.batch_size);
    let mut epochs = Vec::with_capacity(cfg.local_epochs);

    for e in 0..cfg.local_epochs {
        let global_epoch = cfg.epoch_offset + e;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, global_epoch as u64));
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            labels.clear();
            for (k, &i) in chunk.iter().enumerate() {
                data.normalized_into(i, &mut inputs[k * width..(k + 1) * width]);
                labels.push(data.samples[i].label);
            }
            let cache = net.forward_train(&params, &inputs[..b * width], b, Some(&mut rng))?;
            loss_sum += loss(cache.probabilities(), &labels, weights)? * b as f64;
            let grad = net.backward(&params, &cache, &labels, weights)?;
            sgd_step(&mut params, &grad, cfg.learning_rate, state)?;
        }
        let train_loss = loss_sum / order.len() as f64;
        let (val_loss, val_accuracy) = if has_val {
            let ev = evaluate_weighted(net, &params, data, Split::Validation, weights)?;
            (ev.loss, ev.accuracy)
        } else {
            (f64::NAN, f64::NAN)
        };
        log::debug!(
            "client {} epoch {global_epoch}: train {train_loss:.5} val {val_loss:.5} acc {val_accuracy:.4}",
            data.client_id
        );
        epochs.push(EpochMetrics { epoch: global_epoch, train_loss, val_loss, val_accuracy });
    }
    Ok(TrainOutcome { params, epochs, state: *state })
}

/// Rows are true classes, columns predicted classes.
pub type ConfusionMatrix = [[u64; CLASS_COUNT]; CLASS_COUNT];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

impl Evaluation {
    /// Recall of each class; `NaN` for classes absent from the split.
    pub fn per_class_recall(&self) -> [f64; CLASS_COUNT] {
        std::array::from_fn(|c| {
            let row: u64 = self.confusion[c].iter().sum();
            if row == 0 {
                f64::NAN
            } else {
                self.confusion[c][c] as f64 / row as f64
            }
        })
    }
}

/// Unweighted loss, accuracy and confusion matrix on one split.
pub fn evaluate(net: &Network, params: &ModelParams, data: &ClientDataset, split: Split) -> Result<Evaluation> {
    evaluate_weighted(net, params, data, split, None)
}

fn evaluate_weighted(
    net: &Network,
    params: &ModelParams,
    data: &ClientDataset,
    split: Split,
    weights: Option<&[f64; CLASS_COUNT]>,
) -> Result<Evaluation> {
    const CHUNK: usize = 256;
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::invalid(format!("client {} has no {split:?} samples", data.client_id)));
    }
    let width = net.input_len();
    let mut inputs = vec![0.0; CHUNK * width];
    let mut confusion = [[0u64; CLASS_COUNT]; CLASS_COUNT];
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut labels = Vec::with_capacity(CHUNK);
    for chunk in idx.chunks(CHUNK) {
        let b = chunk.len();
        labels.clear();
        for (k, &i) in chunk.iter().enumerate() {
            data.normalized_into(i, &mut inputs[k * width..(k + 1) * width]);
            labels.push(data.samples[i].label);
        }
        let probs = net.forward(params, &inputs[..b * width], b)?;
        loss_sum += loss(&probs, &labels, weights)? * b as f64;
        for (row, label) in probs.chunks_exact(CLASS_COUNT).zip(&labels) {
            let pred = argmax(row);
            confusion[label.index()][pred] += 1;
            correct += usize::from(pred == label.index());
        }
    }
    Ok(Evaluation {
        samples: idx.len(),
        loss: loss_sum / idx.len() as f64,
        accuracy: correct as f64 / idx.len() as f64,
        confusion,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
