//! Mini-batch training with Adam and validation-loss early stopping.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{argmax, Model, ModelError};
use crate::tensor::{Tape, Tensor};

/// Optimizer and schedule settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 30,
            patience: 7,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 {
            return Err(ModelError::Invalid("batch size must be >= 1".into()));
        }
        if self.max_epochs > 0 && self.patience >= self.max_epochs {
            return Err(ModelError::Invalid(format!(
                "patience {} must be smaller than max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose weights the model carries (minimal validation loss).
    pub best_epoch: usize,
}

const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

struct Adam {
    lr: f32,
    t: i32,
    moments: BTreeMap<(String, String), (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    fn new(lr: f32) -> Self {
        Self {
            lr,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    fn begin_step(&mut self) {
        self.t += 1;
    }

    fn update(&mut self, key: (String, String), param: &mut Tensor, grad: &Tensor) {
        let (m, v) = self
            .moments
            .entry(key)
            .or_insert_with(|| (vec![0.0; grad.numel()], vec![0.0; grad.numel()]));
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for ((p, &g), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

/// Stacks samples `[lo, hi)` of the index list into a batch.
fn make_batch(
    data: &[(Tensor, usize)],
    order: &[usize],
    lo: usize,
    hi: usize,
) -> Result<(Tensor, Vec<usize>), ModelError> {
    let frames: Vec<Tensor> = order[lo..hi].iter().map(|&i| data[i].0.clone()).collect();
    let labels: Vec<usize> = order[lo..hi].iter().map(|&i| data[i].1).collect();
    Ok((Tensor::stack(&frames)?, labels))
}

/// Mean cross-entropy and accuracy of the model on a labelled set (eval mode).
pub fn evaluate(model: &Model, data: &[(Tensor, usize)], batch_size: usize) -> Result<(f64, f64), ModelError> {
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    let order: Vec<usize> = (0..data.len()).collect();
    let mut lo = 0;
    while lo < data.len() {
        let hi = (lo + batch_size).min(data.len());
        let (batch, labels) = make_batch(data, &order, lo, hi)?;
        let logits = model.forward(&batch)?;
        let mut ce_tape = Tape::new();
        let lv = ce_tape.constant(logits.clone())?;
        let ce = ce_tape.softmax_cross_entropy(lv, &labels)?;
        loss += ce_tape.value(ce).data()[0] as f64 * labels.len() as f64;
        let k = logits.shape()[1];
        for (row, &label) in labels.iter().enumerate() {
            if argmax(&logits.data()[row * k..][..k]) == label {
                correct += 1;
            }
        }
        lo = hi;
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains in place. Stops when validation loss has not improved for
/// `patience` epochs or at `max_epochs`, and restores the weights of the
/// best validation epoch. `max_epochs == 0` leaves the model untouched and
/// returns an empty history.
pub fn train_model(
    model: &mut Model,
    train: &[(Tensor, usize)],
    val: &[(Tensor, usize)],
    config: &TrainConfig,
) -> Result<TrainHistory, ModelError> {
    config.validate()?;
    if config.max_epochs == 0 {
        return Ok(TrainHistory::default());
    }
    if train.is_empty() || val.is_empty() {
        return Err(ModelError::Invalid(
            "training and validation sets must both be non-empty".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.learning_rate);
    let mut history = TrainHistory::default();
    let mut best_loss = f64::INFINITY;
    let mut best_params = model.params.clone();
    let mut stale = 0usize;

    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);

        let mut train_loss = 0.0f64;
        let mut lo = 0;
        while lo < train.len() {
            let hi = (lo + config.batch_size).min(train.len());
            let (batch, labels) = make_batch(train, &order, lo, hi)?;
            let mut tape = Tape::new();
            let (logits, param_vars) = model.forward_train(&mut tape, &batch)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            train_loss += tape.value(loss).data()[0] as f64 * labels.len() as f64;
            let grads = tape.backward(loss)?;
            adam.begin_step();
            for (layer, name, var) in param_vars {
                let grad = grads.wrt(var).expect("parameter gradient");
                let param = model
                    .params
                    .get_mut(&layer)
                    .and_then(|m| m.get_mut(&name))
                    .expect("parameter tensor");
                adam.update((layer, name), param, grad);
            }
            lo = hi;
        }
        train_loss /= train.len() as f64;

        let (val_loss, val_accuracy) = evaluate(model, val, config.batch_size)?;
        history.epochs.push(EpochStats {
            train_loss,
            val_loss,
            val_accuracy,
        });

        if val_loss < best_loss {
            best_loss = val_loss;
            best_params = model.params.clone();
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    model.params = best_params;
    Ok(history)
}
