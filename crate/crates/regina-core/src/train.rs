//! Minibatch training and evaluation: momentum SGD with weight decay, a
//! two-step learning-rate decay schedule, seeded shuffling, and per-epoch
//! history rows.

use crate::model::{argmax, metrics_from_scores, BatchItem, Metrics, Model, ModelError};
use crate::skeleton::SkeletonSequence;
use crate::ssm::SelfSimilarityMatrix;
use crate::synth::mix_seed;
use crate::tensor::{BnMode, Tape, TensorError};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// One training sample: the sequence plus its (optional) self-similarity
/// matrix, precomputed once so epochs do not redo the descriptor work.
pub type Example = (SkeletonSequence, Option<SelfSimilarityMatrix>);

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad training setup: {0}")]
    Input(String),
    #[error("loss became non-finite ({loss}) at epoch {epoch}, batch {batch}; \
             try a lower learning rate")]
    NonFinite { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Input(format!("learning rate {} is invalid", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Input(format!(
                "momentum {} must be in [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Input(format!(
                "weight decay {} is invalid",
                self.weight_decay
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::Input(String::from("need at least one epoch")));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Input(String::from("batch size must be positive")));
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch index: the base rate decays by
    /// 10x at 3/5 and again at 4/5 of the run.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let first = self.epochs * 3 / 5;
        let second = self.epochs * 4 / 5;
        let drops = (epoch >= first) as i32 + (epoch >= second) as i32;
        self.lr * libm::pow(0.1, drops as f64)
    }
}

/// One history row, written after each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_top1: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
}

/// Classic momentum update with decoupled-from-nothing weight decay folded
/// into the gradient: v <- m v + g + wd p, then p <- p - lr v.
fn momentum_step(p: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, momentum: f64, wd: f64) {
    for i in 0..p.len() {
        v[i] = momentum * v[i] + g[i] + wd * p[i];
        p[i] -= lr * v[i];
    }
}

/// Run the full training loop over `dataset`, mutating `model` in place.
pub fn train(
    model: &mut Model,
    dataset: &[Example],
    hp: &Hyperparams,
) -> Result<TrainReport, TrainError> {
    hp.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Input(String::from("empty training set")));
    }
    let classes = model.config.num_classes;
    for (i, (seq, _)) in dataset.iter().enumerate() {
        if seq.label >= classes {
            return Err(TrainError::Input(format!(
                "sample {} has label {} but the model has {} classes",
                i, seq.label, classes
            )));
        }
    }

    let mut velocity: BTreeMap<String, Vec<f64>> = model
        .param_names()
        .map(|n| {
            let len = model.param_values(n).unwrap().len();
            (String::from(n), alloc::vec![0.0; len])
        })
        .collect();

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(hp.epochs);
    for epoch in 0..hp.epochs {
        let lr = hp.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(hp.seed, "shuffle", &[epoch as u64]));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for (batch_idx, chunk) in order.chunks(hp.batch_size).enumerate() {
            let items: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| BatchItem {
                    sequence: &dataset[i].0,
                    ssm: dataset[i].1.as_ref(),
                })
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset[i].0.label).collect();

            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &items, BnMode::Train)?;
            let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
            let loss_value = tape.data(loss)[0];
            if !loss_value.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: batch_idx, loss: loss_value });
            }
            loss_sum += loss_value * chunk.len() as f64;

            let logits = tape.data(pass.logits);
            for (row, &label) in labels.iter().enumerate() {
                let scores = &logits[row * classes..(row + 1) * classes];
                if argmax(scores) == label {
                    hits += 1;
                }
            }

            tape.backward(loss)?;
            let grads = model.gradients(&tape, &pass);
            for (name, grad) in &grads {
                let v = velocity.get_mut(name).unwrap();
                let p = model.param_values_mut(name).unwrap();
                momentum_step(p, v, grad, lr, hp.momentum, hp.weight_decay);
            }
        }

        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / dataset.len() as f64,
            train_top1: hits as f64 / dataset.len() as f64,
            lr,
        });
    }
    Ok(TrainReport { history })
}

/// Score a dataset in evaluation mode. Returns one softmax probability row
/// per sample (in dataset order) plus the aggregate metrics.
pub fn evaluate(
    model: &mut Model,
    dataset: &[Example],
    batch_size: usize,
) -> Result<(Vec<Vec<f64>>, Metrics), TrainError> {
    if batch_size == 0 {
        return Err(TrainError::Input(String::from("batch size must be positive")));
    }
    if dataset.is_empty() {
        return Err(TrainError::Input(String::from("empty evaluation set")));
    }
    let classes = model.config.num_classes;
    let mut scores = Vec::with_capacity(dataset.len());
    for chunk in dataset.chunks(batch_size) {
        let items: Vec<BatchItem> = chunk
            .iter()
            .map(|(seq, ssm)| BatchItem { sequence: seq, ssm: ssm.as_ref() })
            .collect();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &items, BnMode::Eval)?;
        let logits = tape.data(pass.logits);
        let probs = crate::tensor::softmax_rows(logits, chunk.len(), classes);
        for row in 0..chunk.len() {
            scores.push(probs[row * classes..(row + 1) * classes].to_vec());
        }
    }
    let labels: Vec<usize> = dataset.iter().map(|(s, _)| s.label).collect();
    let metrics = metrics_from_scores(&scores, &labels, classes)?;
    Ok((scores, metrics))
}
