use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::Dataset;
use crate::numerics::{Purpose, RandomStream};
use crate::snn::{predict, run_ann, run_snn, Model, NormMode, RunOptions};
use crate::training::adapt::update_running_stats;
use crate::training::backward::{ann_backward, stbp_backward};
use crate::training::optim::{adam_step, learning_rate, AdamConfig, OptimState};

/// Optimizer, schedule and batching for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial Adam learning rate.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Fractions of `epochs` at which the rate is divided by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    /// Seeds shuffling and the training-time encoder.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 32,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            lr_milestones: vec![0.5, 0.75],
            lr_decay: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("lr and lr_decay must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        learning_rate(self.lr, epoch, self.epochs, &self.lr_milestones, self.lr_decay)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Ann,
    Surrogate,
    Bntt,
}

/// Encoder stream id of a training sample: distinct per epoch and sample.
pub fn training_sample_id(epoch: usize, index: usize) -> u64 {
    ((epoch as u64) << 32) | index as u64
}

fn fit(model: &Model, data: &Dataset, cfg: &TrainConfig, kind: Kind) -> Result<(Model, Vec<EpochLog>)> {
    cfg.validate()?;
    model.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if data.image_shape() != model.spec.input_shape || data.classes != model.spec.classes {
        return Err(Error::Structure(format!(
            "dataset {:?} with {} classes does not fit network input {:?} with {} classes",
            data.image_shape(),
            data.classes,
            model.spec.input_shape,
            model.spec.classes
        )));
    }
    let adam = AdamConfig {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        ..Default::default()
    };
    let mut model = model.clone();
    let mut state = OptimState::default();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        RandomStream::new(cfg.seed, Purpose::Shuffle, epoch as u64).shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.gather(chunk);
            let (loss, grads, preds) = match kind {
                Kind::Ann => {
                    let run = run_ann(&model, &x, true)?;
                    let (loss, grads) = ann_backward(&model, &run, &y)?;
                    (loss, grads, predict(&run.logits))
                }
                Kind::Surrogate | Kind::Bntt => {
                    let ids: Vec<u64> = chunk.iter().map(|&i| training_sample_id(epoch, i)).collect();
                    let opts = RunOptions {
                        record: true,
                        norm: NormMode::Batch,
                        ..RunOptions::eval(model.spec.time_steps, cfg.seed, &ids)
                    };
                    let run = run_snn(&model, &x, opts)?;
                    let (loss, grads) = stbp_backward(&model, &run, &y)?;
                    update_running_stats(&mut model, &run.batch_stats, false)?;
                    (loss, grads, predict(&run.potential))
                }
            };
            if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite loss or gradient in epoch {epoch} (loss {loss})"
                )));
            }
            adam_step(&mut model.tensors, &grads, &mut state, lr, &adam)?;
            for name in grads.keys() {
                model.tensors.get_mut(name).expect("updated tensor").round_to_f32();
            }
            loss_sum += loss * chunk.len() as f64;
            correct += preds.iter().zip(&y).filter(|(p, l)| p == l).count();
        }
        let entry = EpochLog {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            train_accuracy: 100.0 * correct as f64 / data.len() as f64,
        };
        log::info!(
            "epoch {} lr {:.1e} loss {:.4} train acc {:.2}%",
            epoch,
            entry.lr,
            entry.loss,
            entry.train_accuracy
        );
        log.push(entry);
    }
    Ok((model, log))
}

/// Trains a ReLU network with softmax cross-entropy on its logits.
pub fn train_ann(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, Vec<EpochLog>)> {
    if model.is_snn() {
        return Err(Error::Structure("train_ann needs an ANN spec".into()));
    }
    fit(model, data, cfg, Kind::Ann)
}

/// Surrogate-gradient training: cross-entropy on the accumulated output
/// potential, gradients through time with the piecewise-linear surrogate.
pub fn train_sg(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, Vec<EpochLog>)> {
    if !model.is_snn() || model.spec.has_bntt() {
        return Err(Error::Structure(
            "train_sg needs an SNN spec without norm layers".into(),
        ));
    }
    fit(model, data, cfg, Kind::Surrogate)
}

/// Surrogate-gradient training of a network with time-indexed norm layers;
/// batch statistics in training, running statistics maintained for eval.
pub fn train_bntt(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, Vec<EpochLog>)> {
    if !model.is_snn() || !model.spec.has_bntt() {
        return Err(Error::Structure(
            "train_bntt needs an SNN spec with bntt_norm layers".into(),
        ));
    }
    fit(model, data, cfg, Kind::Bntt)
}
