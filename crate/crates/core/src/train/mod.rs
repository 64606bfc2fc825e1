//! Two-stage training: a clean single-channel model first, then the blocks
//! fine-tuned on multi-channel data with the front-end and pooling frozen.

mod adam;

pub use adam::{Adam, AdamConfig};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::Normalizer;
use crate::autodiff::Tape;
use crate::model::{ParamGroup, StbConfig, StbModel};
use crate::rng::substream;
use crate::sim::reselect_channels;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Channels drawn per utterance each epoch.
    pub channels: usize,
    /// Epochs that train only the freshly drawn classifier before the joint
    /// epochs, so its first large gradients do not distort the blocks.
    pub head_epochs: usize,
    pub head_learning_rate: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 8,
            batch_size: 16,
            learning_rate: 1e-3,
            channels: 4,
            head_epochs: 4,
            head_learning_rate: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub adam: AdamConfig,
    /// Cross-channel normalizers to fine-tune and evaluate, one run each.
    pub normalizers: Vec<Normalizer>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            adam: AdamConfig::default(),
            normalizers: vec![Normalizer::Softmax, Normalizer::Sparsemax],
        }
    }
}

/// One stage as the training loop sees it; pretraining always uses one channel.
#[derive(Debug, Clone, PartialEq)]
struct Stage {
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    channels: usize,
    /// Restricts updates to one parameter group.
    only: Option<ParamGroup>,
}

impl TrainConfig {
    fn pretrain_stage(&self) -> Stage {
        let p = &self.pretrain;
        Stage {
            epochs: p.epochs,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            channels: 1,
            only: None,
        }
    }

    fn finetune_stage(&self) -> Stage {
        let f = &self.finetune;
        Stage {
            epochs: f.epochs,
            batch_size: f.batch_size,
            learning_rate: f.learning_rate,
            channels: f.channels,
            only: None,
        }
    }

    fn head_stage(&self) -> Stage {
        let f = &self.finetune;
        Stage {
            epochs: f.head_epochs,
            batch_size: f.batch_size,
            learning_rate: f.head_learning_rate,
            channels: f.channels,
            only: Some(ParamGroup::Classifier),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, stage) in [("pretrain", self.pretrain_stage()), ("finetune", self.finetune_stage())] {
            if stage.epochs == 0 || stage.batch_size == 0 || stage.channels == 0 {
                return Err(Error::Config(format!("train.{name}: epochs, batch_size and channels must be >= 1")));
            }
            if !(stage.learning_rate > 0.0 && stage.learning_rate.is_finite()) {
                return Err(Error::Config(format!("train.{name}.learning_rate must be > 0")));
            }
        }
        let head = &self.finetune.head_learning_rate;
        if self.finetune.head_epochs > 0 && !(*head > 0.0 && head.is_finite()) {
            return Err(Error::Config("train.finetune.head_learning_rate must be > 0".into()));
        }
        if self.normalizers.is_empty() {
            return Err(Error::Config("train.normalizers must not be empty".into()));
        }
        self.adam.validate()
    }
}

/// Features `[C, T, F]` with class labels in `0..num_classes`.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub features: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn new(features: Vec<Tensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.len() != labels.len() || features.is_empty() {
            return Err(Error::Config(format!(
                "{} feature tensors for {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index {
                index: bad,
                extent: num_classes,
                context: "training label",
            });
        }
        Ok(LabeledSet {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn min_channels(&self) -> usize {
        self.features.iter().map(|f| f.shape()[0]).min().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: StbModel,
    /// One point per optimizer step (batch mean loss and accuracy).
    pub curve: Vec<CurvePoint>,
    /// Mean loss and accuracy over the last epoch.
    pub final_loss: f64,
    pub final_accuracy: f64,
}

/// Loss, correctness and trainable gradients of one utterance.
fn utterance_step(
    model: &StbModel,
    features: &Tensor,
    label: usize,
    only: Option<ParamGroup>,
) -> Result<(f64, bool, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let x = tape.constant(features.clone());
    let fwd = model.forward(&mut tape, &p, x)?;
    let logits = model.classify(&mut tape, &p, fwd.embedding)?;
    let loss = tape.cross_entropy(logits, &[label])?;
    let row = tape.value(logits).data();
    let predicted = row
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    let grads = tape.backward(loss)?;
    let mut grads = model.params.collect_grads(&p, &grads);
    if only.is_some() {
        grads.retain(|name, _| ParamGroup::of(name) == only);
    }
    Ok((tape.value(loss).item()?, predicted == label, grads))
}

/// Mini-batch Adam over `data`. Per-utterance gradients are computed in
/// parallel and reduced in batch order, so results do not depend on scheduling.
fn fit(mut model: StbModel, data: &LabeledSet, stage: &Stage, adam: AdamConfig, seed: u64, stream: &str) -> Result<TrainOutcome> {
    fit_from(&mut model, data, stage, adam, seed, stream, Vec::new(), 0)?.finish(model)
}

struct Progress {
    curve: Vec<CurvePoint>,
    final_loss: f64,
    final_accuracy: f64,
}

impl Progress {
    fn finish(self, model: StbModel) -> Result<TrainOutcome> {
        Ok(TrainOutcome {
            model,
            curve: self.curve,
            final_loss: self.final_loss,
            final_accuracy: self.final_accuracy,
        })
    }
}

/// Runs `stage` on `model`, appending to `curve`; epochs are numbered from
/// `first_epoch` so streams stay distinct across consecutive stages.
#[allow(clippy::too_many_arguments)]
fn fit_from(
    model: &mut StbModel,
    data: &LabeledSet,
    stage: &Stage,
    adam: AdamConfig,
    seed: u64,
    stream: &str,
    mut curve: Vec<CurvePoint>,
    first_epoch: usize,
) -> Result<Progress> {
    let channels = stage.channels;
    if channels > data.min_channels() {
        return Err(Error::Config(format!(
            "train.{stream}.channels {channels} exceeds the {} available",
            data.min_channels()
        )));
    }
    let mut opt = Adam::new(adam, stage.learning_rate);
    let (mut final_loss, mut final_accuracy) = (f64::NAN, f64::NAN);
    for epoch in first_epoch..first_epoch + stage.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut substream(seed, &format!("{stream}.batching"), epoch as u64));
        let (mut epoch_loss, mut epoch_correct) = (0.0, 0usize);
        for batch in order.chunks(stage.batch_size) {
            let step = curve.len();
            let results = batch
                .par_iter()
                .map(|&i| {
                    let x = &data.features[i];
                    let x = if x.shape()[0] == channels {
                        x.clone()
                    } else {
                        let mut rng = substream(seed, &format!("{stream}.reselect"), (epoch * data.len() + i) as u64);
                        reselect_channels(x, channels, &mut rng)?
                    };
                    utterance_step(model, &x, data.labels[i], stage.only)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::Numeric { .. } => Error::Training {
                        step,
                        reason: e.to_string(),
                    },
                    other => other,
                })?;
            let scale = 1.0 / batch.len() as f64;
            let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
            let (mut loss, mut correct) = (0.0, 0usize);
            for (l, ok, grads) in results {
                loss += l;
                correct += usize::from(ok);
                for (name, g) in grads {
                    match total.get_mut(&name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                        None => {
                            total.insert(name, g);
                        }
                    }
                }
            }
            for g in total.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("loss is {loss}"),
                });
            }
            opt.step(&mut model.params, &total)?;
            if !model.params.all_finite() {
                return Err(Error::Training {
                    step,
                    reason: "non-finite parameter after update".into(),
                });
            }
            epoch_loss += loss;
            epoch_correct += correct;
            curve.push(CurvePoint {
                step,
                epoch,
                loss: loss * scale,
                accuracy: correct as f64 * scale,
            });
        }
        final_loss = epoch_loss / data.len() as f64;
        final_accuracy = epoch_correct as f64 / data.len() as f64;
    }
    Ok(Progress {
        curve,
        final_loss,
        final_accuracy,
    })
}

/// Trains the single-channel model on clean `[1, T, F]` utterances.
pub fn pretrain(data: &LabeledSet, model_config: &StbConfig, train: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    train.validate()?;
    let config = StbConfig {
        num_speakers: data.num_classes,
        ..model_config.clone()
    };
    let model = StbModel::single_channel(config, &mut substream(seed, "init.pretrain", 0))?;
    fit(model, data, &train.pretrain_stage(), train.adam, seed, "pretrain")
}

/// The randomly initialized multi-channel model `finetune` starts from.
pub fn finetune_init(pretrained: &StbModel, data: &LabeledSet, model_config: &StbConfig, normalizer: Normalizer, seed: u64) -> Result<StbModel> {
    let config = StbConfig {
        num_speakers: data.num_classes,
        normalizer,
        ..model_config.clone()
    };
    StbModel::from_pretrained(pretrained, config, &mut substream(seed, "init.finetune", 0))
}

/// Fine-tunes the blocks and classifier on multi-channel data, reselecting
/// `train.finetune.channels` channels per utterance every epoch. The first
/// `head_epochs` update the classifier alone.
///
/// Fails with a contract error if any frozen parameter changed.
pub fn finetune(
    pretrained: &StbModel,
    data: &LabeledSet,
    model_config: &StbConfig,
    train: &TrainConfig,
    normalizer: Normalizer,
    seed: u64,
) -> Result<TrainOutcome> {
    train.validate()?;
    let mut model = finetune_init(pretrained, data, model_config, normalizer, seed)?;
    let stream = format!("finetune.{}", normalizer.name());
    let head = train.head_stage();
    let probe = fit_from(&mut model, data, &head, train.adam, seed, &stream, Vec::new(), 0)?;
    let outcome = fit_from(&mut model, data, &train.finetune_stage(), train.adam, seed, &stream, probe.curve, head.epochs)?.finish(model)?;
    verify_frozen(pretrained, &outcome.model)?;
    Ok(outcome)
}

/// Front-end and pooling tensors of `tuned` must equal `pretrained` bit for bit.
pub fn verify_frozen(pretrained: &StbModel, tuned: &StbModel) -> Result<()> {
    for (name, p) in pretrained.params.iter() {
        if !matches!(ParamGroup::of(name), Some(ParamGroup::Frontend | ParamGroup::Sap)) {
            continue;
        }
        let after = tuned.params.value(name)?;
        let same = after.shape() == p.value.shape()
            && after.data().iter().zip(p.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::Contract(format!("frozen parameter {name} changed during fine-tuning")));
        }
    }
    Ok(())
}

pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut text = String::from("step,epoch,loss,accuracy\n");
    for p in curve {
        text.push_str(&format!("{},{},{},{}\n", p.step, p.epoch, p.loss, p.accuracy));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
