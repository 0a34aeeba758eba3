//! Binary patch classifier: a convolutional backbone, global average pooling
//! and a single sigmoid unit, trained with a staged freeze/unfreeze schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{Augmenter, LabeledDataset, LabeledSample};
use crate::error::{Error, Result};
use crate::metrics::{accuracy_f1, auc_roc, ScoreSource, ScoredSet};
use crate::nn::{Mode, Op, Sequential};
use crate::params::{Architecture, Graph, LayoutBuilder, ModelParameters, Scope};
use crate::patch::{Geometry, ImagePatch};
use crate::tensor::Tensor;
use crate::train::{commit_stats, epoch_batches, Adam, BestKeeper, EpochRecord, Stopwatch, TrainingHistory};

/// Floor applied to log arguments in the cross-entropy.
pub const BCE_EPSILON: f64 = 1e-7;
pub const DECISION_THRESHOLD: f64 = 0.5;
pub const SCRATCH_BACKBONE: &str = "scratch-small-cnn";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub backbone: String,
    /// Channel width of each backbone block (`conv -> bn -> relu -> pool`).
    pub backbone_widths: Vec<usize>,
    pub input: Geometry,
}

impl ClassifierSpec {
    pub fn scratch(input: Geometry) -> Self {
        ClassifierSpec {
            backbone: SCRATCH_BACKBONE.into(),
            backbone_widths: vec![16, 32, 64],
            input,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone != SCRATCH_BACKBONE {
            return Err(Error::UnknownBackbone(self.backbone.clone()));
        }
        self.input.validate()?;
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            return Err(Error::InvalidConfig("backbone widths must be non-empty and positive".into()));
        }
        let f = 1usize << self.backbone_widths.len();
        if self.input.height % f != 0 || self.input.width % f != 0 {
            return Err(Error::InvalidGeometry(format!(
                "classifier input {} is not divisible by 2^{}",
                self.input,
                self.backbone_widths.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn describe(&self, b: &mut LayoutBuilder) -> Graph {
        let mut ops = Vec::new();
        let mut prev = self.input.channels;
        for (i, &width) in self.backbone_widths.iter().enumerate() {
            let prefix = format!("backbone.block{i}");
            ops.push(b.conv(&prefix, prev, width));
            ops.push(b.batch_norm(&prefix, width));
            ops.push(Op::Relu);
            ops.push(Op::MaxPool);
            prev = width;
        }
        ops.push(Op::GlobalAvgPool);
        ops.push(b.dense("head.dense", prev, 1));
        ops.push(Op::Sigmoid);
        Graph::Classifier {
            net: Sequential { ops },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub epochs: usize,
    pub scope: Scope,
    pub lr: f64,
    #[serde(default)]
    pub augmentation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneSchedule {
    pub stages: Vec<Stage>,
}

impl FineTuneSchedule {
    /// Head-only warm-up, then the top block, then the top block with augmentation.
    pub fn long_transfer() -> Self {
        FineTuneSchedule {
            stages: vec![
                Stage {
                    epochs: 80,
                    scope: Scope::HeadOnly,
                    lr: 1e-2,
                    augmentation: false,
                },
                Stage {
                    epochs: 120,
                    scope: Scope::TopBlocks(1),
                    lr: 1e-3,
                    augmentation: false,
                },
                Stage {
                    epochs: 100,
                    scope: Scope::TopBlocks(1),
                    lr: 1e-4,
                    augmentation: true,
                },
            ],
        }
    }

    /// Short schedule for a scratch backbone on small synthetic sets.
    pub fn desk() -> Self {
        FineTuneSchedule {
            stages: vec![
                Stage {
                    epochs: 5,
                    scope: Scope::HeadOnly,
                    lr: 1e-2,
                    augmentation: false,
                },
                Stage {
                    epochs: 15,
                    scope: Scope::All,
                    lr: 1e-3,
                    augmentation: true,
                },
            ],
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    /// Checks learning-rate bounds and that each stage's scope contains the previous one.
    pub fn validate(&self, params: &ModelParameters) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("fine-tuning schedule has no stages".into()));
        }
        let mut prev: Vec<usize> = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            if s.epochs == 0 {
                return Err(Error::InvalidConfig(format!("stage {i}: epochs must be at least 1")));
            }
            if !(1e-4..=1e-2).contains(&s.lr) {
                return Err(Error::InvalidConfig(format!(
                    "stage {i}: learning rate {} outside [1e-4, 1e-2]",
                    s.lr
                )));
            }
            let current = params.resolve(&s.scope);
            if current.is_empty() {
                return Err(Error::EmptySelection(s.scope.to_string()));
            }
            if !prev.iter().all(|g| current.contains(g)) {
                return Err(Error::InvalidConfig(format!(
                    "stage {i}: scope `{}` narrows the previous stage's scope",
                    s.scope
                )));
            }
            prev = current;
        }
        Ok(())
    }
}

/// Builds a classifier with the backbone frozen and the head trainable.
pub fn build_classifier(spec: ClassifierSpec, seed: u64) -> Result<ModelParameters> {
    let mut params = ModelParameters::initialize(Architecture::Classifier(spec), seed)?;
    params.freeze_all();
    params.set_trainable(&Scope::HeadOnly, true)?;
    Ok(params)
}

/// Like [`build_classifier`], with backbone groups copied from an externally
/// trained parameter set whose backbone ids and shapes match.
pub fn build_classifier_with_backbone(spec: ClassifierSpec, seed: u64, pretrained: &ModelParameters) -> Result<ModelParameters> {
    let mut params = build_classifier(spec, seed)?;
    for g in params.groups.iter_mut().filter(|g| g.id.starts_with("backbone.")) {
        let src = pretrained
            .group(&g.id)
            .ok_or_else(|| Error::Checkpoint(format!("pretrained backbone lacks group `{}`", g.id)))?;
        if src.shape != g.shape {
            return Err(Error::Checkpoint(format!(
                "pretrained group `{}` has shape {:?}, expected {:?}",
                g.id, src.shape, g.shape
            )));
        }
        g.data.clone_from(&src.data);
    }
    Ok(params)
}

pub(crate) fn spec_of(params: &ModelParameters) -> Result<&ClassifierSpec> {
    match &params.architecture {
        Architecture::Classifier(s) => Ok(s),
        Architecture::Autoencoder(_) => Err(Error::InvalidConfig("expected classifier parameters, found an autoencoder".into())),
    }
}

pub(crate) fn network(params: &ModelParameters) -> Result<Sequential> {
    match params.graph() {
        Graph::Classifier { net } => Ok(net),
        Graph::Autoencoder { .. } => Err(Error::InvalidConfig("expected classifier parameters, found an autoencoder".into())),
    }
}

pub fn predict(params: &ModelParameters, patch: &ImagePatch) -> Result<f64> {
    Ok(predict_batch(params, &[patch])?[0])
}

/// Largest `f64` below 1; saturated sigmoid outputs are pulled back inside `(0, 1)`.
const P_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Probabilities in input order, strictly inside `(0, 1)`.
pub fn predict_batch(params: &ModelParameters, patches: &[&ImagePatch]) -> Result<Vec<f64>> {
    let spec = spec_of(params)?;
    if let Some(p) = patches.iter().find(|p| p.geometry() != spec.input) {
        return Err(Error::shape(spec.input, p.geometry()));
    }
    let net = network(params)?;
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(128) {
        let y = net.infer(&params.groups, &Tensor::from_patches(chunk.iter().copied()));
        out.extend(y.data.into_iter().map(|p| p.clamp(f64::MIN_POSITIVE, P_MAX)));
    }
    Ok(out)
}

/// `-[y ln p + (1 - y) ln(1 - p)]` with each log argument floored at
/// `BCE_EPSILON`. Terms with a zero coefficient are skipped, so an exact
/// prediction costs exactly zero.
pub fn binary_cross_entropy(p: f64, y: f64) -> f64 {
    let mut loss = 0.0;
    if y != 0.0 {
        loss -= y * p.max(BCE_EPSILON).ln();
    }
    if y != 1.0 {
        loss -= (1.0 - y) * (1.0 - p).max(BCE_EPSILON).ln();
    }
    loss
}

/// Derivative of [`binary_cross_entropy`] with respect to `p`; zero where floored.
pub fn binary_cross_entropy_grad(p: f64, y: f64) -> f64 {
    let mut g = 0.0;
    if y != 0.0 && p > BCE_EPSILON {
        g -= y / p;
    }
    if y != 1.0 && 1.0 - p > BCE_EPSILON {
        g += (1.0 - y) / (1.0 - p);
    }
    g
}

/// Mean BCE over a batch and its gradient w.r.t. the probabilities.
pub(crate) fn bce_batch(probs: &Tensor, labels: &[f64]) -> (f64, Tensor) {
    let n = labels.len() as f64;
    let mut grad = Tensor::zeros(probs.n, 1, 1, 1);
    let mut loss = 0.0;
    for ((g, &p), &y) in grad.data.iter_mut().zip(&probs.data).zip(labels) {
        loss += binary_cross_entropy(p, y);
        *g = binary_cross_entropy_grad(p, y) / n;
    }
    (loss / n, grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClfTrainOptions {
    pub batch_size: usize,
    /// Seeds shuffling and augmentation.
    pub seed: u64,
}

impl Default for ClfTrainOptions {
    fn default() -> Self {
        ClfTrainOptions {
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Validation loss, accuracy and AUC of a classifier on a labeled set.
pub fn evaluate_classifier(params: &ModelParameters, data: &LabeledDataset) -> Result<(f64, f64, Option<f64>)> {
    let patches: Vec<&ImagePatch> = data.patches().collect();
    let scores = predict_batch(params, &patches)?;
    let labels = data.labels();
    let loss = scores
        .iter()
        .zip(&labels)
        .map(|(&p, &y)| binary_cross_entropy(p, f64::from(y)))
        .sum::<f64>()
        / scores.len().max(1) as f64;
    let set = ScoredSet::new(scores, labels, ScoreSource::Original)?;
    let (acc, _) = accuracy_f1(&set, DECISION_THRESHOLD)?;
    Ok((loss, acc, auc_roc(&set).ok()))
}

/// Runs the schedule stage by stage. Before each stage every group is frozen
/// and then exactly the stage's scope is unfrozen. Returns the parameters with
/// the lowest validation loss seen at any epoch end.
pub fn train_classifier(
    params: ModelParameters,
    train: &LabeledDataset,
    val: &LabeledDataset,
    schedule: &FineTuneSchedule,
    options: &ClfTrainOptions,
) -> Result<(ModelParameters, TrainingHistory)> {
    schedule.validate(&params)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidConfig("training and validation sets must be non-empty".into()));
    }
    let spec = spec_of(&params)?.clone();
    if let Some(g) = train.geometry().filter(|g| *g != spec.input) {
        return Err(Error::shape(spec.input, g));
    }
    let net = network(&params)?;
    let mut params = params;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut history = TrainingHistory::default();
    let mut best = BestKeeper::new();
    let mut epoch = 0;
    for (stage_index, stage) in schedule.stages.iter().enumerate() {
        params.freeze_all();
        params.set_trainable(&stage.scope, true)?;
        let mut adam = Adam::new(stage.lr, params.groups.len());
        let augmenter = Augmenter::default();
        for _ in 0..stage.epochs {
            epoch += 1;
            let clock = Stopwatch::start();
            let mut sum = 0.0;
            for batch in epoch_batches(train.len(), options.batch_size, &mut rng) {
                let samples: Vec<LabeledSample> = if stage.augmentation {
                    batch
                        .iter()
                        .map(|&i| augmenter.apply(&train.samples[i], &mut rng))
                        .collect::<Result<_>>()?
                } else {
                    batch.iter().map(|&i| train.samples[i].clone()).collect()
                };
                let x = Tensor::from_patches(samples.iter().map(|s| &s.patch));
                let labels: Vec<f64> = samples.iter().map(|s| f64::from(s.label)).collect();
                let (probs, tape) = net.forward(&params.groups, &x, Mode::Train);
                let (loss, grad) = bce_batch(&probs, &labels);
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        stage: format!("classifier stage {stage_index}"),
                        epoch,
                    });
                }
                sum += loss * labels.len() as f64;
                let updates = tape.stat_updates.clone();
                let (grads, _) = net.backward(&params.groups, tape, grad, false);
                adam.step(&mut params.groups, &grads);
                commit_stats(&mut params.groups, &updates);
            }
            let (val_loss, val_acc, val_auc) = evaluate_classifier(&params, val)?;
            if !val_loss.is_finite() || !params.all_finite() {
                return Err(Error::NonFinite {
                    stage: format!("classifier stage {stage_index}"),
                    epoch,
                });
            }
            best.observe(epoch, val_loss, &params.groups);
            history.push(EpochRecord {
                epoch,
                stage: Some(stage_index),
                train_loss: sum / train.len() as f64,
                val_loss,
                val_accuracy: Some(val_acc),
                val_auc,
                wall_clock_secs: clock.secs(),
            });
        }
    }
    if let Some(groups) = best.best_groups {
        params.groups = groups;
    }
    history.best_epoch = best.best_epoch;
    Ok((params, history))
}
