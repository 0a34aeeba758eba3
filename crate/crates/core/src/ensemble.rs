//! Autoencoder + frozen classifier composition and supervised fine-tuning of
//! the autoencoder through the classifier's loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{self, config_of, halves, mse_and_grad};
use crate::classifier::{self, bce_batch, binary_cross_entropy, spec_of, DECISION_THRESHOLD};
use crate::datasets::{LabeledDataset, LabeledSample};
use crate::error::{Error, Result};
use crate::metrics::{accuracy_f1, auc_roc, ScoreSource, ScoredSet};
use crate::nn::{Grads, Mode, Sequential};
use crate::params::{hash_groups, ModelParameters};
use crate::patch::ImagePatch;
use crate::tensor::Tensor;
use crate::train::{commit_stats, epoch_batches, Adam, BestKeeper, EpochRecord, Stopwatch, TrainingHistory};

/// Weights of the supervised (classifier BCE) and reconstruction (MSE) terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub supervised: f64,
    pub reconstruction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            supervised: 1.0,
            reconstruction: 0.0,
        }
    }
}

impl LossWeights {
    pub fn new(supervised: f64, reconstruction: f64) -> Result<Self> {
        let w = LossWeights {
            supervised,
            reconstruction,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.supervised >= 0.0
            && self.reconstruction >= 0.0
            && self.supervised.is_finite()
            && self.reconstruction.is_finite()
            && self.supervised + self.reconstruction > 0.0;
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "loss weights ({}, {}) must be non-negative with a positive sum",
                self.supervised, self.reconstruction
            )));
        }
        Ok(())
    }
}

pub struct Ensemble {
    pub ae: ModelParameters,
    clf: ModelParameters,
    clf_hash: String,
    clf_group_hashes: Vec<String>,
    pub weights: LossWeights,
    encoder: Sequential,
    decoder: Sequential,
    clf_net: Sequential,
}

fn group_hashes(params: &ModelParameters) -> Vec<String> {
    params.groups.iter().map(|g| hash_groups(std::iter::once(g))).collect()
}

/// Freezes every classifier group and pairs it with a trainable autoencoder.
pub fn build_ensemble(ae: ModelParameters, clf: ModelParameters, weights: LossWeights) -> Result<Ensemble> {
    weights.validate()?;
    let ae_input = config_of(&ae)?.input;
    let clf_input = spec_of(&clf)?.input;
    if ae_input != clf_input {
        return Err(Error::shape(format!("classifier input {clf_input}"), format!("autoencoder output {ae_input}")));
    }
    let (encoder, decoder) = halves(&ae)?;
    let clf_net = classifier::network(&clf)?;
    let mut ae = ae;
    let mut clf = clf;
    ae.groups.iter_mut().for_each(|g| g.trainable = true);
    clf.freeze_all();
    Ok(Ensemble {
        clf_hash: clf.content_hash(),
        clf_group_hashes: group_hashes(&clf),
        ae,
        clf,
        weights,
        encoder,
        decoder,
        clf_net,
    })
}

/// Per-sample loss terms of a batch, combined as
/// `(1/t) * sum_i [w_s * BCE(p_i, y_i) + w_r * MSE(recon_i, x_i)]`.
pub fn combine_loss(weights: LossWeights, probs: &[f64], labels: &[u8], recon_mse: &[f64]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() || probs.len() != recon_mse.len() {
        return Err(Error::InvalidConfig("loss terms must be non-empty and of equal length".into()));
    }
    let mut total = 0.0;
    for (i, ((&p, &y), &m)) in probs.iter().zip(labels).zip(recon_mse).enumerate() {
        if !p.is_finite() || !m.is_finite() {
            return Err(Error::NonFiniteSample { index: i });
        }
        total += weights.supervised * binary_cross_entropy(p, f64::from(y)) + weights.reconstruction * m;
    }
    Ok(total / probs.len() as f64)
}

impl Ensemble {
    pub fn classifier(&self) -> &ModelParameters {
        &self.clf
    }

    /// Consumes the ensemble, returning `(autoencoder, classifier)`.
    pub fn into_parts(self) -> (ModelParameters, ModelParameters) {
        (self.ae, self.clf)
    }

    /// `predict(clf, decode(encode(x)))` through the public inference path.
    pub fn forward(&self, patches: &[&ImagePatch]) -> Result<Vec<f64>> {
        let recon = autoencoder::reconstruct(&self.ae, patches)?;
        let refs: Vec<&ImagePatch> = recon.iter().collect();
        classifier::predict_batch(&self.clf, &refs)
    }

    fn check_batch(&self, batch: &[LabeledSample]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let input = config_of(&self.ae)?.input;
        if let Some(s) = batch.iter().find(|s| s.patch.geometry() != input) {
            return Err(Error::shape(input, s.patch.geometry()));
        }
        Ok(())
    }

    /// Inference-mode probabilities and per-sample reconstruction MSE. The
    /// latent is rounded to `f32` exactly as a stored [`crate::LatentCode`] is.
    fn eval_terms(&self, samples: &[&LabeledSample]) -> (Vec<f64>, Vec<f64>) {
        let x = Tensor::from_patches(samples.iter().map(|s| &s.patch));
        let mut latent = self.encoder.infer(&self.ae.groups, &x);
        latent.data.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        let recon = self.decoder.infer(&self.ae.groups, &latent);
        let probs = self.clf_net.infer(&self.clf.groups, &recon);
        let per_sample = (0..x.n)
            .map(|i| {
                let (r, t) = (recon.sample(i), x.sample(i));
                r.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / r.len() as f64
            })
            .collect();
        (probs.data, per_sample)
    }

    /// Weighted supervised + reconstruction loss of a batch in inference mode.
    pub fn loss(&self, batch: &[LabeledSample]) -> Result<f64> {
        self.check_batch(batch)?;
        let mut probs = Vec::with_capacity(batch.len());
        let mut mses = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(64) {
            let refs: Vec<&LabeledSample> = chunk.iter().collect();
            let (p, m) = self.eval_terms(&refs);
            probs.extend(p);
            mses.extend(m);
        }
        let labels: Vec<u8> = batch.iter().map(|s| s.label).collect();
        combine_loss(self.weights, &probs, &labels, &mses)
    }

    /// Loss and autoencoder gradients for one batch. Classifier groups are
    /// frozen, so the returned gradients never cover them. Batch-norm
    /// statistic updates are returned alongside, uncommitted.
    pub fn loss_and_grads(&self, batch: &[&LabeledSample], mode: Mode) -> Result<(f64, Grads, Vec<crate::nn::StatUpdate>)> {
        let x = Tensor::from_patches(batch.iter().map(|s| &s.patch));
        let labels: Vec<f64> = batch.iter().map(|s| f64::from(s.label)).collect();
        let (latent, enc_tape) = self.encoder.forward(&self.ae.groups, &x, mode);
        let (recon, dec_tape) = self.decoder.forward(&self.ae.groups, &latent, mode);
        // Frozen classifier: running statistics, no parameter gradients.
        let (probs, clf_tape) = self.clf_net.forward(&self.clf.groups, &recon, Mode::Eval);
        let (bce, dprobs) = bce_batch(&probs, &labels);
        let (mse, dmse) = mse_and_grad(&recon, &x);
        let loss = self.weights.supervised * bce + self.weights.reconstruction * mse;
        if !loss.is_finite() {
            let index = probs.data.iter().position(|p| !p.is_finite()).unwrap_or(0);
            return Err(Error::NonFiniteSample { index });
        }
        let mut drecon = Tensor::zeros(recon.n, recon.c, recon.h, recon.w);
        if self.weights.supervised != 0.0 {
            let mut scaled = dprobs;
            scaled.data.iter_mut().for_each(|g| *g *= self.weights.supervised);
            let (clf_grads, d) = self.clf_net.backward(&self.clf.groups, clf_tape, scaled, true);
            debug_assert!(clf_grads.groups.iter().all(Option::is_none));
            drecon = d.expect("classifier input gradient");
        }
        if self.weights.reconstruction != 0.0 {
            drecon
                .data
                .iter_mut()
                .zip(&dmse.data)
                .for_each(|(a, b)| *a += self.weights.reconstruction * b);
        }
        let mut updates = enc_tape.stat_updates.clone();
        updates.extend(dec_tape.stat_updates.iter().cloned());
        let (mut grads, dlatent) = self.decoder.backward(&self.ae.groups, dec_tape, drecon, true);
        let (enc_grads, _) = self.encoder.backward(&self.ae.groups, enc_tape, dlatent.expect("latent gradient"), false);
        grads.merge(enc_grads);
        Ok((loss, grads, updates))
    }

    /// Validation loss, accuracy and AUC (when both classes are present).
    pub fn evaluate(&self, data: &LabeledDataset) -> Result<(f64, f64, Option<f64>)> {
        let mut probs = Vec::with_capacity(data.len());
        let mut mses = Vec::with_capacity(data.len());
        for chunk in data.samples.chunks(64) {
            let refs: Vec<&LabeledSample> = chunk.iter().collect();
            let (p, m) = self.eval_terms(&refs);
            probs.extend(p);
            mses.extend(m);
        }
        let labels = data.labels();
        let loss = combine_loss(self.weights, &probs, &labels, &mses)?;
        let set = ScoredSet::new(probs, labels, ScoreSource::SupRecon)?;
        let (acc, _) = accuracy_f1(&set, DECISION_THRESHOLD)?;
        Ok((loss, acc, auc_roc(&set).ok()))
    }

    /// Fails with the first classifier group whose content changed since build.
    pub fn verify_frozen(&self) -> Result<()> {
        if self.clf.content_hash() == self.clf_hash {
            return Ok(());
        }
        let drifted = self
            .clf
            .groups
            .iter()
            .zip(&self.clf_group_hashes)
            .find(|(g, h)| hash_groups(std::iter::once(*g)) != **h)
            .map(|(g, _)| g.id.clone())
            .unwrap_or_else(|| "<layout>".into());
        Err(Error::FrozenDrift(drifted))
    }
}

/// Loss of the ensemble on `batch` in inference mode.
pub fn ensemble_loss(ens: &Ensemble, batch: &[LabeledSample]) -> Result<f64> {
    ens.loss(batch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EnsembleTrainOptions {
    fn default() -> Self {
        EnsembleTrainOptions {
            epochs: 10,
            batch_size: 32,
            lr: 1e-4,
            seed: 0,
        }
    }
}

/// Fine-tunes the autoencoder under the frozen classifier. Returns the
/// supervised autoencoder from the best validation epoch, tagged with its
/// lineage, and leaves the ensemble holding those parameters.
pub fn train_ensemble(
    ens: &mut Ensemble,
    train: &LabeledDataset,
    val: &LabeledDataset,
    options: &EnsembleTrainOptions,
) -> Result<(ModelParameters, TrainingHistory)> {
    if options.epochs == 0 {
        return Err(Error::InvalidConfig("epochs must be at least 1".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidConfig("training and validation sets must be non-empty".into()));
    }
    ens.check_batch(&train.samples)?;
    ens.verify_frozen()?;
    let source_ae = ens.ae.content_hash();
    let mut adam = Adam::new(options.lr, ens.ae.groups.len());
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut history = TrainingHistory::default();
    let mut best = BestKeeper::new();
    for epoch in 1..=options.epochs {
        let clock = Stopwatch::start();
        let mut sum = 0.0;
        for batch in epoch_batches(train.len(), options.batch_size, &mut rng) {
            let samples: Vec<&LabeledSample> = batch.iter().map(|&i| &train.samples[i]).collect();
            let (loss, grads, updates) = ens.loss_and_grads(&samples, Mode::Train).map_err(|e| match e {
                Error::NonFiniteSample { .. } => Error::NonFinite {
                    stage: "ensemble".into(),
                    epoch,
                },
                other => other,
            })?;
            sum += loss * samples.len() as f64;
            adam.step(&mut ens.ae.groups, &grads);
            commit_stats(&mut ens.ae.groups, &updates);
        }
        let (val_loss, val_acc, val_auc) = ens.evaluate(val)?;
        if !val_loss.is_finite() || !ens.ae.all_finite() {
            return Err(Error::NonFinite {
                stage: "ensemble".into(),
                epoch,
            });
        }
        best.observe(epoch, val_loss, &ens.ae.groups);
        history.push(EpochRecord {
            epoch,
            stage: None,
            train_loss: sum / train.len() as f64,
            val_loss,
            val_accuracy: Some(val_acc),
            val_auc,
            wall_clock_secs: clock.secs(),
        });
    }
    ens.verify_frozen()?;
    if let Some(groups) = best.best_groups {
        ens.ae.groups = groups;
    }
    history.best_epoch = best.best_epoch;
    let mut ae = ens.ae.clone();
    ae.provenance.insert("source_autoencoder".into(), source_ae);
    ae.provenance.insert("supervising_classifier".into(), ens.clf_hash.clone());
    ae.provenance.insert(
        "loss_weights".into(),
        format!("supervised={},reconstruction={}", ens.weights.supervised, ens.weights.reconstruction),
    );
    Ok((ae, history))
}

/// Dense row-major matrix for the linear supervised-autoencoder reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{rows}x{cols} values"), data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Row vector times matrix.
    fn left_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            out.iter_mut().zip(row).for_each(|(o, &m)| *o += vr * m);
        }
        out
    }
}

/// Linear supervised autoencoder objective in row-vector form: with latent
/// `h_i = x_i F`, returns `(1/2t) * sum_i [|h_i W_p - y_i|^2 + |h_i W_r - x_i|^2]`.
///
/// Shapes: `F` is `d x k`, `W_p` is `k x m`, `W_r` is `k x d`; each `x_i` has
/// length `d` and each `y_i` length `m`.
pub fn linear_sae_objective(f: &Matrix, w_p: &Matrix, w_r: &Matrix, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<f64> {
    let (d, k) = (f.rows, f.cols);
    let m = w_p.cols;
    if w_p.rows != k || w_r.rows != k || w_r.cols != d {
        return Err(Error::shape(
            format!("W_p {k}x?, W_r {k}x{d}"),
            format!("W_p {}x{}, W_r {}x{}", w_p.rows, w_p.cols, w_r.rows, w_r.cols),
        ));
    }
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::InvalidConfig("need a non-empty batch with one target per input".into()));
    }
    let mut total = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        if x.len() != d || y.len() != m {
            return Err(Error::shape(format!("x of {d}, y of {m}"), format!("x of {}, y of {}", x.len(), y.len())));
        }
        let h = f.left_mul(x);
        let pred = w_p.left_mul(&h);
        let recon = w_r.left_mul(&h);
        total += pred.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        total += recon.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / (2.0 * xs.len() as f64))
}
