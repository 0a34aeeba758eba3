//! Symmetric convolutional compressive autoencoder.
//!
//! Encoder blocks are `conv3x3(same) -> batch-norm -> ReLU -> 2x2 max-pool`.
//! The decoder mirrors them with 2x2 nearest-neighbour up-sampling in place
//! of pooling, then a final `conv3x3 -> sigmoid` back to the input channels.
//! The latent volume keeps its spatial layout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{Grads, Mode, Sequential, StatUpdate};
use crate::params::{Architecture, Graph, LayoutBuilder, ModelParameters, ParamGroup};
use crate::patch::{Geometry, ImagePatch};
use crate::tensor::Tensor;
use crate::train::{commit_stats, epoch_batches, Adam, BestKeeper, EpochRecord, Stopwatch, TrainingHistory};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub name: String,
    pub input: Geometry,
    /// Output channels of each encoder block; the last one is the latent depth.
    pub block_widths: Vec<usize>,
}

impl CompressionConfig {
    pub fn new(name: impl Into<String>, input: Geometry, block_widths: Vec<usize>) -> Result<Self> {
        let config = CompressionConfig {
            name: name.into(),
            input,
            block_widths,
        };
        config.validate()?;
        Ok(config)
    }

    /// The 96x96x3 configurations: `"33"` (6x6x256), `"66"` (12x12x128) and `"83"` (12x12x160).
    pub fn preset(name: &str) -> Result<Self> {
        let widths = match name {
            "33" => vec![32, 64, 128, 256],
            "66" => vec![32, 64, 128],
            "83" => vec![32, 64, 160],
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown compression preset `{other}` (expected 33, 66 or 83)"
                )))
            }
        };
        CompressionConfig::new(name, Geometry::new(96, 96, 3), widths)
    }

    pub fn preset_names() -> [&'static str; 3] {
        ["33", "66", "83"]
    }

    pub fn blocks(&self) -> usize {
        self.block_widths.len()
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let f = 1usize << self.blocks();
        (
            self.input.height / f,
            self.input.width / f,
            *self.block_widths.last().unwrap_or(&0),
        )
    }

    pub fn latent_len(&self) -> usize {
        let (h, w, c) = self.latent_shape();
        h * w * c
    }

    /// Latent element count over input element count.
    pub fn dimensionality_ratio(&self) -> f64 {
        self.latent_len() as f64 / self.input.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.input.validate()?;
        if self.block_widths.is_empty() || self.block_widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "config `{}`: block widths must be non-empty and positive",
                self.name
            )));
        }
        let f = 1usize << self.blocks();
        if self.input.height % f != 0 || self.input.width % f != 0 {
            return Err(Error::InvalidGeometry(format!(
                "config `{}`: {}x{} is not divisible by 2^{} = {f}",
                self.name,
                self.input.height,
                self.input.width,
                self.blocks()
            )));
        }
        Ok(())
    }

    pub(crate) fn describe_encoder(&self, b: &mut LayoutBuilder) -> Sequential {
        let mut ops = Vec::new();
        let mut prev = self.input.channels;
        for (i, &width) in self.block_widths.iter().enumerate() {
            let prefix = format!("enc.block{i}");
            ops.push(b.conv(&prefix, prev, width));
            ops.push(b.batch_norm(&prefix, width));
            ops.push(crate::nn::Op::Relu);
            ops.push(crate::nn::Op::MaxPool);
            prev = width;
        }
        Sequential { ops }
    }

    pub(crate) fn describe_decoder(&self, b: &mut LayoutBuilder) -> Sequential {
        let mut ops = Vec::new();
        let mut prev = self.latent_shape().2;
        for (i, &width) in self.block_widths.iter().rev().enumerate() {
            let prefix = format!("dec.block{i}");
            ops.push(b.conv(&prefix, prev, width));
            ops.push(b.batch_norm(&prefix, width));
            ops.push(crate::nn::Op::Relu);
            ops.push(crate::nn::Op::Upsample);
            prev = width;
        }
        ops.push(b.conv("dec.out", prev, self.input.channels));
        ops.push(crate::nn::Op::Sigmoid);
        Sequential { ops }
    }

    pub(crate) fn describe(&self, b: &mut LayoutBuilder) -> Graph {
        let encoder = self.describe_encoder(b);
        let decoder = self.describe_decoder(b);
        Graph::Autoencoder { encoder, decoder }
    }
}

/// 8-bit affine quantization parameters, one `(scale, offset)` per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Quantization {
    None,
    Affine8 { scale: Vec<f32>, offset: Vec<f32> },
}

/// Encoder output: an `h x w x c` activation volume (row-major, interleaved
/// channels) stored at `f32` transmission precision.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub shape: (usize, usize, usize),
    pub activations: Vec<f32>,
    pub config_name: String,
    pub quantization: Quantization,
}

impl LatentCode {
    pub fn new(shape: (usize, usize, usize), activations: Vec<f32>, config_name: impl Into<String>) -> Result<Self> {
        if activations.len() != shape.0 * shape.1 * shape.2 {
            return Err(Error::shape(
                format!("{} activations", shape.0 * shape.1 * shape.2),
                activations.len(),
            ));
        }
        Ok(LatentCode {
            shape,
            activations,
            config_name: config_name.into(),
            quantization: Quantization::None,
        })
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        let (_, w, ch) = self.shape;
        self.activations[(y * w + x) * ch + c]
    }

    fn to_tensor(codes: &[&LatentCode]) -> Tensor {
        let (h, w, c) = codes[0].shape;
        let mut t = Tensor::zeros(codes.len(), c, h, w);
        for (i, code) in codes.iter().enumerate() {
            let dst = t.sample_mut(i);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        dst[ch * h * w + y * w + x] = f64::from(code.activations[(y * w + x) * c + ch]);
                    }
                }
            }
        }
        t
    }

    fn from_tensor(t: &Tensor, i: usize, config_name: &str) -> LatentCode {
        let (h, w, c) = (t.h, t.w, t.c);
        let src = t.sample(i);
        let mut activations = vec![0.0f32; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    activations[(y * w + x) * c + ch] = src[ch * h * w + y * w + x] as f32;
                }
            }
        }
        LatentCode {
            shape: (h, w, c),
            activations,
            config_name: config_name.into(),
            quantization: Quantization::None,
        }
    }
}

pub fn build_autoencoder(config: CompressionConfig, seed: u64) -> Result<ModelParameters> {
    ModelParameters::initialize(Architecture::Autoencoder(config), seed)
}

pub(crate) fn config_of(params: &ModelParameters) -> Result<&CompressionConfig> {
    match &params.architecture {
        Architecture::Autoencoder(c) => Ok(c),
        Architecture::Classifier(_) => Err(Error::InvalidConfig("expected autoencoder parameters, found a classifier".into())),
    }
}

/// Encoder and decoder halves of an autoencoder graph.
pub(crate) fn halves(params: &ModelParameters) -> Result<(Sequential, Sequential)> {
    match params.graph() {
        Graph::Autoencoder { encoder, decoder } => Ok((encoder, decoder)),
        Graph::Classifier { .. } => Err(Error::InvalidConfig("expected autoencoder parameters, found a classifier".into())),
    }
}

fn check_patches(config: &CompressionConfig, patches: &[&ImagePatch]) -> Result<()> {
    for p in patches {
        if p.geometry() != config.input {
            return Err(Error::shape(config.input, p.geometry()));
        }
    }
    Ok(())
}

/// Runs an encoder sequence over `groups` in inference mode.
pub(crate) fn run_encoder(
    config: &CompressionConfig,
    encoder: &Sequential,
    groups: &[ParamGroup],
    patches: &[&ImagePatch],
) -> Result<Vec<LatentCode>> {
    check_patches(config, patches)?;
    if patches.is_empty() {
        return Ok(Vec::new());
    }
    let latent = encoder.infer(groups, &Tensor::from_patches(patches.iter().copied()));
    Ok((0..latent.n).map(|i| LatentCode::from_tensor(&latent, i, &config.name)).collect())
}

pub(crate) fn run_decoder(
    config: &CompressionConfig,
    decoder: &Sequential,
    groups: &[ParamGroup],
    codes: &[&LatentCode],
) -> Result<Vec<ImagePatch>> {
    let expected = config.latent_shape();
    for c in codes {
        if c.shape != expected {
            return Err(Error::shape(format!("{expected:?}"), format!("{:?}", c.shape)));
        }
    }
    if codes.is_empty() {
        return Ok(Vec::new());
    }
    let out = decoder.infer(groups, &LatentCode::to_tensor(codes));
    Ok((0..out.n).map(|i| out.to_patch(i)).collect())
}

pub fn encode(params: &ModelParameters, patch: &ImagePatch) -> Result<LatentCode> {
    Ok(encode_batch(params, &[patch])?.remove(0))
}

pub fn encode_batch(params: &ModelParameters, patches: &[&ImagePatch]) -> Result<Vec<LatentCode>> {
    let config = config_of(params)?;
    let (encoder, _) = halves(params)?;
    run_encoder(config, &encoder, &params.groups, patches)
}

pub fn decode(params: &ModelParameters, code: &LatentCode) -> Result<ImagePatch> {
    Ok(decode_batch(params, &[code])?.remove(0))
}

pub fn decode_batch(params: &ModelParameters, codes: &[&LatentCode]) -> Result<Vec<ImagePatch>> {
    let config = config_of(params)?;
    let (_, decoder) = halves(params)?;
    run_decoder(config, &decoder, &params.groups, codes)
}

/// `decode(encode(x))` for every patch, processed in chunks.
pub fn reconstruct(params: &ModelParameters, patches: &[&ImagePatch]) -> Result<Vec<ImagePatch>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(64) {
        let codes = encode_batch(params, chunk)?;
        let refs: Vec<&LatentCode> = codes.iter().collect();
        out.extend(decode_batch(params, &refs)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seeds mini-batch shuffling.
    pub seed: u64,
}

impl Default for AeTrainOptions {
    fn default() -> Self {
        AeTrainOptions {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Full-precision forward pass used by training: (reconstruction, tapes).
pub(crate) fn mse_and_grad(recon: &Tensor, target: &Tensor) -> (f64, Tensor) {
    let n = recon.data.len() as f64;
    let mut grad = Tensor::zeros(recon.n, recon.c, recon.h, recon.w);
    let mut loss = 0.0;
    for ((g, r), t) in grad.data.iter_mut().zip(&recon.data).zip(&target.data) {
        let d = r - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    (loss / n, grad)
}

fn mse_loss_and_grads(
    encoder: &Sequential,
    decoder: &Sequential,
    groups: &[ParamGroup],
    x: &Tensor,
    mode: Mode,
) -> (f64, Grads, Vec<StatUpdate>) {
    let (latent, enc_tape) = encoder.forward(groups, x, mode);
    let (recon, dec_tape) = decoder.forward(groups, &latent, mode);
    let (loss, grad) = mse_and_grad(&recon, x);
    let mut updates = enc_tape.stat_updates.clone();
    updates.extend(dec_tape.stat_updates.iter().cloned());
    let (mut grads, dlatent) = decoder.backward(groups, dec_tape, grad, true);
    let (enc_grads, _) = encoder.backward(groups, enc_tape, dlatent.expect("latent gradient"), false);
    grads.merge(enc_grads);
    (loss, grads, updates)
}

/// Reconstruction MSE of a batch and its gradient for every trainable group.
/// In `Mode::Train` batch-norm layers use batch statistics; the resulting
/// running-statistic updates are returned, not applied.
pub fn loss_and_grads(params: &ModelParameters, patches: &[&ImagePatch], mode: Mode) -> Result<(f64, Grads, Vec<StatUpdate>)> {
    let config = config_of(params)?;
    check_patches(config, patches)?;
    if patches.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let (encoder, decoder) = halves(params)?;
    let x = Tensor::from_patches(patches.iter().copied());
    Ok(mse_loss_and_grads(&encoder, &decoder, &params.groups, &x, mode))
}

/// Mean squared reconstruction error of `params` in inference mode.
pub fn reconstruction_loss(params: &ModelParameters, data: &LabeledDataset) -> Result<f64> {
    let (encoder, decoder) = halves(params)?;
    let config = config_of(params)?;
    let patches: Vec<&ImagePatch> = data.patches().collect();
    check_patches(config, &patches)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in patches.chunks(64) {
        let x = Tensor::from_patches(chunk.iter().copied());
        let recon = decoder.infer(&params.groups, &encoder.infer(&params.groups, &x));
        let (loss, _) = mse_and_grad(&recon, &x);
        total += loss * x.data.len() as f64;
        count += x.data.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Unsupervised training on MSE between reconstruction and input; labels are ignored.
/// Returns the parameters from the epoch with the lowest validation loss.
pub fn train_autoencoder(
    params: ModelParameters,
    train: &LabeledDataset,
    val: &LabeledDataset,
    options: &AeTrainOptions,
) -> Result<(ModelParameters, TrainingHistory)> {
    if options.epochs == 0 {
        return Err(Error::InvalidConfig("epochs must be at least 1".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidConfig("training and validation sets must be non-empty".into()));
    }
    let config = config_of(&params)?.clone();
    let (encoder, decoder) = halves(&params)?;
    let patches: Vec<&ImagePatch> = train.patches().collect();
    check_patches(&config, &patches)?;
    let mut params = params;
    let mut adam = Adam::new(options.lr, params.groups.len());
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut history = TrainingHistory::default();
    let mut best = BestKeeper::new();
    for epoch in 1..=options.epochs {
        let clock = Stopwatch::start();
        let mut sum = 0.0;
        for batch in epoch_batches(patches.len(), options.batch_size, &mut rng) {
            let x = Tensor::from_patches(batch.iter().map(|&i| patches[i]));
            let (loss, grads, updates) = mse_loss_and_grads(&encoder, &decoder, &params.groups, &x, Mode::Train);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    stage: "autoencoder".into(),
                    epoch,
                });
            }
            sum += loss * batch.len() as f64;
            adam.step(&mut params.groups, &grads);
            commit_stats(&mut params.groups, &updates);
        }
        let train_loss = sum / patches.len() as f64;
        let val_loss = reconstruction_loss(&params, val)?;
        if !train_loss.is_finite() || !val_loss.is_finite() || !params.all_finite() {
            return Err(Error::NonFinite {
                stage: "autoencoder".into(),
                epoch,
            });
        }
        best.observe(epoch, val_loss, &params.groups);
        history.push(EpochRecord {
            epoch,
            stage: None,
            train_loss,
            val_loss,
            val_accuracy: None,
            val_auc: None,
            wall_clock_secs: clock.secs(),
        });
    }
    if let Some(groups) = best.best_groups {
        params.groups = groups;
    }
    history.best_epoch = best.best_epoch;
    Ok((params, history))
}
