//! Browser bindings: synthetic patch rendering, an in-page codec round trip,
//! and an ROC/AUC explorer. Everything also runs natively for testing.

use hcae::codec::{compress_patch, decompress_bytes, split_autoencoder, CodecArtifact, QuantMode};
use hcae::metrics::{accuracy_f1, auc_roc, mse, psnr, roc_curve, ssim_default, ScoreSource, ScoredSet};
use hcae::{
    build_autoencoder, generate_synthetic_dataset, split, train_autoencoder, AeTrainOptions, CompressionConfig, Geometry,
    ImagePatch, LabeledSample,
};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const DEMO_SIDE: usize = 32;

fn msg(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn rgba(patch: &ImagePatch) -> Vec<u8> {
    patch.to_u8().chunks(patch.channels()).flat_map(|px| [px[0], px[1], px[2], 255]).collect()
}

fn synthetic_sample(seed: u64, side: usize, positive: bool) -> Result<LabeledSample, String> {
    let data = generate_synthetic_dataset(2, seed, 0.5, Geometry::new(side, side, 3)).map_err(msg)?;
    Ok(data.samples.into_iter().find(|s| (s.label == 1) == positive).expect("one sample of each label"))
}

/// RGBA pixels of a synthetic patch, row-major, `side * side * 4` bytes.
#[wasm_bindgen]
pub fn render_patch(seed: u64, side: usize, positive: bool) -> Result<Vec<u8>, String> {
    Ok(rgba(&synthetic_sample(seed, side, positive)?.patch))
}

/// `[top, bottom, left, right]` of the labeling window, bottom/right exclusive.
#[wasm_bindgen]
pub fn center_window(side: usize) -> Vec<usize> {
    let (t, b, l, r) = Geometry::new(side, side, 3).center_bounds();
    vec![t, b, l, r]
}

/// A small autoencoder trained in the page, split into encoder and decoder.
#[wasm_bindgen]
pub struct CodecDemo {
    encoder: CodecArtifact,
    decoder: CodecArtifact,
    ratio: f64,
    final_loss: f64,
}

#[wasm_bindgen]
pub struct RoundTrip {
    original: Vec<u8>,
    reconstruction: Vec<u8>,
    label: u8,
    /// Latent file size in bytes.
    pub bytes: usize,
    /// Latent file size over the 8-bit source size.
    pub byte_ratio: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[wasm_bindgen]
impl RoundTrip {
    pub fn original(&self) -> Vec<u8> {
        self.original.clone()
    }

    pub fn reconstruction(&self) -> Vec<u8> {
        self.reconstruction.clone()
    }

    pub fn label(&self) -> u8 {
        self.label
    }
}

#[wasm_bindgen]
impl CodecDemo {
    /// Trains a 32x32x3 autoencoder with two blocks of width `width` on
    /// `samples` synthetic patches.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, samples: usize, epochs: usize, width: usize) -> Result<CodecDemo, String> {
        let g = Geometry::new(DEMO_SIDE, DEMO_SIDE, 3);
        let data = generate_synthetic_dataset(samples.max(4), seed, 0.5, g).map_err(msg)?;
        let (train, val) = split(&data, 0.25, seed).map_err(msg)?;
        let config = CompressionConfig::new("demo", g, vec![width.max(1); 2]).map_err(msg)?;
        let ratio = config.dimensionality_ratio();
        let ae = build_autoencoder(config, seed).map_err(msg)?;
        let options = AeTrainOptions {
            epochs: epochs.max(1),
            batch_size: 16,
            lr: 3e-3,
            seed,
        };
        let (ae, history) = train_autoencoder(ae, &train, &val, &options).map_err(msg)?;
        let (encoder, decoder) = split_autoencoder(&ae).map_err(msg)?;
        Ok(CodecDemo {
            encoder,
            decoder,
            ratio,
            final_loss: history.last_train_loss().unwrap_or(f64::NAN),
        })
    }

    pub fn dimensionality_ratio(&self) -> f64 {
        self.ratio
    }

    pub fn final_train_loss(&self) -> f64 {
        self.final_loss
    }

    /// Compresses a fresh synthetic patch to latent-file bytes and decodes it.
    pub fn round_trip(&self, seed: u64, positive: bool, quantize: bool) -> Result<RoundTrip, String> {
        let sample = synthetic_sample(seed, DEMO_SIDE, positive)?;
        let x = ImagePatch::from_u8(DEMO_SIDE, DEMO_SIDE, 3, &sample.patch.to_u8()).map_err(msg)?;
        let mode = if quantize { QuantMode::Affine8 } else { QuantMode::Float32 };
        let bytes = compress_patch(&self.encoder, &x, mode).map_err(msg)?;
        let y = decompress_bytes(&self.decoder, &bytes).map_err(msg)?;
        let y = ImagePatch::from_u8(DEMO_SIDE, DEMO_SIDE, 3, &y.to_u8()).map_err(msg)?;
        Ok(RoundTrip {
            original: rgba(&x),
            reconstruction: rgba(&y),
            label: sample.label,
            bytes: bytes.len(),
            byte_ratio: bytes.len() as f64 / x.pixels().len() as f64,
            mse: mse(&x, &y).map_err(msg)?,
            psnr: psnr(&x, &y, 1.0).map_err(msg)?,
            ssim: ssim_default(&x, &y).map_err(msg)?,
        })
    }
}

#[derive(Serialize)]
struct RocSummary {
    auc: f64,
    accuracy: f64,
    f1: f64,
    roc: Vec<(f64, f64)>,
}

/// AUC, thresholded accuracy/F1 and ROC points as a JSON object.
#[wasm_bindgen]
pub fn roc_explorer(scores: Vec<f64>, labels: Vec<u8>, threshold: f64) -> Result<String, String> {
    let set = ScoredSet::new(scores, labels, ScoreSource::Original).map_err(msg)?;
    let auc = auc_roc(&set).map_err(msg)?;
    let (accuracy, f1) = accuracy_f1(&set, threshold).map_err(msg)?;
    let roc = roc_curve(&set).map_err(msg)?;
    serde_json::to_string(&RocSummary { auc, accuracy, f1, roc }).map_err(msg)
}
