//! Distortion and classification metrics, and the three-way evaluation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autoencoder::reconstruct;
use crate::classifier::{predict_batch, DECISION_THRESHOLD};
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::params::ModelParameters;
use crate::patch::ImagePatch;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_geometry(a: &ImagePatch, b: &ImagePatch) -> Result<()> {
    if a.geometry() != b.geometry() {
        return Err(Error::shape(a.geometry(), b.geometry()));
    }
    Ok(())
}

/// Mean of squared differences over all `H * W * C` values.
pub fn mse(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    same_geometry(a, b)?;
    let sum: f64 = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.pixels().len() as f64)
}

/// `10 log10(peak^2 / mse)`; `f64::INFINITY` for identical inputs.
pub fn psnr(a: &ImagePatch, b: &ImagePatch, peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(Error::InvalidConfig(format!("PSNR peak must be positive, got {peak}")));
    }
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Mean structural similarity over all fully contained `window x window`
/// Gaussian-weighted positions (sigma 1.5), averaged over channels, for
/// unit dynamic range.
pub fn ssim(a: &ImagePatch, b: &ImagePatch, window: usize, k1: f64, k2: f64) -> Result<f64> {
    same_geometry(a, b)?;
    let (h, w, ch) = a.shape();
    if window == 0 || window > h.min(w) {
        return Err(Error::InvalidConfig(format!(
            "SSIM window {window} does not fit a {h}x{w} patch"
        )));
    }
    let kernel = gaussian_kernel(window, SSIM_SIGMA);
    let (c1, c2) = ((k1 * 1.0).powi(2), (k2 * 1.0).powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        for y0 in 0..=h - window {
            for x0 in 0..=w - window {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..window {
                    for dx in 0..window {
                        let k = kernel[dy * window + dx];
                        let (va, vb) = (a.get(y0 + dy, x0 + dx, c), b.get(y0 + dy, x0 + dx, c));
                        ma += k * va;
                        mb += k * vb;
                        saa += k * va * va;
                        sbb += k * vb * vb;
                        sab += k * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// SSIM with the canonical 11x11 window and constants `(0.01, 0.03)`.
pub fn ssim_default(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    let window = SSIM_WINDOW.min(a.height().min(a.width()));
    ssim(a, b, window, SSIM_K1, SSIM_K2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    Original,
    UnsupRecon,
    SupRecon,
}

impl ScoreSource {
    pub fn label(self) -> &'static str {
        match self {
            ScoreSource::Original => "original",
            ScoreSource::UnsupRecon => "unsup_recon",
            ScoreSource::SupRecon => "sup_recon",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub source: ScoreSource,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>, source: ScoreSource) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape(format!("{} labels", scores.len()), labels.len()));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidConfig("labels must be 0 or 1".into()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidConfig("scores contain NaN".into()));
        }
        Ok(ScoredSet { scores, labels, source })
    }
}

/// ROC points `(false positive rate, true positive rate)` from the strictest
/// threshold to the loosest; tied scores move along a single diagonal segment.
pub fn roc_curve(set: &ScoredSet) -> Result<Vec<(f64, f64)>> {
    let positives = set.labels.iter().filter(|&&l| l == 1).count();
    let negatives = set.labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidConfig(format!(
            "AUC needs both classes, got {positives} positive and {negatives} negative samples"
        )));
    }
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let score = set.scores[order[i]];
        while i < order.len() && set.scores[order[i]] == score {
            if set.labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
    }
    Ok(points)
}

/// Area under the ROC curve by the trapezoidal rule; ties earn half credit.
pub fn auc_roc(set: &ScoredSet) -> Result<f64> {
    let points = roc_curve(set)?;
    Ok(points
        .windows(2)
        .map(|p| (p[1].0 - p[0].0) * (p[1].1 + p[0].1) / 2.0)
        .sum())
}

/// `(accuracy, F1)` with a sample predicted positive when its score exceeds
/// `threshold`. F1 is 0 when nothing is predicted positive.
pub fn accuracy_f1(set: &ScoredSet, threshold: f64) -> Result<(f64, f64)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidConfig(format!("threshold {threshold} outside (0, 1)")));
    }
    if set.scores.is_empty() {
        return Err(Error::InvalidConfig("cannot score an empty set".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        match (s > threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let accuracy = (tp + tn) as f64 / set.scores.len() as f64;
    let f1 = if tp + fp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    Ok((accuracy, f1))
}

mod psnr_token {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Token {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Token::deserialize(d)? {
            Token::Num(v) => Ok(v),
            Token::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Token::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR token `{t}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub source: ScoreSource,
    pub auc_roc: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub mean_mse: f64,
    /// Serialized as the token `inf` for exact reconstructions.
    #[serde(with = "psnr_token")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub samples: usize,
    pub checkpoint_ids: BTreeMap<String, String>,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, source: ScoreSource) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.source == source)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "dataset {} ({} samples)", self.dataset_id, self.samples);
        for (k, v) in &self.checkpoint_ids {
            let _ = writeln!(out, "  {k}: {v}");
        }
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>9} {:>7} {:>10} {:>9} {:>7}",
            "source", "auc_roc", "accuracy", "f1", "mse", "psnr_db", "ssim"
        );
        for r in &self.rows {
            let psnr = if r.mean_psnr.is_infinite() {
                "inf".to_string()
            } else {
                format!("{:.3}", r.mean_psnr)
            };
            let _ = writeln!(
                out,
                "{:<12} {:>8.4} {:>9.4} {:>7.4} {:>10.6} {:>9} {:>7.4}",
                r.source.label(),
                r.auc_roc,
                r.accuracy,
                r.f1,
                r.mean_mse,
                psnr,
                r.mean_ssim
            );
        }
        out
    }

    /// Bar chart of AUC per source: magenta original, grey unsupervised, blue supervised.
    pub fn render_bar_chart(&self, path: &Path) -> Result<()> {
        let (width, height, margin) = (360u32, 240u32, 20u32);
        let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
        let plot_h = height - 2 * margin;
        for x in margin..width - margin {
            img.put_pixel(x, height - margin, Rgb([0, 0, 0]));
            // guide lines at AUC 0.5 and 1.0
            for level in [0.5, 1.0] {
                let y = height - margin - (level * plot_h as f64) as u32;
                if x % 4 < 2 {
                    img.put_pixel(x, y, Rgb([170, 170, 170]));
                }
            }
        }
        let bar_w = (width - 2 * margin) / (self.rows.len().max(1) as u32 * 2);
        for (i, row) in self.rows.iter().enumerate() {
            let color = match row.source {
                ScoreSource::Original => Rgb([200, 0, 200]),
                ScoreSource::UnsupRecon => Rgb([128, 128, 128]),
                ScoreSource::SupRecon => Rgb([40, 90, 220]),
            };
            let x0 = margin + bar_w / 2 + i as u32 * 2 * bar_w;
            let bar_h = (row.auc_roc.clamp(0.0, 1.0) * plot_h as f64) as u32;
            for x in x0..x0 + bar_w {
                for y in height - margin - bar_h..height - margin {
                    img.put_pixel(x, y, color);
                }
            }
        }
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn short_id(params: &ModelParameters) -> String {
    params.content_hash()[..16].to_string()
}

fn row_for(
    source: ScoreSource,
    clf: &ModelParameters,
    originals: &[&ImagePatch],
    images: &[&ImagePatch],
    labels: &[u8],
) -> Result<EvalRow> {
    let scores = predict_batch(clf, images)?;
    let set = ScoredSet::new(scores, labels.to_vec(), source)?;
    let auc = auc_roc(&set)?;
    let (accuracy, f1) = accuracy_f1(&set, DECISION_THRESHOLD)?;
    let n = originals.len() as f64;
    let (mut m, mut p, mut s) = (0.0, 0.0, 0.0);
    for (o, r) in originals.iter().zip(images) {
        let e = mse(o, r)?;
        m += e;
        p += psnr_from_mse(e, 1.0);
        s += ssim_default(o, r)?;
    }
    Ok(EvalRow {
        source,
        auc_roc: auc,
        accuracy,
        f1,
        mean_mse: m / n,
        mean_psnr: p / n,
        mean_ssim: s / n,
    })
}

/// Scores the classifier on originals and on both reconstruction streams.
/// Distortion columns compare each stream against the originals.
pub fn evaluate_triplet(
    clf: &ModelParameters,
    ae_unsup: &ModelParameters,
    ae_sup: &ModelParameters,
    val: &LabeledDataset,
) -> Result<EvalReport> {
    if val.is_empty() {
        return Err(Error::InvalidConfig("evaluation set is empty".into()));
    }
    let originals: Vec<&ImagePatch> = val.patches().collect();
    let labels = val.labels();
    let unsup = reconstruct(ae_unsup, &originals)?;
    let sup = reconstruct(ae_sup, &originals)?;
    let unsup_refs: Vec<&ImagePatch> = unsup.iter().collect();
    let sup_refs: Vec<&ImagePatch> = sup.iter().collect();
    let rows = vec![
        row_for(ScoreSource::Original, clf, &originals, &originals, &labels)?,
        row_for(ScoreSource::UnsupRecon, clf, &originals, &unsup_refs, &labels)?,
        row_for(ScoreSource::SupRecon, clf, &originals, &sup_refs, &labels)?,
    ];
    let mut checkpoint_ids = BTreeMap::new();
    checkpoint_ids.insert("classifier".to_string(), short_id(clf));
    checkpoint_ids.insert("ae_unsupervised".to_string(), short_id(ae_unsup));
    checkpoint_ids.insert("ae_supervised".to_string(), short_id(ae_sup));
    Ok(EvalReport {
        dataset_id: format!("seed-{}", val.seed),
        samples: val.len(),
        checkpoint_ids,
        rows,
    })
}
