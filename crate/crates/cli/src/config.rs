//! The run configuration file.
//!
//! A single TOML document with one table per pipeline stage:
//!
//! ```toml
//! [dataset]
//! source = "synthetic"        # or "disk"
//! n = 2500                    # synthetic only
//! seed = 7                    # generation and train/val split
//! val_fraction = 0.2
//! positive_fraction = 0.5     # synthetic only, default 0.5
//! geometry = [32, 32, 3]      # synthetic only, default [96, 96, 3]
//! # path = "patches"          # disk only; manifest defaults to <path>/manifest.tsv
//!
//! [ae]
//! block_widths = [16, 16, 8]  # or: preset = "66" (needs 96x96x3 input)
//! epochs = 20
//! lr = 1e-3
//! batch_size = 32             # default 32
//! seed = 7
//!
//! [clf]
//! schedule = "desk"           # or "long-transfer", or [[clf.stages]] tables
//! widths = [16, 32, 64]       # default
//! seed = 7
//!
//! [ensemble]
//! supervised_weight = 1.0     # default 1
//! reconstruction_weight = 0.0 # default 0
//! epochs = 10
//! lr = 1e-4
//! seed = 7
//!
//! [output]
//! workspace = "runs/desk"
//! ```
//!
//! Relative paths resolve against the directory holding the config file.
//! Every stochastic stage has a mandatory `seed`.

use std::path::{Path, PathBuf};

use hcae::classifier::SCRATCH_BACKBONE;
use hcae::{ClassifierSpec, CompressionConfig, FineTuneSchedule, Geometry, LossWeights, Stage};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub ae: AeConfig,
    pub clf: ClfConfig,
    pub ensemble: EnsembleConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Disk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub n: Option<usize>,
    pub seed: u64,
    pub val_fraction: f64,
    #[serde(default = "default_positive_fraction")]
    pub positive_fraction: f64,
    #[serde(default = "default_geometry")]
    pub geometry: [usize; 3],
    pub path: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeConfig {
    pub preset: Option<String>,
    pub block_widths: Option<Vec<usize>>,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClfConfig {
    #[serde(default = "default_backbone")]
    pub backbone: String,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    pub schedule: Option<String>,
    pub stages: Option<Vec<Stage>>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "one")]
    pub supervised_weight: f64,
    #[serde(default)]
    pub reconstruction_weight: f64,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub workspace: PathBuf,
}

fn default_positive_fraction() -> f64 {
    0.5
}

fn default_geometry() -> [usize; 3] {
    [96, 96, 3]
}

fn default_batch() -> usize {
    32
}

fn default_backbone() -> String {
    SCRATCH_BACKBONE.into()
}

fn default_widths() -> Vec<usize> {
    vec![16, 32, 64]
}

fn one() -> f64 {
    1.0
}

fn bad(key: &str, message: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {message}"))
}

fn positive_lr(key: &str, lr: f64) -> Result<(), CliError> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(bad(key, format!("learning rate must be positive and finite, got {lr}")))
    }
}

fn at_least_one(key: &str, v: usize) -> Result<(), CliError> {
    if v >= 1 {
        Ok(())
    } else {
        Err(bad(key, "must be at least 1"))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim().to_string();
            if path.is_empty() || path == "." {
                CliError::Config(msg)
            } else {
                CliError::Config(format!("{path}: {msg}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output.workspace);
        if let Some(p) = self.dataset.path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.dataset.manifest.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.dataset;
        if !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
            return Err(bad("dataset.val_fraction", format!("must lie in (0, 1), got {}", d.val_fraction)));
        }
        match d.source {
            DataSource::Synthetic => {
                match d.n {
                    None => return Err(bad("dataset.n", "required when dataset.source is \"synthetic\"")),
                    Some(n) if n < 2 => return Err(bad("dataset.n", "need at least 2 samples")),
                    _ => {}
                }
                if !(d.positive_fraction > 0.0 && d.positive_fraction < 1.0) {
                    return Err(bad("dataset.positive_fraction", "must lie in (0, 1)"));
                }
                let g = self.synthetic_geometry();
                g.validate().map_err(|e| bad("dataset.geometry", e))?;
                if g.height.min(g.width) < hcae::datasets::MIN_SYNTHETIC_SIDE {
                    return Err(bad(
                        "dataset.geometry",
                        format!("synthetic patches need sides of at least {}", hcae::datasets::MIN_SYNTHETIC_SIDE),
                    ));
                }
            }
            DataSource::Disk => {
                if d.path.is_none() {
                    return Err(bad("dataset.path", "required when dataset.source is \"disk\""));
                }
            }
        }

        let a = &self.ae;
        match (&a.preset, &a.block_widths) {
            (Some(_), Some(_)) => return Err(bad("ae.preset", "give either ae.preset or ae.block_widths, not both")),
            (None, None) => return Err(bad("ae.preset", "one of ae.preset or ae.block_widths is required")),
            (Some(p), None) => {
                let c = CompressionConfig::preset(p).map_err(|e| bad("ae.preset", e))?;
                let g = self.synthetic_geometry();
                if d.source == DataSource::Synthetic && c.input != g {
                    return Err(bad("ae.preset", format!("preset `{p}` expects {} input, dataset.geometry is {g}", c.input)));
                }
            }
            (None, Some(w)) => {
                if w.is_empty() || w.contains(&0) {
                    return Err(bad("ae.block_widths", "must be a non-empty list of positive widths"));
                }
            }
        }
        at_least_one("ae.epochs", a.epochs)?;
        at_least_one("ae.batch_size", a.batch_size)?;
        positive_lr("ae.lr", a.lr)?;

        let c = &self.clf;
        match (&c.schedule, &c.stages) {
            (Some(_), Some(_)) => return Err(bad("clf.schedule", "give either clf.schedule or clf.stages, not both")),
            (None, None) => return Err(bad("clf.schedule", "one of clf.schedule or clf.stages is required")),
            (Some(s), None) if s != "desk" && s != "long-transfer" => {
                return Err(bad("clf.schedule", format!("unknown schedule `{s}` (expected desk or long-transfer)")))
            }
            (None, Some(stages)) => {
                if stages.is_empty() {
                    return Err(bad("clf.stages", "needs at least one stage"));
                }
                for (i, s) in stages.iter().enumerate() {
                    positive_lr(&format!("clf.stages[{i}].lr"), s.lr)?;
                }
            }
            _ => {}
        }
        if c.backbone != SCRATCH_BACKBONE {
            return Err(bad("clf.backbone", format!("unknown backbone `{}` (available: {SCRATCH_BACKBONE})", c.backbone)));
        }
        if c.widths.is_empty() || c.widths.contains(&0) {
            return Err(bad("clf.widths", "must be a non-empty list of positive widths"));
        }
        at_least_one("clf.batch_size", c.batch_size)?;

        let e = &self.ensemble;
        LossWeights::new(e.supervised_weight, e.reconstruction_weight).map_err(|err| bad("ensemble.supervised_weight", err))?;
        at_least_one("ensemble.epochs", e.epochs)?;
        at_least_one("ensemble.batch_size", e.batch_size)?;
        positive_lr("ensemble.lr", e.lr)?;
        Ok(())
    }

    pub fn synthetic_geometry(&self) -> Geometry {
        let [h, w, c] = self.dataset.geometry;
        Geometry::new(h, w, c)
    }

    /// Autoencoder architecture for data of geometry `g`.
    pub fn compression_config(&self, g: Geometry) -> Result<CompressionConfig, CliError> {
        match (&self.ae.preset, &self.ae.block_widths) {
            (Some(p), _) => {
                let c = CompressionConfig::preset(p).map_err(|e| bad("ae.preset", e))?;
                if c.input != g {
                    return Err(bad("ae.preset", format!("preset `{p}` expects {} input, the dataset is {g}", c.input)));
                }
                Ok(c)
            }
            (None, Some(w)) => {
                let name = format!("w{}", w.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("-"));
                CompressionConfig::new(name, g, w.clone()).map_err(|e| bad("ae.block_widths", e))
            }
            (None, None) => Err(bad("ae.preset", "one of ae.preset or ae.block_widths is required")),
        }
    }

    pub fn classifier_spec(&self, g: Geometry) -> Result<ClassifierSpec, CliError> {
        let spec = ClassifierSpec {
            backbone: self.clf.backbone.clone(),
            backbone_widths: self.clf.widths.clone(),
            input: g,
        };
        spec.validate().map_err(|e| bad("clf.widths", e))?;
        Ok(spec)
    }

    pub fn schedule(&self) -> FineTuneSchedule {
        match (&self.clf.schedule, &self.clf.stages) {
            (_, Some(stages)) => FineTuneSchedule { stages: stages.clone() },
            (Some(s), None) if s == "long-transfer" => FineTuneSchedule::long_transfer(),
            _ => FineTuneSchedule::desk(),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights::new(self.ensemble.supervised_weight, self.ensemble.reconstruction_weight)
            .expect("validated when the config was loaded")
    }
}
