//! Parameter groups, trainability masks and the on-disk checkpoint format.
//!
//! A checkpoint is a directory holding `manifest.json` plus one flat
//! little-endian `f64` file per parameter group under `groups/`. Reloading a
//! checkpoint reproduces every value bit-exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::CompressionConfig;
use crate::classifier::ClassifierSpec;
use crate::error::{Error, Result};
use crate::nn::{Op, Sequential};

const CHECKPOINT_FORMAT: &str = "hcae-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    ConvWeight,
    DenseWeight,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl GroupKind {
    /// Running statistics are carried along with a block but never receive gradients.
    pub fn is_statistic(self) -> bool {
        matches!(self, GroupKind::BnRunningMean | GroupKind::BnRunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub id: String,
    pub kind: GroupKind,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: Vec<f64>,
}

impl ParamGroup {
    fn fan_in(&self) -> usize {
        self.shape[1..].iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Architecture {
    Autoencoder(CompressionConfig),
    Classifier(ClassifierSpec),
}

/// The two network shapes a parameter store can describe.
#[derive(Clone, Debug, PartialEq)]
pub enum Graph {
    Autoencoder {
        encoder: Sequential,
        decoder: Sequential,
    },
    Classifier {
        net: Sequential,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub architecture: Architecture,
    pub seed: u64,
    pub groups: Vec<ParamGroup>,
    /// Free-form lineage recorded into checkpoints (source checkpoints, loss weights).
    pub provenance: BTreeMap<String, String>,
}

/// Accumulates parameter groups while a network layout is being described.
#[derive(Default)]
pub(crate) struct LayoutBuilder {
    groups: Vec<ParamGroup>,
}

impl LayoutBuilder {
    fn push(&mut self, id: String, kind: GroupKind, shape: Vec<usize>) -> usize {
        let len = shape.iter().product();
        let fill = if kind == GroupKind::BnGamma || kind == GroupKind::BnRunningVar {
            1.0
        } else {
            0.0
        };
        self.groups.push(ParamGroup {
            id,
            kind,
            shape,
            trainable: true,
            data: vec![fill; len],
        });
        self.groups.len() - 1
    }

    pub(crate) fn conv(&mut self, prefix: &str, cin: usize, cout: usize) -> Op {
        let weight = self.push(format!("{prefix}.conv.weight"), GroupKind::ConvWeight, vec![cout, cin, 3, 3]);
        let bias = self.push(format!("{prefix}.conv.bias"), GroupKind::Bias, vec![cout]);
        Op::Conv {
            weight,
            bias,
            cin,
            cout,
        }
    }

    pub(crate) fn batch_norm(&mut self, prefix: &str, channels: usize) -> Op {
        let gamma = self.push(format!("{prefix}.bn.gamma"), GroupKind::BnGamma, vec![channels]);
        let beta = self.push(format!("{prefix}.bn.beta"), GroupKind::BnBeta, vec![channels]);
        let mean = self.push(format!("{prefix}.bn.running_mean"), GroupKind::BnRunningMean, vec![channels]);
        let var = self.push(format!("{prefix}.bn.running_var"), GroupKind::BnRunningVar, vec![channels]);
        Op::BatchNorm {
            gamma,
            beta,
            mean,
            var,
        }
    }

    pub(crate) fn dense(&mut self, prefix: &str, fin: usize, fout: usize) -> Op {
        let weight = self.push(format!("{prefix}.weight"), GroupKind::DenseWeight, vec![fout, fin]);
        let bias = self.push(format!("{prefix}.bias"), GroupKind::Bias, vec![fout]);
        Op::Dense {
            weight,
            bias,
            fin,
            fout,
        }
    }

    pub(crate) fn finish(self) -> Vec<ParamGroup> {
        self.groups
    }
}

impl Architecture {
    /// Describes the network: group templates (default-filled) and the op graph.
    pub fn layout(&self) -> (Vec<ParamGroup>, Graph) {
        let mut builder = LayoutBuilder::default();
        let graph = match self {
            Architecture::Autoencoder(config) => config.describe(&mut builder),
            Architecture::Classifier(spec) => spec.describe(&mut builder),
        };
        (builder.finish(), graph)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Autoencoder(config) => config.validate(),
            Architecture::Classifier(spec) => spec.validate(),
        }
    }
}

/// Which parameter groups a trainability change applies to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Scope {
    All,
    /// The classifier head only.
    HeadOnly,
    /// The head plus the last `n` backbone blocks.
    TopBlocks(usize),
    /// Groups whose id starts with any of the given prefixes.
    Prefixes(Vec<String>),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::All => f.write_str("all"),
            Scope::HeadOnly => f.write_str("head-only"),
            Scope::TopBlocks(1) => f.write_str("top-block"),
            Scope::TopBlocks(n) => write!(f, "top-blocks:{n}"),
            Scope::Prefixes(p) => write!(f, "prefix:{}", p.join(",")),
        }
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "all" => return Ok(Scope::All),
            "head-only" => return Ok(Scope::HeadOnly),
            "top-block" => return Ok(Scope::TopBlocks(1)),
            _ => {}
        }
        if let Some(n) = s.strip_prefix("top-blocks:") {
            let n = n
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad block count in scope `{s}`")))?;
            return Ok(Scope::TopBlocks(n));
        }
        if let Some(list) = s.strip_prefix("prefix:") {
            let prefixes: Vec<String> = list
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(String::from)
                .collect();
            if prefixes.is_empty() {
                return Err(Error::InvalidConfig(format!("empty prefix list in scope `{s}`")));
            }
            return Ok(Scope::Prefixes(prefixes));
        }
        Err(Error::InvalidConfig(format!("unknown scope `{s}`")))
    }
}

impl TryFrom<String> for Scope {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Scope> for String {
    fn from(s: Scope) -> String {
        s.to_string()
    }
}

fn backbone_block_of(id: &str) -> Option<usize> {
    let rest = id.strip_prefix("backbone.block")?;
    rest.split('.').next()?.parse().ok()
}

impl ModelParameters {
    /// Allocates groups for `architecture` and initializes weights from `seed`.
    ///
    /// Weights are drawn uniformly from `±sqrt(6 / fan_in)` in group order with
    /// a ChaCha8 stream; biases and shifts start at zero, scales at one.
    pub fn initialize(architecture: Architecture, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let (mut groups, _) = architecture.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in &mut groups {
            if matches!(g.kind, GroupKind::ConvWeight | GroupKind::DenseWeight) {
                let limit = (6.0 / g.fan_in() as f64).sqrt();
                g.data.iter_mut().for_each(|v| *v = rng.gen_range(-limit..limit));
            }
        }
        Ok(ModelParameters {
            architecture,
            seed,
            groups,
            provenance: BTreeMap::new(),
        })
    }

    pub fn graph(&self) -> Graph {
        self.architecture.layout().1
    }

    pub fn group(&self, id: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.id == id)
    }

    pub fn group_mut(&mut self, id: &str) -> Option<&mut ParamGroup> {
        self.groups.iter_mut().find(|g| g.id == id)
    }

    pub fn group_ids(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.id.as_str()).collect()
    }

    pub fn trainable_ids(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.trainable)
            .map(|g| g.id.as_str())
            .collect()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.groups
            .iter()
            .filter(|g| g.trainable && !g.kind.is_statistic())
            .map(|g| g.data.len())
            .sum()
    }

    /// Indices of the groups selected by `scope`.
    pub fn resolve(&self, scope: &Scope) -> Vec<usize> {
        let blocks: BTreeSet<usize> = self.groups.iter().filter_map(|g| backbone_block_of(&g.id)).collect();
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, g)| match scope {
                Scope::All => true,
                Scope::HeadOnly => g.id.starts_with("head."),
                Scope::TopBlocks(n) => {
                    g.id.starts_with("head.")
                        || backbone_block_of(&g.id)
                            .map(|b| blocks.iter().rev().take(*n).any(|&top| top == b))
                            .unwrap_or(false)
                }
                Scope::Prefixes(prefixes) => prefixes.iter().any(|p| g.id.starts_with(p.as_str())),
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Sets the trainable flag on every group selected by `scope`.
    pub fn set_trainable(&mut self, scope: &Scope, flag: bool) -> Result<()> {
        let selected = self.resolve(scope);
        if selected.is_empty() {
            return Err(Error::EmptySelection(scope.to_string()));
        }
        for i in selected {
            self.groups[i].trainable = flag;
        }
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.groups.iter_mut().for_each(|g| g.trainable = false);
    }

    /// SHA-256 over group ids, shapes and values. Trainability flags are excluded.
    pub fn content_hash(&self) -> String {
        hash_groups(self.groups.iter())
    }

    pub(crate) fn all_finite(&self) -> bool {
        self.groups.iter().all(|g| g.data.iter().all(|v| v.is_finite()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let groups_dir = dir.join("groups");
        fs::create_dir_all(&groups_dir).map_err(|e| Error::io(&groups_dir, e))?;
        let mut entries = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            let file = format!("groups/{}.bin", g.id);
            let bytes = f64s_to_le(&g.data);
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            entries.push(GroupEntry {
                id: g.id.clone(),
                kind: g.kind,
                shape: g.shape.clone(),
                dtype: "f64le".into(),
                trainable: g.trainable,
                file,
                sha256: hex(&Sha256::digest(&bytes)),
            });
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: self.architecture.clone(),
            seed: self.seed,
            content_hash: self.content_hash(),
            provenance: self.provenance.clone(),
            groups: entries,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported format {} v{}",
                path.display(),
                manifest.format,
                manifest.version
            )));
        }
        manifest.architecture.validate()?;
        let (templates, _) = manifest.architecture.layout();
        if templates.len() != manifest.groups.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} groups, manifest lists {}",
                templates.len(),
                manifest.groups.len()
            )));
        }
        let mut groups = Vec::with_capacity(templates.len());
        for (template, entry) in templates.into_iter().zip(manifest.groups) {
            if template.id != entry.id || template.shape != entry.shape || template.kind != entry.kind {
                return Err(Error::Checkpoint(format!(
                    "group `{}` {:?} does not match architecture group `{}` {:?}",
                    entry.id, entry.shape, template.id, template.shape
                )));
            }
            if entry.dtype != "f64le" {
                return Err(Error::Checkpoint(format!("group `{}`: unsupported dtype {}", entry.id, entry.dtype)));
            }
            let file = dir.join(&entry.file);
            let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
            if hex(&Sha256::digest(&bytes)) != entry.sha256 {
                return Err(Error::Checkpoint(format!("group `{}`: content hash mismatch", entry.id)));
            }
            let data = le_to_f64s(&bytes);
            if data.len() != template.data.len() {
                return Err(Error::Checkpoint(format!(
                    "group `{}`: {} values, expected {}",
                    entry.id,
                    data.len(),
                    template.data.len()
                )));
            }
            groups.push(ParamGroup {
                trainable: entry.trainable,
                data,
                ..template
            });
        }
        Ok(ModelParameters {
            architecture: manifest.architecture,
            seed: manifest.seed,
            groups,
            provenance: manifest.provenance,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GroupEntry {
    id: String,
    kind: GroupKind,
    shape: Vec<usize>,
    dtype: String,
    trainable: bool,
    file: String,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    version: u32,
    architecture: Architecture,
    seed: u64,
    content_hash: String,
    #[serde(default)]
    provenance: BTreeMap<String, String>,
    groups: Vec<GroupEntry>,
}

pub(crate) fn hash_groups<'a>(groups: impl Iterator<Item = &'a ParamGroup>) -> String {
    let mut hasher = Sha256::new();
    for g in groups {
        hasher.update(g.id.as_bytes());
        hasher.update([0u8]);
        for d in &g.shape {
            hasher.update((*d as u64).to_le_bytes());
        }
        hasher.update(f64s_to_le(&g.data));
    }
    hex(&hasher.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn f64s_to_le(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn le_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}
