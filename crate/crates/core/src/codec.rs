//! Standalone encoder/decoder artifacts and the `.hcl` latent file format.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! offset  size      field
//! 0       4         magic "HCAE"
//! 4       2         version (u16, currently 1)
//! 6       2 x 3     latent h, w, c (u16 each)
//! 12      1         mode: 0 = f32 activations, 1 = 8-bit affine per channel
//! 13      8c        mode 1 only: per channel (scale f32, offset f32)
//! ..      h*w*c*k   activations, row-major h, w, c; k = 4 (mode 0) or 1 (mode 1)
//! end-4   4         CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! In mode 1 a value is reconstructed as `offset + code * scale`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::{config_of, run_decoder, run_encoder, CompressionConfig, LatentCode, Quantization};
use crate::datasets::{read_image, write_png};
use crate::error::{Error, LatentFormatError, Result};
use crate::nn::Sequential;
use crate::params::{hash_groups, GroupKind, LayoutBuilder, ModelParameters, ParamGroup};
use crate::patch::ImagePatch;

pub const MAGIC: [u8; 4] = *b"HCAE";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 13;
pub const CRC_LEN: usize = 4;
pub const EXTENSION: &str = "hcl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    Float32,
    Affine8,
}

impl QuantMode {
    fn byte(self) -> u8 {
        match self {
            QuantMode::Float32 => 0,
            QuantMode::Affine8 => 1,
        }
    }
}

impl std::str::FromStr for QuantMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "float32" => Ok(QuantMode::Float32),
            "u8" | "8bit" | "affine8" => Ok(QuantMode::Affine8),
            other => Err(Error::InvalidConfig(format!("unknown quantization mode `{other}` (f32 or u8)"))),
        }
    }
}

/// Exact size of a latent file for the given shape and mode.
pub fn latent_file_len(shape: (usize, usize, usize), mode: QuantMode) -> usize {
    let n = shape.0 * shape.1 * shape.2;
    match mode {
        QuantMode::Float32 => HEADER_LEN + 4 * n + CRC_LEN,
        QuantMode::Affine8 => HEADER_LEN + 8 * shape.2 + n + CRC_LEN,
    }
}

/// Per-channel affine 8-bit quantization: `(scale, offset, codes)`.
pub fn quantize(code: &LatentCode) -> (Vec<f32>, Vec<f32>, Vec<u8>) {
    let (h, w, c) = code.shape;
    let mut lo = vec![f32::INFINITY; c];
    let mut hi = vec![f32::NEG_INFINITY; c];
    for (i, &v) in code.activations.iter().enumerate() {
        let ch = i % c;
        lo[ch] = lo[ch].min(v);
        hi[ch] = hi[ch].max(v);
    }
    let scale: Vec<f32> = lo.iter().zip(&hi).map(|(l, h)| ((f64::from(*h) - f64::from(*l)) / 255.0) as f32).collect();
    let offset = lo;
    let mut codes = vec![0u8; h * w * c];
    for (i, &v) in code.activations.iter().enumerate() {
        let ch = i % c;
        if scale[ch] > 0.0 {
            let t = (f64::from(v) - f64::from(offset[ch])) / f64::from(scale[ch]);
            codes[i] = t.round().clamp(0.0, 255.0) as u8;
        }
    }
    (scale, offset, codes)
}

pub fn dequantize(shape: (usize, usize, usize), scale: &[f32], offset: &[f32], codes: &[u8]) -> Vec<f32> {
    let c = shape.2;
    codes
        .iter()
        .enumerate()
        .map(|(i, &q)| (f64::from(offset[i % c]) + f64::from(q) * f64::from(scale[i % c])) as f32)
        .collect()
}

/// Serializes a latent code. In `Affine8` mode the activations are quantized first.
pub fn write_latent(code: &LatentCode, mode: QuantMode) -> Result<Vec<u8>> {
    let (h, w, c) = code.shape;
    let dims: Vec<u16> = [h, w, c]
        .iter()
        .map(|&d| u16::try_from(d).map_err(|_| Error::InvalidGeometry(format!("latent dimension {d} exceeds u16"))))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(latent_file_len(code.shape, mode));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(mode.byte());
    match mode {
        QuantMode::Float32 => {
            for v in &code.activations {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        QuantMode::Affine8 => {
            let (scale, offset, codes) = quantize(code);
            for (s, o) in scale.iter().zip(&offset) {
                out.extend_from_slice(&s.to_le_bytes());
                out.extend_from_slice(&o.to_le_bytes());
            }
            out.extend_from_slice(&codes);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn u16_at(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn f32_at(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses and verifies a latent file. Checks run in order: length floor,
/// magic, version, mode, exact length, checksum.
pub fn read_latent(bytes: &[u8], config_name: &str) -> std::result::Result<LatentCode, LatentFormatError> {
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(LatentFormatError::Length {
            expected: HEADER_LEN + CRC_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(LatentFormatError::BadMagic(magic));
    }
    let version = u16_at(bytes, 4);
    if version != VERSION {
        return Err(LatentFormatError::UnsupportedVersion(version));
    }
    let shape = (
        usize::from(u16_at(bytes, 6)),
        usize::from(u16_at(bytes, 8)),
        usize::from(u16_at(bytes, 10)),
    );
    let mode = match bytes[12] {
        0 => QuantMode::Float32,
        1 => QuantMode::Affine8,
        other => return Err(LatentFormatError::UnknownMode(other)),
    };
    let expected = latent_file_len(shape, mode);
    if bytes.len() != expected {
        return Err(LatentFormatError::Length {
            expected,
            actual: bytes.len(),
        });
    }
    let body = &bytes[..expected - CRC_LEN];
    let stored = u32::from_le_bytes(bytes[expected - CRC_LEN..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(LatentFormatError::Checksum { stored, computed });
    }
    let n = shape.0 * shape.1 * shape.2;
    let (activations, quantization) = match mode {
        QuantMode::Float32 => (
            (0..n).map(|i| f32_at(bytes, HEADER_LEN + 4 * i)).collect(),
            Quantization::None,
        ),
        QuantMode::Affine8 => {
            let c = shape.2;
            let scale: Vec<f32> = (0..c).map(|ch| f32_at(bytes, HEADER_LEN + 8 * ch)).collect();
            let offset: Vec<f32> = (0..c).map(|ch| f32_at(bytes, HEADER_LEN + 8 * ch + 4)).collect();
            let codes = &bytes[HEADER_LEN + 8 * c..HEADER_LEN + 8 * c + n];
            (dequantize(shape, &scale, &offset, codes), Quantization::Affine8 { scale, offset })
        }
    };
    Ok(LatentCode {
        shape,
        activations,
        config_name: config_name.to_string(),
        quantization,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Encoder,
    Decoder,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::Encoder => "encoder",
            Role::Decoder => "decoder",
        }
    }
}

/// One half of a trained autoencoder, runnable on its own.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecArtifact {
    pub role: Role,
    pub config: CompressionConfig,
    pub groups: Vec<ParamGroup>,
    pub checksum: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArtifactGroup {
    id: String,
    kind: GroupKind,
    shape: Vec<usize>,
    dtype: String,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArtifactManifest {
    format: String,
    version: u32,
    role: Role,
    config: CompressionConfig,
    checksum: String,
    groups: Vec<ArtifactGroup>,
}

fn artifact_checksum(role: Role, groups: &[ParamGroup]) -> String {
    let mut tagged = vec![ParamGroup {
        id: format!("role:{}", role.name()),
        kind: GroupKind::Bias,
        shape: vec![],
        trainable: false,
        data: vec![],
    }];
    tagged.extend_from_slice(groups);
    hash_groups(tagged.iter())
}

impl CodecArtifact {
    fn from_groups(role: Role, config: CompressionConfig, groups: Vec<ParamGroup>) -> Self {
        let checksum = artifact_checksum(role, &groups);
        CodecArtifact {
            role,
            config,
            groups,
            checksum,
        }
    }

    fn network(&self) -> Sequential {
        let mut b = LayoutBuilder::default();
        match self.role {
            Role::Encoder => self.config.describe_encoder(&mut b),
            Role::Decoder => self.config.describe_decoder(&mut b),
        }
    }

    fn require(&self, role: Role) -> Result<()> {
        if self.role != role {
            return Err(Error::WrongRole {
                expected: role.name(),
                actual: self.role.name(),
            });
        }
        Ok(())
    }

    pub fn encode(&self, patches: &[&ImagePatch]) -> Result<Vec<LatentCode>> {
        self.require(Role::Encoder)?;
        run_encoder(&self.config, &self.network(), &self.groups, patches)
    }

    pub fn decode(&self, codes: &[&LatentCode]) -> Result<Vec<ImagePatch>> {
        self.require(Role::Decoder)?;
        run_decoder(&self.config, &self.network(), &self.groups, codes)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let groups_dir = dir.join("groups");
        fs::create_dir_all(&groups_dir).map_err(|e| Error::io(&groups_dir, e))?;
        let mut entries = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            let file = format!("groups/{}.bin", g.id);
            let path = dir.join(&file);
            let bytes: Vec<u8> = g.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            entries.push(ArtifactGroup {
                id: g.id.clone(),
                kind: g.kind,
                shape: g.shape.clone(),
                dtype: "f64le".into(),
                file,
            });
        }
        let manifest = ArtifactManifest {
            format: "hcae-codec".into(),
            version: 1,
            role: self.role,
            config: self.config.clone(),
            checksum: self.checksum.clone(),
            groups: entries,
        };
        let path = dir.join("artifact.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("artifact.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: ArtifactManifest = serde_json::from_str(&text)?;
        if manifest.format != "hcae-codec" || manifest.version != 1 {
            return Err(Error::Checkpoint(format!("{}: not a codec artifact", path.display())));
        }
        manifest.config.validate()?;
        let mut groups = Vec::with_capacity(manifest.groups.len());
        for entry in manifest.groups {
            let file = dir.join(&entry.file);
            let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if data.len() != entry.shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("group `{}`: wrong value count", entry.id)));
            }
            groups.push(ParamGroup {
                id: entry.id,
                kind: entry.kind,
                shape: entry.shape,
                trainable: false,
                data,
            });
        }
        let artifact = CodecArtifact::from_groups(manifest.role, manifest.config, groups);
        let (templates, _) = {
            let mut b = LayoutBuilder::default();
            let seq = match artifact.role {
                Role::Encoder => artifact.config.describe_encoder(&mut b),
                Role::Decoder => artifact.config.describe_decoder(&mut b),
            };
            (b.finish(), seq)
        };
        let matches = templates.len() == artifact.groups.len()
            && templates.iter().zip(&artifact.groups).all(|(t, g)| t.id == g.id && t.shape == g.shape);
        if !matches {
            return Err(Error::Checkpoint("artifact groups do not match its configuration".into()));
        }
        if artifact.checksum != manifest.checksum {
            return Err(Error::Checkpoint(format!(
                "artifact checksum mismatch: manifest {}, content {}",
                manifest.checksum, artifact.checksum
            )));
        }
        Ok(artifact)
    }
}

/// Splits an autoencoder into its two halves.
pub fn split_autoencoder(ae: &ModelParameters) -> Result<(CodecArtifact, CodecArtifact)> {
    let config = config_of(ae)?.clone();
    let mut b = LayoutBuilder::default();
    config.describe_encoder(&mut b);
    let k = b.finish().len();
    let strip = |g: &ParamGroup| ParamGroup {
        trainable: false,
        ..g.clone()
    };
    let enc = CodecArtifact::from_groups(Role::Encoder, config.clone(), ae.groups[..k].iter().map(strip).collect());
    let dec = CodecArtifact::from_groups(Role::Decoder, config, ae.groups[k..].iter().map(strip).collect());
    Ok((enc, dec))
}

/// Writes `out_dir/encoder` and `out_dir/decoder` artifact directories.
pub fn export_split(ae: &ModelParameters, out_dir: &Path) -> Result<(CodecArtifact, CodecArtifact)> {
    let (enc, dec) = split_autoencoder(ae)?;
    enc.save(&out_dir.join("encoder"))?;
    dec.save(&out_dir.join("decoder"))?;
    Ok((enc, dec))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressSummary {
    pub mode: QuantMode,
    /// Size of the source as 8-bit pixels (`H * W * C`).
    pub bytes_in: usize,
    pub bytes_out: usize,
    /// `bytes_out / bytes_in`; above 1 means the file is larger than the source.
    pub byte_ratio: f64,
    pub dimensionality_ratio: f64,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompressSummary {
    pub bytes_in: usize,
    pub geometry: (usize, usize, usize),
    pub quantized: bool,
    pub output: PathBuf,
}

pub fn compress_patch(encoder: &CodecArtifact, patch: &ImagePatch, mode: QuantMode) -> Result<Vec<u8>> {
    let code = encoder.encode(&[patch])?.remove(0);
    write_latent(&code, mode)
}

pub fn compress_file(encoder: &CodecArtifact, image_in: &Path, latent_out: &Path, mode: QuantMode) -> Result<CompressSummary> {
    encoder.require(Role::Encoder)?;
    let patch = read_image(image_in)?;
    let bytes = compress_patch(encoder, &patch, mode)?;
    fs::write(latent_out, &bytes).map_err(|e| Error::io(latent_out, e))?;
    let bytes_in = patch.geometry().len();
    Ok(CompressSummary {
        mode,
        bytes_in,
        bytes_out: bytes.len(),
        byte_ratio: bytes.len() as f64 / bytes_in as f64,
        dimensionality_ratio: encoder.config.dimensionality_ratio(),
        output: latent_out.to_path_buf(),
    })
}

/// Decodes latent bytes into a patch, checking the shape against the decoder.
pub fn decompress_bytes(decoder: &CodecArtifact, bytes: &[u8]) -> Result<ImagePatch> {
    decoder.require(Role::Decoder)?;
    let code = read_latent(bytes, &decoder.config.name)?;
    let expected = decoder.config.latent_shape();
    if code.shape != expected {
        return Err(LatentFormatError::Shape {
            expected,
            actual: code.shape,
        }
        .into());
    }
    Ok(decoder.decode(&[&code])?.remove(0))
}

/// Writes the reconstruction as an 8-bit PNG. Nothing is written unless the
/// latent file is fully valid.
pub fn decompress_file(decoder: &CodecArtifact, latent_in: &Path, image_out: &Path) -> Result<DecompressSummary> {
    let bytes = fs::read(latent_in).map_err(|e| Error::io(latent_in, e))?;
    let patch = decompress_bytes(decoder, &bytes)?;
    write_png(&patch, image_out)?;
    Ok(DecompressSummary {
        bytes_in: bytes.len(),
        geometry: patch.shape(),
        quantized: bytes[12] == 1,
        output: image_out.to_path_buf(),
    })
}
