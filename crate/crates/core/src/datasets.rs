//! Labeled patch datasets: synthetic generation, disk ingestion, splitting and
//! dihedral augmentation.
//!
//! A sample is positive iff target structure touches the center window of the
//! patch. Structure outside the window never affects the label.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::{Geometry, ImagePatch};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub patch: ImagePatch,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<LabeledSample>,
    pub seed: u64,
}

impl LabeledDataset {
    pub fn new(samples: Vec<LabeledSample>, seed: u64) -> Result<Self> {
        if let Some(first) = samples.first() {
            let g = first.patch.geometry();
            if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.patch.geometry() != g) {
                return Err(Error::DatasetRow {
                    row: i,
                    message: format!("geometry {} differs from {}", s.patch.geometry(), g),
                });
            }
        }
        Ok(LabeledDataset { samples, seed })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn geometry(&self) -> Option<Geometry> {
        self.samples.first().map(|s| s.patch.geometry())
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn patches(&self) -> impl Iterator<Item = &ImagePatch> {
        self.samples.iter().map(|s| &s.patch)
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label == 1).count()
    }

    /// Writes one PNG per sample plus a `manifest.tsv` listing `file<TAB>label`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::from("# relative_path\tlabel\n");
        for (i, s) in self.samples.iter().enumerate() {
            let name = format!("patch_{i:06}.png");
            write_png(&s.patch, &dir.join(&name))?;
            manifest.push_str(&format!("{name}\t{}\n", s.label));
        }
        let path = dir.join("manifest.tsv");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Appearance parameters for synthetic tissue-like patches.
///
/// Background and distractor nuclei keep red above blue; target blobs keep
/// blue above red. The margins survive the noise amplitude, so chroma alone
/// identifies blob pixels. Nuclei and blobs have nearly equal luminance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStyle {
    pub background: [f64; 3],
    pub nucleus: [f64; 3],
    pub blob: [f64; 3],
    /// Per-pixel, per-channel uniform noise amplitude.
    pub noise: f64,
    /// Per-patch brightness jitter amplitude, applied equally to all channels.
    pub brightness_jitter: f64,
    /// Distractor nuclei per 1000 pixels.
    pub nuclei_density: f64,
    /// Mean nucleus radius as a fraction of the patch side (at least 0.8 px).
    pub nucleus_radius: f64,
    /// Blob semi-axis range as fractions of the patch side.
    pub blob_radius: (f64, f64),
    /// Share of negatives carrying a blob entirely outside the center window.
    pub outer_blob_fraction: f64,
}

impl Default for SyntheticStyle {
    fn default() -> Self {
        SyntheticStyle {
            background: [0.86, 0.62, 0.72],
            nucleus: [0.50, 0.30, 0.43],
            blob: [0.43, 0.30, 0.50],
            noise: 0.02,
            brightness_jitter: 0.05,
            nuclei_density: 10.0,
            nucleus_radius: 0.05,
            blob_radius: (0.06, 0.10),
            outer_blob_fraction: 0.5,
        }
    }
}

/// Generates `n` samples with `round(n * positive_fraction)` positives.
pub fn generate_synthetic_dataset(
    n: usize,
    seed: u64,
    positive_fraction: f64,
    geometry: Geometry,
) -> Result<LabeledDataset> {
    generate_synthetic_with_style(n, seed, positive_fraction, geometry, &SyntheticStyle::default())
}

pub fn generate_synthetic_with_style(
    n: usize,
    seed: u64,
    positive_fraction: f64,
    geometry: Geometry,
    style: &SyntheticStyle,
) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size must be at least 1".into()));
    }
    if !(positive_fraction > 0.0 && positive_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "positive fraction {positive_fraction} outside (0, 1)"
        )));
    }
    validate_synthetic_geometry(geometry)?;
    let positives = (n as f64 * positive_fraction).round() as usize;
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < positives)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);
    let samples = labels
        .into_iter()
        .map(|label| {
            let outer = label == 0 && rng.gen_bool(style.outer_blob_fraction.clamp(0.0, 1.0));
            let patch = render_patch(geometry, style, label == 1, outer, &mut rng);
            LabeledSample { patch, label }
        })
        .collect();
    LabeledDataset::new(samples, seed)
}

/// Smallest patch side the synthetic generator accepts.
pub const MIN_SYNTHETIC_SIDE: usize = 8;

fn validate_synthetic_geometry(g: Geometry) -> Result<()> {
    g.validate()?;
    if g.channels != 3 {
        return Err(Error::InvalidGeometry(format!(
            "synthetic patches are RGB, got {} channels",
            g.channels
        )));
    }
    let window = g.center_window();
    if g.height.min(g.width) < MIN_SYNTHETIC_SIDE || window + 2 > g.height.min(g.width) {
        return Err(Error::InvalidGeometry(format!(
            "center window {window}x{window} does not leave an outer region in a {}x{} patch",
            g.height, g.width
        )));
    }
    Ok(())
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }

    fn touches_window(&self, g: Geometry) -> bool {
        let (y0, y1, x0, x1) = g.center_bounds();
        (y0..y1).any(|y| (x0..x1).any(|x| self.contains(y, x)))
    }

    fn covers_any(&self, g: Geometry) -> bool {
        (0..g.height).any(|y| (0..g.width).any(|x| self.contains(y, x)))
    }
}

fn random_blob(g: Geometry, style: &SyntheticStyle, rng: &mut ChaCha8Rng, inside: bool) -> Ellipse {
    let side = g.height.min(g.width) as f64;
    let (lo, hi) = style.blob_radius;
    let (y0, y1, x0, x1) = g.center_bounds();
    loop {
        let ry = (rng.gen_range(lo..=hi) * side).max(1.0);
        let rx = (rng.gen_range(lo..=hi) * side).max(1.0);
        let (cy, cx) = if inside {
            (rng.gen_range(y0 as f64..y1 as f64), rng.gen_range(x0 as f64..x1 as f64))
        } else {
            (rng.gen_range(0.0..g.height as f64), rng.gen_range(0.0..g.width as f64))
        };
        let e = Ellipse { cy, cx, ry, rx };
        if inside && e.touches_window(g) {
            return e;
        }
        if !inside && !e.touches_window(g) && e.covers_any(g) {
            return e;
        }
    }
}

fn render_patch(g: Geometry, style: &SyntheticStyle, positive: bool, outer_blob: bool, rng: &mut ChaCha8Rng) -> ImagePatch {
    let (h, w) = (g.height, g.width);
    let shift = rng.gen_range(-style.brightness_jitter..=style.brightness_jitter);
    // 0 = background, 1 = nucleus, 2 = blob
    let mut class = vec![0u8; h * w];
    let nuclei = ((h * w) as f64 * style.nuclei_density / 1000.0).round() as usize;
    let side = h.min(w) as f64;
    for _ in 0..nuclei {
        let r = (side * style.nucleus_radius).max(0.8);
        let e = Ellipse {
            cy: rng.gen_range(0.0..h as f64),
            cx: rng.gen_range(0.0..w as f64),
            ry: r * rng.gen_range(0.7..1.3),
            rx: r * rng.gen_range(0.7..1.3),
        };
        paint(&mut class, g, &e, 1);
    }
    if positive || outer_blob {
        let blob = random_blob(g, style, rng, positive);
        paint(&mut class, g, &blob, 2);
    }
    let mut pixels = Vec::with_capacity(g.len());
    for &k in &class {
        let base = match k {
            0 => style.background,
            1 => style.nucleus,
            _ => style.blob,
        };
        for b in base {
            let v = b + shift + rng.gen_range(-style.noise..=style.noise);
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    ImagePatch::from_raw_unchecked(g, pixels)
}

fn paint(class: &mut [u8], g: Geometry, e: &Ellipse, value: u8) {
    let y_lo = (e.cy - e.ry).floor().max(0.0) as usize;
    let y_hi = ((e.cy + e.ry).ceil() as usize).min(g.height);
    let x_lo = (e.cx - e.rx).floor().max(0.0) as usize;
    let x_hi = ((e.cx + e.rx).ceil() as usize).min(g.width);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            if e.contains(y, x) {
                class[y * g.width + x] = value;
            }
        }
    }
}

/// Reads a manifest of `relative_path<TAB>label` rows, resolving paths against `dir`.
///
/// Lines starting with `#` and blank lines are skipped. Row numbers in errors
/// are 1-based manifest line numbers.
pub fn load_dataset(dir: &Path, manifest: &Path) -> Result<LabeledDataset> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut samples = Vec::new();
    let mut geometry: Option<Geometry> = None;
    for (line_no, line) in text.lines().enumerate() {
        let row = line_no + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (file, label) = trimmed.split_once('\t').ok_or_else(|| Error::DatasetRow {
            row,
            message: "expected `relative_path<TAB>label`".into(),
        })?;
        let label = match label.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::DatasetRow {
                    row,
                    message: format!("label `{other}` is not 0 or 1"),
                })
            }
        };
        let path = dir.join(file);
        if !path.is_file() {
            return Err(Error::DatasetRow {
                row,
                message: format!("missing file {}", path.display()),
            });
        }
        let patch = read_image(&path).map_err(|e| Error::DatasetRow {
            row,
            message: e.to_string(),
        })?;
        match geometry {
            None => geometry = Some(patch.geometry()),
            Some(g) if g != patch.geometry() => {
                return Err(Error::DatasetRow {
                    row,
                    message: format!("geometry {} differs from {}", patch.geometry(), g),
                })
            }
            _ => {}
        }
        samples.push(LabeledSample { patch, label });
    }
    LabeledDataset::new(samples, 0)
}

/// Decodes an image file into a patch, dividing by the maximum of its bit depth.
pub fn read_image(path: &Path) -> Result<ImagePatch> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.color();
    let (channels, pixels): (usize, Vec<f64>) = match (color.has_color(), color.bytes_per_pixel() / color.channel_count() as u8) {
        (true, 1) => (3, img.to_rgb8().into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect()),
        (true, _) => (3, img.to_rgb16().into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect()),
        (false, 1) => (1, img.to_luma8().into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect()),
        (false, _) => (1, img.to_luma16().into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect()),
    };
    ImagePatch::new(h, w, channels, pixels)
}

/// Writes a patch as an 8-bit PNG (`round(v * 255)`).
pub fn write_png(patch: &ImagePatch, path: &Path) -> Result<()> {
    let (h, w, c) = patch.shape();
    let bytes = patch.to_u8();
    let img = match c {
        1 => DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, bytes).expect("buffer size")),
        3 => DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, bytes).expect("buffer size")),
        other => {
            return Err(Error::InvalidGeometry(format!(
                "cannot write {other}-channel patch as PNG"
            )))
        }
    };
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Deterministic shuffled split; `|val| = round(val_fraction * n)`.
/// Both partitions keep the input's relative order.
pub fn split(dataset: &LabeledDataset, val_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    let n = dataset.len();
    let n_val = (val_fraction * n as f64).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::InvalidConfig(format!(
            "splitting {n} samples at {val_fraction} leaves an empty partition"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_val = vec![false; n];
    order[..n_val].iter().for_each(|&i| in_val[i] = true);
    let (mut train, mut val) = (Vec::with_capacity(n - n_val), Vec::with_capacity(n_val));
    for (s, v) in dataset.samples.iter().zip(in_val) {
        if v {
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((
        LabeledDataset { samples: train, seed },
        LabeledDataset { samples: val, seed },
    ))
}

/// An element of the dihedral group of the square: an optional horizontal
/// flip followed by `quarter_turns` clockwise rotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        flip: false,
        quarter_turns: 0,
    };

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8u8).map(|k| Dihedral {
            flip: k >= 4,
            quarter_turns: k % 4,
        })
    }

    pub fn apply(self, patch: &ImagePatch) -> Result<ImagePatch> {
        let (h, w, c) = patch.shape();
        if self.quarter_turns % 2 == 1 && h != w {
            return Err(Error::InvalidGeometry(format!(
                "rotation requires a square patch, got {h}x{w}"
            )));
        }
        let mut cur: Vec<f64> = patch.pixels().to_vec();
        let (mut ch, mut cw) = (h, w);
        if self.flip {
            let mut out = vec![0.0; cur.len()];
            for y in 0..ch {
                for x in 0..cw {
                    let (d, s) = ((y * cw + x) * c, (y * cw + (cw - 1 - x)) * c);
                    out[d..d + c].copy_from_slice(&cur[s..s + c]);
                }
            }
            cur = out;
        }
        for _ in 0..self.quarter_turns % 4 {
            // clockwise: out[y][x] = in[ch - 1 - x][y], output is cw x ch
            let (oh, ow) = (cw, ch);
            let mut out = vec![0.0; cur.len()];
            for y in 0..oh {
                for x in 0..ow {
                    let (d, s) = ((y * ow + x) * c, ((ch - 1 - x) * cw + y) * c);
                    out[d..d + c].copy_from_slice(&cur[s..s + c]);
                }
            }
            cur = out;
            (ch, cw) = (oh, ow);
        }
        Ok(ImagePatch::from_raw_unchecked(Geometry::new(ch, cw, c), cur))
    }
}

/// Random dihedral augmentation; the label is carried through unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmenter {
    pub rotations: bool,
}

impl Default for Augmenter {
    fn default() -> Self {
        Augmenter { rotations: true }
    }
}

impl Augmenter {
    pub fn apply(&self, sample: &LabeledSample, rng: &mut impl Rng) -> Result<LabeledSample> {
        let (h, w, _) = sample.patch.shape();
        if self.rotations && h != w {
            return Err(Error::InvalidGeometry(format!(
                "rotation augmentation requires a square patch, got {h}x{w}"
            )));
        }
        let t = Dihedral {
            flip: rng.gen_bool(0.5),
            quarter_turns: if self.rotations { rng.gen_range(0..4) } else { 2 * rng.gen_range(0..2u8) },
        };
        Ok(LabeledSample {
            patch: t.apply(&sample.patch)?,
            label: sample.label,
        })
    }
}

/// Applies a uniformly random element of the full dihedral group.
pub fn augment(sample: &LabeledSample, rng: &mut impl Rng) -> Result<LabeledSample> {
    Augmenter::default().apply(sample, rng)
}
