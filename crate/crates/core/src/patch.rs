use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `H x W x C` raster, row-major with interleaved channels, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePatch {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

/// Patch dimensions as `(height, width, channels)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Geometry {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Geometry {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_tuple(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Side of the label-defining center window: `round(side / 3)`, i.e. 32 for
    /// 96, widened by one pixel when needed so the outer margin is equal on
    /// both sides and every flip or rotation maps the window onto itself.
    pub fn center_window(&self) -> usize {
        let side = self.height.min(self.width);
        let window = ((side as f64) / 3.0).round() as usize;
        if (side - window) % 2 == 1 {
            window + 1
        } else {
            window
        }
    }

    /// Inclusive-exclusive `(y0, y1, x0, x1)` bounds of the center window.
    pub fn center_bounds(&self) -> (usize, usize, usize, usize) {
        let side = self.center_window();
        let y0 = (self.height - side) / 2;
        let x0 = (self.width - side) / 2;
        (y0, y0 + side, x0, x0 + side)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::InvalidGeometry(format!(
                "dimensions must be positive, got {self}"
            )));
        }
        Ok(())
    }
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry::new(96, 96, 3)
    }
}

impl std::fmt::Display for Geometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

impl ImagePatch {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        Geometry::new(height, width, channels).validate()?;
        if pixels.len() != height * width * channels {
            return Err(Error::shape(
                format!("{} pixel values", height * width * channels),
                pixels.len(),
            ));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidGeometry(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(ImagePatch {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(geometry: Geometry, value: f64) -> Result<Self> {
        ImagePatch::new(
            geometry.height,
            geometry.width,
            geometry.channels,
            vec![value; geometry.len()],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// 8-bit quantization used for image output: `round(v * 255)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        let pixels = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        ImagePatch::new(height, width, channels, pixels)
    }

    pub(crate) fn from_raw_unchecked(geometry: Geometry, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), geometry.len());
        ImagePatch {
            height: geometry.height,
            width: geometry.width,
            channels: geometry.channels,
            pixels,
        }
    }
}
