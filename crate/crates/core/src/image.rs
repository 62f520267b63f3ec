//! Raster types shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted image side, in pixels.
pub const MIN_SIDE: usize = 32;

/// An RGB image with channels interleaved row-major (`H × W × 3`), values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    id: String,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageRgb {
    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "{height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::InvalidImage(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidImage(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { id: id.into(), height, width, pixels })
    }

    /// Image filled with one color.
    pub fn constant(id: impl Into<String>, height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(id, height, width, pixels)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    /// Planar `3 × H × W` copy, the layout convolution kernels want.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * 3];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            out[i] = px[0];
            out[plane + i] = px[1];
            out[2 * plane + i] = px[2];
        }
        out
    }
}

/// A per-pixel foreground mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    /// Logit threshold that produced the mask, stored as raw f32 bits so the type stays `Eq`.
    threshold_bits: u32,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        Self::with_threshold(height, width, bits, 0.0)
    }

    pub fn with_threshold(height: usize, width: usize, bits: Vec<bool>, threshold: f32) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask of {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self { height, width, bits, threshold_bits: threshold.to_bits() })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width], threshold_bits: 0 }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![true; height * width], threshold_bits: 0 }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height).flat_map(|y| (0..width).map(move |x| (y, x))).map(|(y, x)| f(y, x)).collect();
        Self { height, width, bits, threshold_bits: 0 }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn threshold(&self) -> f32 {
        f32::from_bits(self.threshold_bits)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Nearest-neighbour resample to `height × width`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        Self::from_fn(height, width, |y, x| {
            let sy = (y * self.height) / height;
            let sx = (x * self.width) / width;
            self.get(sy, sx)
        })
    }

    /// Fraction of the `stride × stride` cell at grid position `(row, col)` that is foreground.
    pub fn cell_coverage(&self, row: usize, col: usize, stride: usize) -> f32 {
        let mut hits = 0usize;
        for y in row * stride..((row + 1) * stride).min(self.height) {
            for x in col * stride..((col + 1) * stride).min(self.width) {
                hits += usize::from(self.get(y, x));
            }
        }
        hits as f32 / (stride * stride) as f32
    }

    pub fn intersection_union(&self, other: &BinaryMask) -> Result<(usize, usize)> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let (mut inter, mut union) = (0, 0);
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += usize::from(*a && *b);
            union += usize::from(*a || *b);
        }
        Ok((inter, union))
    }

    /// IoU in `[0, 1]`; two empty masks count as a perfect match.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        let (inter, union) = self.intersection_union(other)?;
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }
}
