//! Frozen image encoders and the registry that names them.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::ImageRgb;

pub const TOY_PATCH: &str = "toy-patch";

/// `h × w × d` patch features, row-major with the channel axis innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    dim: usize,
    stride: usize,
    source_image_id: String,
    features: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(
        height: usize,
        width: usize,
        dim: usize,
        stride: usize,
        source_image_id: impl Into<String>,
        features: Vec<f32>,
    ) -> Result<Self> {
        if features.len() != height * width * dim {
            return Err(Error::Shape(format!(
                "feature grid {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                features.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidImage("non-finite feature value".into()));
        }
        Ok(Self { height, width, dim, stride, source_image_id: source_image_id.into(), features })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn source_image_id(&self) -> &str {
        &self.source_image_id
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let o = (row * self.width + col) * self.dim;
        &self.features[o..o + self.dim]
    }

    /// Pixel size of the source image.
    pub fn image_size(&self) -> (usize, usize) {
        (self.height * self.stride, self.width * self.stride)
    }

    /// Returns a copy with every feature vector multiplied by `c`.
    pub fn scaled(&self, c: f32) -> Self {
        Self { features: self.features.iter().map(|v| v * c).collect(), ..self.clone() }
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.features, (self.height * self.width, self.dim), &Device::Cpu)?
            .to_dtype(dtype)?)
    }
}

pub trait ImageEncoder: Send + Sync {
    fn id(&self) -> &str;
    fn stride(&self) -> usize;
    fn dim(&self) -> usize;
    fn encode(&self, img: &ImageRgb) -> Result<FeatureGrid>;
}

/// Three stride-2 3×3 convolutions with GELU between stages and a per-patch
/// layer norm, followed by the mean colour of each 4×4 quadrant of the patch
/// (rescaled to [-1, 1], then weighted by `COLOUR_GAIN`). The colour block lets the decoder place boundaries
/// below the patch size. Conv weights are drawn once from a fixed seed.
pub struct ToyPatchEncoder {
    stages: Vec<(Tensor, Tensor)>,
    dim: usize,
}

impl ToyPatchEncoder {
    pub const SEED: u64 = 0x70_79_70_61_74_63_68;
    pub const CHANNELS: [usize; 4] = [3, 16, 32, 20];
    pub const QUADRANT_DIMS: usize = 12;
    /// Weight of the colour block against the unit-variance conv block. At 1
    /// the conv block dominates cosine similarity and every cell looks alike.
    pub const COLOUR_GAIN: f64 = 3.0;

    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(Self::SEED);
        let stages = Self::CHANNELS
            .windows(2)
            .map(|io| {
                let (cin, cout) = (io[0], io[1]);
                let std = (2.0 / (cin * 9) as f32).sqrt();
                let w = Normal::new(0.0, std).expect("finite std");
                let weight: Vec<f32> = (0..cout * cin * 9).map(|_| w.sample(&mut rng)).collect();
                let b = Normal::new(0.0, 0.1f32).expect("finite std");
                let bias: Vec<f32> = (0..cout).map(|_| b.sample(&mut rng)).collect();
                (
                    Tensor::from_vec(weight, (cout, cin, 3, 3), &Device::Cpu).expect("shape"),
                    Tensor::from_vec(bias, (1, cout, 1, 1), &Device::Cpu).expect("shape"),
                )
            })
            .collect();
        Self { stages, dim: Self::CHANNELS[3] + Self::QUADRANT_DIMS }
    }
}

impl Default for ToyPatchEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl ImageEncoder for ToyPatchEncoder {
    fn id(&self) -> &str {
        TOY_PATCH
    }

    fn stride(&self) -> usize {
        8
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, img: &ImageRgb) -> Result<FeatureGrid> {
        let stride = self.stride();
        let (h, w) = (img.height(), img.width());
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::InvalidImage(format!("{h}x{w} is not a multiple of the encoder stride {stride}")));
        }
        let input = Tensor::from_vec(img.to_chw(), (1, 3, h, w), &Device::Cpu)?;
        let mut x = input.clone();
        let last = self.stages.len() - 1;
        for (i, (weight, bias)) in self.stages.iter().enumerate() {
            x = x.conv2d(weight, 1, 2, 1, 1)?.broadcast_add(bias)?;
            if i < last {
                x = x.gelu_erf()?;
            }
        }
        // (1, d, h, w) -> (h, w, d), then normalise each patch vector.
        let x = x.squeeze(0)?.permute((1, 2, 0))?.contiguous()?;
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let x = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        // (1, 3, h/4, w/4) -> (h/8, w/8, 2, 2, 3): quadrant-major, channel innermost.
        let quads = (((input.avg_pool2d(4)? * 2.0)? - 1.0)? * Self::COLOUR_GAIN)?
            .squeeze(0)?
            .reshape((3, h / stride, 2, w / stride, 2))?
            .permute((1, 3, 2, 4, 0))?
            .reshape((h / stride, w / stride, Self::QUADRANT_DIMS))?;
        let x = Tensor::cat(&[&x, &quads], 2)?;
        let features = x.flatten_all()?.to_vec1::<f32>()?;
        FeatureGrid::new(h / stride, w / stride, self.dim, stride, img.id(), features)
    }
}

#[derive(Default)]
pub struct EncoderRegistry {
    encoders: BTreeMap<String, Arc<dyn ImageEncoder>>,
}

impl EncoderRegistry {
    pub fn with_defaults() -> Self {
        let mut r = Self::default();
        r.register(Arc::new(ToyPatchEncoder::new()));
        r
    }

    pub fn register(&mut self, enc: Arc<dyn ImageEncoder>) {
        self.encoders.insert(enc.id().to_string(), enc);
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn ImageEncoder>> {
        self.encoders.get(id).cloned().ok_or_else(|| Error::EncoderNotFound(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.encoders.keys().map(String::as_str)
    }
}

/// Process-wide registry holding the built-in encoders.
pub fn registry() -> &'static EncoderRegistry {
    static REGISTRY: OnceLock<EncoderRegistry> = OnceLock::new();
    REGISTRY.get_or_init(EncoderRegistry::with_defaults)
}

pub fn encode_image(img: &ImageRgb, encoder_id: &str) -> Result<FeatureGrid> {
    registry().get(encoder_id)?.encode(img)
}
