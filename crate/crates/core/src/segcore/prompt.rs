use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// A click on the image, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: f32,
    pub y: f32,
    pub polarity: Polarity,
}

impl PointPrompt {
    pub fn positive(x: f32, y: f32) -> Self {
        Self { x, y, polarity: Polarity::Positive }
    }

    pub fn negative(x: f32, y: f32) -> Self {
        Self { x, y, polarity: Polarity::Negative }
    }

    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x < width as f32 && self.y < height as f32
    }
}

/// Sinusoidal encoding of a normalised coordinate pair `(u, v) ∈ [0, 1]²`.
///
/// `dim` must be a multiple of 4. The layout is `[sin πf·u, cos πf·u, sin πf·v, cos πf·v]`,
/// each block spanning `dim / 4` frequencies spaced geometrically from 1 to 64.
pub fn sinusoidal_pe(u: f32, v: f32, dim: usize) -> Vec<f32> {
    let n = dim / 4;
    let mut out = vec![0.0; dim];
    for k in 0..n {
        let f = std::f32::consts::PI * (k as f32 * 6.0 / n as f32).exp2();
        out[k] = (f * u).sin();
        out[n + k] = (f * u).cos();
        out[2 * n + k] = (f * v).sin();
        out[3 * n + k] = (f * v).cos();
    }
    out
}

/// Positional encodings of every cell centre of an `h × w` grid, as an `(h·w) × dim` tensor.
pub fn grid_pe(h: usize, w: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(h * w * dim);
    for r in 0..h {
        for c in 0..w {
            data.extend(sinusoidal_pe((c as f32 + 0.5) / w as f32, (r as f32 + 0.5) / h as f32, dim));
        }
    }
    Ok(Tensor::from_vec(data, (h * w, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Learned polarity vectors added on top of the positional encoding.
#[derive(Debug, Clone)]
pub struct PolarityEmbeddings {
    pub positive: Tensor,
    pub negative: Tensor,
}

/// Turns point prompts into an `n × d` token sequence.
pub fn encode_points(
    points: &[PointPrompt],
    img_size: (usize, usize),
    embeddings: &PolarityEmbeddings,
) -> Result<Tensor> {
    let (height, width) = img_size;
    if points.is_empty() {
        return Err(Error::InvalidPrompt("at least one point is required".into()));
    }
    if let Some(p) = points.iter().find(|p| !p.in_bounds(height, width)) {
        return Err(Error::InvalidPrompt(format!(
            "point ({}, {}) outside {height}x{width} image",
            p.x, p.y
        )));
    }
    let d = embeddings.positive.dims1()?;
    if d % 4 != 0 {
        return Err(Error::Shape(format!("token width {d} is not a multiple of 4")));
    }
    let dtype = embeddings.positive.dtype();
    let rows = points
        .iter()
        .map(|p| {
            let pe = sinusoidal_pe(p.x / width as f32, p.y / height as f32, d);
            let pe = Tensor::from_vec(pe, d, &Device::Cpu)?.to_dtype(dtype)?;
            let emb = match p.polarity {
                Polarity::Positive => &embeddings.positive,
                Polarity::Negative => &embeddings.negative,
            };
            Ok((pe + emb)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&rows, 0)?)
}
