use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::image::BinaryMask;

pub const DEFAULT_THRESHOLD: f32 = 0.0;

/// Decoder output: per-slot mask logits at `(h·upscale) × (w·upscale)` and
/// per-slot predicted IoU in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct MaskLogits {
    logits: Tensor,
    iou_pred: Tensor,
}

impl MaskLogits {
    pub(crate) fn new(logits: Tensor, iou_pred: Tensor) -> Self {
        Self { logits, iou_pred }
    }

    /// `n_mask_tokens × H' × W'`, still attached to the autograd graph.
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// `n_mask_tokens`, still attached to the autograd graph.
    pub fn iou_pred(&self) -> &Tensor {
        &self.iou_pred
    }

    pub fn slots(&self) -> usize {
        self.logits.dims()[0]
    }

    pub fn size(&self) -> (usize, usize) {
        let d = self.logits.dims();
        (d[1], d[2])
    }

    pub fn iou_values(&self) -> Result<Vec<f32>> {
        Ok(self.iou_pred.to_dtype(DType::F32)?.to_vec1::<f32>()?)
    }

    pub fn slot_values(&self, slot: usize) -> Result<Vec<f32>> {
        if slot >= self.slots() {
            return Err(Error::Slot { slot, available: self.slots() });
        }
        Ok(self.logits.get(slot)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
    }

    /// Slot with the highest predicted IoU; ties go to the lower index.
    pub fn best_slot(&self) -> Result<usize> {
        let iou = self.iou_values()?;
        Ok(iou
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if *v > iou[best] { i } else { best }))
    }
}

/// Bilinear resample with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &[f32], (sh, sw): (usize, usize), (th, tw): (usize, usize)) -> Vec<f32> {
    if (sh, sw) == (th, tw) {
        return src.to_vec();
    }
    let coord = |t: usize, s_len: usize, t_len: usize| {
        let c = ((t as f32 + 0.5) * s_len as f32 / t_len as f32 - 0.5).clamp(0.0, (s_len - 1) as f32);
        let lo = c.floor() as usize;
        (lo, (lo + 1).min(s_len - 1), c - lo as f32)
    };
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let (y0, y1, fy) = coord(y, sh, th);
        for x in 0..tw {
            let (x0, x1, fx) = coord(x, sw, tw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Resizes the logits of `slot` to `target_size` and thresholds them.
pub fn binarize(ml: &MaskLogits, slot: usize, threshold: f32, target_size: (usize, usize)) -> Result<BinaryMask> {
    let values = ml.slot_values(slot)?;
    let resized = resize_bilinear(&values, ml.size(), target_size);
    let bits = resized.iter().map(|v| *v > threshold).collect();
    BinaryMask::with_threshold(target_size.0, target_size.1, bits, threshold)
}
