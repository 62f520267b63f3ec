use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::BinaryMask;
use crate::segcore::softplus;

/// Weights of the segmentation loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_focal: f64,
    pub lambda_dice: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_focal: 1.0, lambda_dice: 1.0, gamma: 2.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.lambda_focal) || !ok(self.lambda_dice) || !ok(self.gamma) {
            return Err(Error::InvalidConfig("loss weights and gamma must be finite and non-negative".into()));
        }
        if self.lambda_focal == 0.0 && self.lambda_dice == 0.0 {
            return Err(Error::InvalidConfig("lambda_focal and lambda_dice are both zero".into()));
        }
        Ok(())
    }
}

/// `gt` as a 0/1 tensor on the `h × w` logit grid (nearest-neighbour resize).
pub fn target_tensor(gt: &BinaryMask, (h, w): (usize, usize), like: &Tensor) -> Result<Tensor> {
    let small = gt.resize_nearest(h, w);
    let values: Vec<f32> = small.bits().iter().map(|b| f32::from(u8::from(*b))).collect();
    Ok(Tensor::from_vec(values, (h, w), like.device())?.to_dtype(like.dtype())?)
}

/// Mean focal loss computed from logits.
///
/// With `z = x` on foreground and `z = -x` on background, `log p_t = -softplus(-z)`
/// and `log(1 - p_t) = -softplus(z)`, so `(1 - p_t)^γ · (-log p_t)` is evaluated
/// without ever forming a probability of exactly 0 or 1.
pub fn focal_loss(logits: &Tensor, target: &Tensor, gamma: f64) -> Result<Tensor> {
    let sign = ((target * 2.0)? - 1.0)?;
    let z = (logits * sign)?;
    let nll = softplus(&z.neg()?)?;
    let per_pixel = if gamma == 0.0 { nll } else { ((softplus(&z)? * -gamma)?.exp()? * nll)? };
    Ok(per_pixel.mean_all()?)
}

/// `1 - (2·Σpy + 1) / (Σp + Σy + 1)`.
pub fn dice_loss(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    let inter = (probs * target)?.sum_all()?;
    let num = ((inter * 2.0)? + 1.0)?;
    let den = ((probs.sum_all()? + target.sum_all()?)? + 1.0)?;
    Ok((1.0 - (num / den)?)?)
}

/// `λ_focal · focal(γ) + λ_dice · dice` for one `h × w` slot of logits.
pub fn segmentation_loss(logits: &Tensor, gt: &BinaryMask, cfg: &LossConfig) -> Result<Tensor> {
    let (h, w) = logits.dims2()?;
    let target = target_tensor(gt, (h, w), logits)?;
    let probs = crate::segcore::sigmoid(logits)?;
    let focal = focal_loss(logits, &target, cfg.gamma)?;
    let dice = dice_loss(&probs, &target)?;
    Ok(((focal * cfg.lambda_focal)? + (dice * cfg.lambda_dice)?)?)
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
