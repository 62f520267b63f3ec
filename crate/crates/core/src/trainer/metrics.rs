use crate::error::{Error, Result};
use crate::image::BinaryMask;

/// Mean IoU in percent; a pair of empty masks scores 100.
pub fn evaluate_miou(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return Err(Error::Shape("no masks to evaluate".into()));
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        total += p.iou(g)?;
    }
    Ok(100.0 * total / preds.len() as f64)
}
