//! Reference-driven visual prompting.
//!
//! A validated reference mask selects feature cells of the reference image;
//! each target cell is scored by its best cosine similarity to those cells;
//! a greedy non-maximum suppression turns the score map into positive point
//! prompts; the decoder turns the points into a pseudolabel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageRgb};
use crate::peft::EpeftState;
use crate::segcore::{FeatureGrid, PointPrompt, SegModel};

/// A cell counts as foreground when at least this fraction of its pixels is masked.
pub const CELL_COVERAGE: f32 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    /// Unit-norm feature vectors of the masked reference cells.
    pub vectors: Vec<Vec<f32>>,
    pub centroid: Vec<f32>,
    pub source_image_id: String,
    pub cells: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    /// Row-major values in `[-1, 1]`.
    pub values: Vec<f32>,
}

impl SimilarityMap {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelStatus {
    Predicted,
    Refined,
    Validated,
}

impl LabelStatus {
    /// Same-status updates are allowed; moving backwards is not.
    pub fn can_become(self, next: LabelStatus) -> bool {
        next >= self
    }
}

#[derive(Debug, Clone)]
pub struct PseudoLabel {
    pub image_id: String,
    pub mask: BinaryMask,
    pub confidence: f32,
    pub status: LabelStatus,
    /// Points fed to the decoder; empty when matching found nothing.
    pub prompts: Vec<PointPrompt>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchParams {
    pub tau: f32,
    pub k_max: usize,
    pub nms_radius: usize,
    pub threshold: f32,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self { tau: 0.5, k_max: 5, nms_radius: 1, threshold: 0.0 }
    }
}

fn normalize(v: &[f32]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    (norm > 1e-12).then(|| v.iter().map(|x| (f64::from(*x) / norm) as f32).collect())
}

pub fn build_reference(grid: &FeatureGrid, mask: &BinaryMask) -> Result<ReferenceSet> {
    let (h, w) = grid.image_size();
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "reference mask is {}x{}, image is {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    let mut vectors = Vec::new();
    let mut cells = Vec::new();
    for r in 0..grid.height() {
        for c in 0..grid.width() {
            if mask.cell_coverage(r, c, grid.stride()) >= CELL_COVERAGE {
                if let Some(v) = normalize(grid.cell(r, c)) {
                    vectors.push(v);
                    cells.push((r, c));
                }
            }
        }
    }
    if vectors.is_empty() {
        return Err(Error::EmptyReference);
    }
    let mut mean = vec![0.0f32; grid.dim()];
    for v in &vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / vectors.len() as f32;
        }
    }
    let centroid = normalize(&mean).unwrap_or(mean);
    Ok(ReferenceSet { vectors, centroid, source_image_id: grid.source_image_id().to_string(), cells })
}

pub fn similarity_map(reference: &ReferenceSet, target: &FeatureGrid) -> Result<SimilarityMap> {
    let d = reference.vectors[0].len();
    if target.dim() != d {
        return Err(Error::Shape(format!("reference width {d}, target width {}", target.dim())));
    }
    let mut values = Vec::with_capacity(target.height() * target.width());
    for r in 0..target.height() {
        for c in 0..target.width() {
            let score = match normalize(target.cell(r, c)) {
                Some(t) => reference
                    .vectors
                    .iter()
                    .map(|v| v.iter().zip(&t).map(|(a, b)| a * b).sum::<f32>())
                    .fold(f32::NEG_INFINITY, f32::max)
                    .clamp(-1.0, 1.0),
                None => 0.0,
            };
            values.push(score);
        }
    }
    Ok(SimilarityMap { height: target.height(), width: target.width(), stride: target.stride(), values })
}

/// Cells at or above `tau`, best first, ties in row-major order.
pub fn candidate_cells(sm: &SimilarityMap, tau: f32) -> Vec<(usize, usize)> {
    let mut cells: Vec<_> = (0..sm.height)
        .flat_map(|r| (0..sm.width).map(move |c| (r, c)))
        .filter(|&(r, c)| sm.get(r, c) >= tau)
        .collect();
    cells.sort_by(|a, b| sm.get(b.0, b.1).total_cmp(&sm.get(a.0, a.1)).then(a.cmp(b)));
    cells
}

/// Greedy Chebyshev-radius suppression over `candidate_cells`.
pub fn select_cells(sm: &SimilarityMap, tau: f32, k_max: usize, nms_radius: usize) -> Vec<(usize, usize)> {
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    for (r, c) in candidate_cells(sm, tau) {
        if chosen.len() >= k_max {
            break;
        }
        let suppressed = chosen.iter().any(|&(cr, cc)| r.abs_diff(cr).max(c.abs_diff(cc)) <= nms_radius);
        if !suppressed {
            chosen.push((r, c));
        }
    }
    chosen
}

pub fn cell_center(row: usize, col: usize, stride: usize) -> PointPrompt {
    PointPrompt::positive((col as f32 + 0.5) * stride as f32, (row as f32 + 0.5) * stride as f32)
}

pub fn sample_points(sm: &SimilarityMap, tau: f32, k_max: usize, nms_radius: usize) -> Result<Vec<PointPrompt>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidConfig(format!("tau = {tau} must lie in (0, 1)")));
    }
    let cells = select_cells(sm, tau, k_max, nms_radius);
    if cells.is_empty() {
        return Err(Error::NoMatch { tau });
    }
    Ok(cells.into_iter().map(|(r, c)| cell_center(r, c, sm.stride)).collect())
}

/// Runs matching and decoding for one already-encoded target.
pub fn pseudolabel_for_grid(
    model: &SegModel,
    peft: Option<&EpeftState>,
    reference: &ReferenceSet,
    grid: &FeatureGrid,
    params: &MatchParams,
) -> Result<PseudoLabel> {
    let (h, w) = grid.image_size();
    let sm = similarity_map(reference, grid)?;
    let points = match sample_points(&sm, params.tau, params.k_max, params.nms_radius) {
        Ok(p) => p,
        Err(Error::NoMatch { .. }) => {
            return Ok(PseudoLabel {
                image_id: grid.source_image_id().to_string(),
                mask: BinaryMask::empty(h, w),
                confidence: 0.0,
                status: LabelStatus::Predicted,
                prompts: Vec::new(),
            })
        }
        Err(e) => return Err(e),
    };
    let pred = model.predict(grid, &points, peft, params.threshold)?;
    Ok(PseudoLabel {
        image_id: grid.source_image_id().to_string(),
        mask: pred.mask,
        confidence: pred.iou_pred.clamp(0.0, 1.0),
        status: LabelStatus::Predicted,
        prompts: points,
    })
}

/// Pseudolabels for every target, computed in parallel. A target without a
/// match yields an empty mask with confidence 0 instead of an error.
pub fn generate_pseudolabels(
    model: &SegModel,
    peft: Option<&EpeftState>,
    reference: &ReferenceSet,
    targets: &[ImageRgb],
    params: &MatchParams,
) -> Result<Vec<PseudoLabel>> {
    targets
        .par_iter()
        .map(|img| pseudolabel_for_grid(model, peft, reference, &model.encode(img)?, params))
        .collect()
}
