use std::collections::BTreeMap;

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{scalar, segmentation_loss, LossConfig};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageRgb};
use crate::matcher::{cell_center, CELL_COVERAGE};
use crate::peft::EpeftState;
use crate::segcore::{binarize, decode, encode_points, DecoderWeights, FeatureGrid, PointPrompt, SegModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Synthetic,
    RefinedPseudolabel,
}

#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub image: ImageRgb,
    pub gt_mask: BinaryMask,
    pub origin: Origin,
    /// Prompts to train with; when absent, foreground cells are sampled each epoch.
    pub prompts: Option<Vec<PointPrompt>>,
}

impl LabeledExample {
    pub fn validate(&self) -> Result<()> {
        let img = (self.image.height(), self.image.width());
        let mask = (self.gt_mask.height(), self.gt_mask.width());
        if img != mask {
            return Err(Error::Shape(format!("image {img:?} but mask {mask:?} in `{}`", self.image.id())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda_focal: f64,
    pub lambda_dice: f64,
    pub gamma: f64,
    /// Weight of the squared error between predicted and achieved IoU.
    pub lambda_iou: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 12, lr: 1e-3, batch_size: 4, lambda_focal: 1.0, lambda_dice: 1.0, gamma: 2.0, lambda_iou: 1.0, seed: 0 }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig { lambda_focal: self.lambda_focal, lambda_dice: self.lambda_dice, gamma: self.gamma }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr = {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.lambda_iou.is_finite() && self.lambda_iou >= 0.0) {
            return Err(Error::InvalidConfig("lambda_iou must be non-negative".into()));
        }
        self.loss().validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub epoch: usize,
    pub epochs: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean loss of each epoch, in order.
    pub epoch_losses: Vec<f64>,
}

impl TrainHistory {
    pub fn first(&self) -> Option<f64> {
        self.epoch_losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Up to five positive points (the matcher's default `k_max`) at centres of foreground cells.
///
/// Cells at least half covered are preferred; thin structures that never
/// cover half a cell fall back to the best-covered cells.
pub fn sample_training_prompts(gt: &BinaryMask, stride: usize, rng: &mut impl Rng) -> Vec<PointPrompt> {
    let (gh, gw) = (gt.height() / stride, gt.width() / stride);
    let mut cells: Vec<((usize, usize), f32)> = (0..gh)
        .flat_map(|r| (0..gw).map(move |c| (r, c)))
        .map(|(r, c)| ((r, c), gt.cell_coverage(r, c, stride)))
        .filter(|(_, cov)| *cov > 0.0)
        .collect();
    if cells.is_empty() {
        return vec![PointPrompt::positive(gt.width() as f32 / 2.0, gt.height() as f32 / 2.0)];
    }
    let solid: Vec<_> = cells.iter().copied().filter(|(_, cov)| *cov >= CELL_COVERAGE).collect();
    if solid.is_empty() {
        cells.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cells.truncate(8);
    } else {
        cells = solid;
    }
    let k = rng.random_range(1..=5usize).min(cells.len());
    cells.shuffle(rng);
    cells[..k].iter().map(|((r, c), _)| cell_center(*r, *c, stride)).collect()
}

pub(crate) struct Sample {
    pub grid: FeatureGrid,
    pub gt: BinaryMask,
    pub prompts: Option<Vec<PointPrompt>>,
}

pub(crate) fn encode_samples(model: &SegModel, data: &[LabeledExample]) -> Result<Vec<Sample>> {
    use rayon::prelude::*;
    data.par_iter()
        .map(|ex| {
            ex.validate()?;
            Ok(Sample { grid: model.encode(&ex.image)?, gt: ex.gt_mask.clone(), prompts: ex.prompts.clone() })
        })
        .collect()
}

/// Loss of one example; the slot with the lowest segmentation loss is trained.
pub(crate) fn example_loss(
    weights: &DecoderWeights,
    peft: Option<&EpeftState>,
    grid: &FeatureGrid,
    points: &[PointPrompt],
    gt: &BinaryMask,
    cfg: &TrainConfig,
) -> Result<Tensor> {
    let tokens = encode_points(points, grid.image_size(), &weights.polarity_embeddings()?)?;
    let ml = decode(grid, &tokens, weights, peft)?;
    let loss_cfg = cfg.loss();
    let mut best: Option<(f64, usize, Tensor)> = None;
    for slot in 0..ml.slots() {
        let l = segmentation_loss(&ml.logits().get(slot)?, gt, &loss_cfg)?;
        let v = scalar(&l)?;
        if best.as_ref().is_none_or(|(b, _, _)| v < *b || b.is_nan()) {
            best = Some((v, slot, l));
        }
    }
    let (_, slot, mut loss) = best.expect("decoder has at least one slot");
    if cfg.lambda_iou > 0.0 {
        let (lh, lw) = ml.size();
        let achieved = binarize(&ml, slot, 0.0, (lh, lw))?.iou(&gt.resize_nearest(lh, lw))?;
        let pred = ml.iou_pred().get(slot)?;
        let err = (pred - achieved)?.sqr()?;
        loss = (loss + (err * cfg.lambda_iou)?)?;
    }
    Ok(loss)
}

pub(crate) enum Stop {
    /// Non-finite loss or parameters during this (1-based) epoch.
    Diverged(usize),
    Failed(Error),
}

impl From<Error> for Stop {
    fn from(e: Error) -> Self {
        match e {
            Error::Numerical { .. } => Stop::Diverged(0),
            e => Stop::Failed(e),
        }
    }
}

impl From<candle_core::Error> for Stop {
    fn from(e: candle_core::Error) -> Self {
        Stop::Failed(e.into())
    }
}

/// Shuffled mini-batch training shared by fine-tuning and pretraining.
pub(crate) fn train_loop(
    samples: &[Sample],
    cfg: &TrainConfig,
    vars: Vec<Var>,
    stride: usize,
    sink: &mut dyn FnMut(ProgressEvent),
    mut loss_of: impl FnMut(&Sample, &[PointPrompt]) -> Result<Tensor>,
    mut on_epoch_end: impl FnMut(usize) -> Result<bool>,
) -> std::result::Result<TrainHistory, Stop> {
    let at = |epoch: usize| move |s: Stop| match s {
        Stop::Diverged(_) => Stop::Diverged(epoch + 1),
        other => other,
    };
    let mut opt = AdamW::new(vars, ParamsAdamW { lr: cfg.lr, weight_decay: 0.0, ..ParamsAdamW::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut sum: Option<Tensor> = None;
            for &i in batch {
                let s = &samples[i];
                let points = match &s.prompts {
                    Some(p) => p.clone(),
                    None => sample_training_prompts(&s.gt, stride, &mut rng),
                };
                let l = loss_of(s, &points).map_err(Stop::from).map_err(at(epoch))?;
                sum = Some(match sum {
                    Some(acc) => (acc + l)?,
                    None => l,
                });
            }
            let loss = (sum.expect("non-empty batch") / batch.len() as f64)?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Err(Stop::Diverged(epoch + 1));
            }
            total += v * batch.len() as f64;
            opt.backward_step(&loss)?;
        }
        let mean = total / samples.len() as f64;
        history.epoch_losses.push(mean);
        if !on_epoch_end(epoch)? {
            return Err(Stop::Diverged(epoch + 1));
        }
        sink(ProgressEvent { epoch: epoch + 1, epochs: cfg.epochs, loss: mean });
    }
    Ok(history)
}

fn all_finite(values: &BTreeMap<String, Tensor>) -> Result<bool> {
    for t in values.values() {
        if !scalar(&t.sum_all()?)?.is_finite() {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Trains a copy of `state` on `data`; the base model and `state` itself are
/// left untouched. A non-finite loss or parameter ends training with
/// [`Error::TrainingDiverged`] carrying the last finite state.
pub fn finetune(
    model: &SegModel,
    state: &EpeftState,
    data: &[LabeledExample],
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(ProgressEvent),
) -> Result<(EpeftState, TrainHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("fine-tuning needs at least one example".into()));
    }
    state.check_decoder(model.decoder.config())?;
    let trained = state.snapshot()?;
    if cfg.epochs == 0 {
        return Ok((trained, TrainHistory::default()));
    }
    let samples = encode_samples(model, data)?;
    let stride = samples[0].grid.stride();
    let base = if model.decoder.dtype() == trained.dtype() {
        model.decoder.clone()
    } else {
        model.decoder.to_dtype(trained.dtype())?
    };
    let mut last_good = trained.values()?;
    let result = train_loop(
        &samples,
        cfg,
        trained.vars(),
        stride,
        sink,
        |s, points| example_loss(&base, Some(&trained), &s.grid, points, &s.gt, cfg),
        |_| {
            let now = trained.values()?;
            if !all_finite(&now)? {
                return Ok(false);
            }
            last_good = now;
            Ok(true)
        },
    );
    match result {
        Ok(history) => Ok((trained, history)),
        Err(Stop::Diverged(epoch)) => {
            let last_state = state.snapshot()?;
            last_state.load_values(&last_good)?;
            Err(Error::TrainingDiverged { epoch, last_state: Box::new(last_state) })
        }
        Err(Stop::Failed(e)) => Err(e),
    }
}

/// Trains every base weight from scratch; used to build the shipped fixture.
pub fn pretrain_decoder(
    model: &SegModel,
    data: &[LabeledExample],
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(ProgressEvent),
) -> Result<(DecoderWeights, TrainHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("pretraining needs at least one example".into()));
    }
    let samples = encode_samples(model, data)?;
    let stride = samples[0].grid.stride();
    let (weights, vars) = model.decoder.to_dtype(DType::F32)?.to_vars()?;
    let vars = vars.into_iter().map(|(_, v)| v).collect();
    let history = train_loop(
        &samples,
        cfg,
        vars,
        stride,
        sink,
        |s, points| example_loss(&weights, None, &s.grid, points, &s.gt, cfg),
        |_| Ok(true),
    )
    .map_err(|s| match s {
        Stop::Diverged(epoch) => Error::InvalidConfig(format!("pretraining diverged in epoch {epoch}; lower the learning rate")),
        Stop::Failed(e) => e,
    })?;
    Ok((weights.snapshot()?, history))
}
