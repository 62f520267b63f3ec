//! The compute behind each job kind. Runs on blocking threads; reads the
//! project snapshot outside the lock and applies results under it.

use serde::{Deserialize, Serialize};
use serde_json::json;
use vplab_core::image::BinaryMask;
use vplab_core::matcher::{build_reference, pseudolabel_for_grid, LabelStatus, MatchParams, ReferenceSet};
use vplab_core::peft::{attach, load_delta, save_delta, EpeftState};
use vplab_core::segcore::SegModel;
use vplab_core::trainer::{evaluate_miou, finetune, LabeledExample, Origin, TrainConfig};

use crate::error::{ApiError, ApiResult};
use crate::jobs::{JobKind, JobRecord};
use crate::store::{mask_file_for, CheckpointRecord, HistoryEntry, MaskRecord, MetricsRound, Project, Store};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetunePayload {
    /// Train on the `k` most recently validated labels only.
    pub k: Option<usize>,
    pub train_config: Option<TrainConfig>,
}

impl FinetunePayload {
    pub fn validate(&self) -> ApiResult<()> {
        if self.k == Some(0) {
            return Err(ApiError::bad_request("k must be at least 1"));
        }
        if let Some(cfg) = &self.train_config {
            cfg.validate()?;
        }
        Ok(())
    }
}

pub fn run_job(store: &Store, model: &SegModel, job: &JobRecord, progress: &dyn Fn(f64)) -> ApiResult<serde_json::Value> {
    match job.kind {
        JobKind::Match => run_match(store, model, &job.project_id, progress),
        JobKind::Finetune => {
            let payload: FinetunePayload = serde_json::from_value(job.payload.clone())
                .map_err(|e| ApiError::bad_request(format!("finetune payload: {e}")))?;
            run_finetune(store, model, &job.project_id, &job.id, &payload, progress)
        }
        JobKind::Evaluate => run_evaluate(store, model, &job.project_id, &job.id, progress),
    }
}

/// Delta state of the newest checkpoint, if any.
pub fn latest_state(store: &Store, model: &SegModel, project: &Project) -> ApiResult<Option<EpeftState>> {
    match project.latest_checkpoint() {
        None => Ok(None),
        Some(rec) => Ok(Some(load_delta(&store.read_checkpoint(&project.id, rec)?, model.decoder.config())?)),
    }
}

fn reference_set(store: &Store, model: &SegModel, project: &Project) -> ApiResult<(ReferenceSet, String)> {
    let r = project
        .validated_reference()
        .ok_or_else(|| ApiError::conflict("the project has no validated reference"))?;
    let img = store.read_image(project, &r.image_id)?;
    let mask = store.read_mask(&project.id, &r.mask_file)?;
    Ok((build_reference(&model.encode(&img)?, &mask)?, r.image_id.clone()))
}

fn run_match(store: &Store, model: &SegModel, project_id: &str, progress: &dyn Fn(f64)) -> ApiResult<serde_json::Value> {
    let project = store.load(project_id)?;
    let (reference, ref_image) = reference_set(store, model, &project)?;
    let state = latest_state(store, model, &project)?;
    let targets: Vec<&str> = project
        .images
        .iter()
        .map(|i| i.id.as_str())
        .filter(|id| *id != ref_image)
        .filter(|id| project.labels.get(*id).is_none_or(|l| l.status == LabelStatus::Predicted || l.failed()))
        .collect();
    let params = MatchParams::default();
    let mut labels = Vec::with_capacity(targets.len());
    for (i, id) in targets.iter().enumerate() {
        let grid = model.encode(&store.read_image(&project, id)?)?;
        labels.push(pseudolabel_for_grid(model, state.as_ref(), &reference, &grid, &params)?);
        progress((i + 1) as f64 / (targets.len() + 1) as f64);
    }

    let checkpoint_id = project.latest_checkpoint().map(|c| c.id.clone());
    store.update(project_id, |p| {
        let mut written = 0;
        for label in &labels {
            // A refinement may have arrived while we were computing.
            if p.labels.get(&label.image_id).is_some_and(|l| l.status > LabelStatus::Predicted && !l.failed()) {
                continue;
            }
            let file = mask_file_for(&label.image_id);
            store.write_mask(&p.id, &file, &label.mask)?;
            let seq = p.bump_seq();
            let entry = HistoryEntry {
                seq,
                action: "match".into(),
                status: LabelStatus::Predicted,
                pixels: label.mask.count(),
                strokes: Vec::new(),
            };
            let rec = p.labels.entry(label.image_id.clone()).or_insert_with(|| MaskRecord {
                image_id: label.image_id.clone(),
                file: file.clone(),
                status: LabelStatus::Predicted,
                confidence: 0.0,
                seq,
                history: Vec::new(),
                load_error: None,
            });
            rec.status = LabelStatus::Predicted;
            rec.confidence = label.confidence;
            rec.seq = seq;
            rec.load_error = None;
            rec.history.push(entry);
            written += 1;
        }
        Ok(json!({ "pseudolabels": written, "checkpoint_id": checkpoint_id }))
    })
}

/// mIoU in percent of the matcher pipeline against every readable validated
/// mask, or `None` when there is nothing to score.
fn validated_miou(store: &Store, model: &SegModel, project: &Project, state: Option<&EpeftState>) -> ApiResult<Option<f64>> {
    let Ok((reference, _)) = reference_set(store, model, project) else {
        return Ok(None);
    };
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for rec in project.labels.values().filter(|l| l.status == LabelStatus::Validated && !l.failed()) {
        let grid = model.encode(&store.read_image(project, &rec.image_id)?)?;
        preds.push(pseudolabel_for_grid(model, state, &reference, &grid, &MatchParams::default())?.mask);
        gts.push(store.read_mask(&project.id, &rec.file)?);
    }
    if preds.is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate_miou(&preds, &gts)?))
}

fn run_finetune(
    store: &Store,
    model: &SegModel,
    project_id: &str,
    job_id: &str,
    payload: &FinetunePayload,
    progress: &dyn Fn(f64),
) -> ApiResult<serde_json::Value> {
    payload.validate()?;
    let project = store.load(project_id)?;
    let chosen = project.training_labels(payload.k);
    if chosen.is_empty() {
        return Err(ApiError::conflict("no refined or validated labels to train on"));
    }
    let mut data = Vec::with_capacity(chosen.len());
    for rec in &chosen {
        data.push(LabeledExample {
            image: store.read_image(&project, &rec.image_id)?,
            gt_mask: store.read_mask(&project.id, &rec.file)?,
            origin: Origin::RefinedPseudolabel,
            prompts: None,
        });
    }
    let base_miou = if project.metrics.is_empty() { Some(validated_miou(store, model, &project, None)?) } else { None };

    let cfg = payload.train_config.unwrap_or_default();
    let fresh = attach(&project.peft, &model.decoder)?;
    let (state, history) = finetune(model, &fresh, &data, &cfg, &mut |e| progress(0.85 * e.epoch as f64 / e.epochs as f64))?;
    let miou = validated_miou(store, model, &project, Some(&state))?;
    progress(0.95);
    let bytes = save_delta(&state)?;

    store.update(project_id, |p| {
        let round = p.checkpoints.len() + 1;
        let file = store.write_checkpoint(&p.id, round, &bytes)?;
        let validated = p.labels.values().filter(|l| l.status == LabelStatus::Validated).count();
        if let Some(m) = base_miou {
            p.metrics.push(MetricsRound { round: 0, checkpoint_id: None, job_id: job_id.to_string(), validated, miou: m });
        }
        let rec = CheckpointRecord {
            id: format!("ckpt{round:04}"),
            file,
            round,
            job_id: job_id.to_string(),
            examples: data.len(),
            epoch_losses: history.epoch_losses.clone(),
            fingerprint: state.fingerprint().to_string(),
        };
        p.metrics.push(MetricsRound { round, checkpoint_id: Some(rec.id.clone()), job_id: job_id.to_string(), validated, miou });
        p.checkpoints.push(rec.clone());
        Ok(json!({
            "checkpoint_id": rec.id,
            "round": round,
            "examples": rec.examples,
            "epoch_losses": rec.epoch_losses,
            "miou": miou,
        }))
    })
}

fn run_evaluate(store: &Store, model: &SegModel, project_id: &str, job_id: &str, progress: &dyn Fn(f64)) -> ApiResult<serde_json::Value> {
    let project = store.load(project_id)?;
    let state = latest_state(store, model, &project)?;
    let miou = validated_miou(store, model, &project, state.as_ref())?;
    progress(0.9);
    let checkpoint_id = project.latest_checkpoint().map(|c| c.id.clone());
    store.update(project_id, |p| {
        let validated = p.labels.values().filter(|l| l.status == LabelStatus::Validated).count();
        let round = p.checkpoints.len();
        p.metrics.push(MetricsRound { round, checkpoint_id: checkpoint_id.clone(), job_id: job_id.to_string(), validated, miou });
        Ok(json!({ "round": round, "miou": miou, "validated": validated }))
    })
}

/// Runs the decoder on one image with user points, using the newest deltas.
pub fn propose_mask(
    store: &Store,
    model: &SegModel,
    project: &Project,
    image_id: &str,
    points: &[vplab_core::segcore::PointPrompt],
) -> ApiResult<(BinaryMask, f32)> {
    if points.is_empty() {
        return Err(ApiError::bad_request("at least one point is required"));
    }
    let img = store.read_image(project, image_id)?;
    let state = latest_state(store, model, project)?;
    let pred = model.predict(&model.encode(&img)?, points, state.as_ref(), MatchParams::default().threshold)?;
    Ok((pred.mask, pred.iou_pred.clamp(0.0, 1.0)))
}
