//! HTTP routes. Every error body is `{code, message}`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use vplab_core::image::BinaryMask;
use vplab_core::matcher::{build_reference, LabelStatus};
use vplab_core::segcore::{PointPrompt, SegModel};

use crate::codec;
use crate::error::{ApiError, ApiResult};
use crate::jobs::{JobKind, JobQueue, JobRecord};
use crate::pipeline::{self, FinetunePayload};
use crate::store::{mask_file_for, HistoryEntry, MaskRecord, Project, ReferenceRecord, Store, Stroke, REFERENCE_MASK_FILE};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub queue: Arc<JobQueue>,
    pub model: Arc<SegModel>,
}

impl AppState {
    pub fn open(data_dir: impl Into<std::path::PathBuf>, model: SegModel) -> ApiResult<Self> {
        let store = Arc::new(Store::open(data_dir)?);
        let queue = Arc::new(JobQueue::open(&store)?);
        Ok(Self { store, queue, model: Arc::new(model) })
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/projects", post(create_project).get(list_projects))
        .route("/projects/{id}", get(get_project))
        .route("/projects/{id}/images", post(upload_images))
        .route("/projects/{id}/images/{image_id}", get(get_image))
        .route("/projects/{id}/reference", put(set_reference).get(get_reference))
        .route("/projects/{id}/reference/validate", post(validate_reference))
        .route("/projects/{id}/match", post(submit_match))
        .route("/projects/{id}/finetune", post(submit_finetune))
        .route("/projects/{id}/evaluate", post(submit_evaluate))
        .route("/projects/{id}/labels", get(list_labels))
        .route("/projects/{id}/labels/{image_id}", put(put_label).get(get_label))
        .route("/projects/{id}/jobs", get(list_jobs))
        .route("/projects/{id}/metrics", get(get_metrics))
        .route("/projects/{id}/export", get(export))
        .route("/jobs/{id}", get(get_job))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(state)
}

/// Pulls queued jobs and runs each on a blocking thread, forever.
pub async fn worker_loop(state: AppState) {
    loop {
        let notified = state.queue.notified();
        loop {
            match state.queue.claim() {
                Ok(Some(job)) => {
                    let st = state.clone();
                    tokio::task::spawn_blocking(move || execute(&st, &job));
                }
                Ok(None) => break,
                Err(e) => {
                    eprintln!("job queue: {e}");
                    break;
                }
            }
        }
        notified.await;
    }
}

fn execute(state: &AppState, job: &JobRecord) {
    let progress = |p: f64| {
        let _ = state.queue.progress(&job.id, p);
    };
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        pipeline::run_job(&state.store, &state.model, job, &progress)
    }));
    let outcome = match outcome {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(e)) => Err(e.message),
        Err(_) => Err("worker panicked".to_string()),
    };
    if let Err(e) = state.queue.finish(&job.id, outcome) {
        eprintln!("job {}: {e}", job.id);
    }
}

/// A mask on the wire: base64 PNG (authoritative) and an optional
/// run-length string that must agree with it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskPayload {
    pub png: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rle: Option<String>,
}

impl MaskPayload {
    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self { png: codec::mask_to_base64_png(mask), rle: Some(codec::mask_to_rle(mask)) }
    }

    pub fn decode(&self, height: usize, width: usize) -> ApiResult<BinaryMask> {
        let mask = codec::mask_from_base64_png(&self.png)?;
        if (mask.height(), mask.width()) != (height, width) {
            return Err(ApiError::bad_request(format!(
                "mask is {}x{}, image is {height}x{width}",
                mask.height(),
                mask.width()
            )));
        }
        if let Some(rle) = &self.rle {
            if codec::mask_from_rle(rle, height, width)? != mask {
                return Err(ApiError::bad_request("run-length string disagrees with the PNG"));
            }
        }
        Ok(mask)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateProject {
    name: String,
    #[serde(default)]
    class_label: String,
}

type JsonBody<T> = Result<Json<T>, axum::extract::rejection::JsonRejection>;

fn body<T>(b: JsonBody<T>) -> ApiResult<T> {
    b.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

async fn create_project(State(s): State<AppState>, b: JsonBody<CreateProject>) -> ApiResult<(StatusCode, Json<Project>)> {
    let req = body(b)?;
    let p = s.store.create_project(&req.name, &req.class_label)?;
    Ok((StatusCode::CREATED, Json(p)))
}

async fn list_projects(State(s): State<AppState>) -> ApiResult<Json<serde_json::Value>> {
    let mut out = Vec::new();
    for id in s.store.list_projects()? {
        match s.store.load(&id) {
            Ok(p) => out.push(json!({ "id": p.id, "name": p.name, "class_label": p.class_label })),
            Err(e) => out.push(json!({ "id": id, "error": { "code": e.code, "message": e.message } })),
        }
    }
    Ok(Json(json!({ "projects": out })))
}

async fn get_project(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Project>> {
    Ok(Json(s.store.load(&id)?))
}

async fn upload_images(
    State(s): State<AppState>,
    Path(id): Path<String>,
    mut multipart: Multipart,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    s.store.load(&id)?;
    let mut files = Vec::new();
    while let Some(field) = multipart.next_field().await.map_err(|e| ApiError::bad_request(e.body_text()))? {
        let name = field.file_name().map(str::to_string);
        let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
        if !matches!(image::guess_format(&bytes), Ok(image::ImageFormat::Png | image::ImageFormat::Jpeg)) {
            return Err(ApiError::unsupported_media(format!(
                "{} is not a PNG or JPEG image",
                name.as_deref().unwrap_or("upload")
            )));
        }
        files.push((name, bytes));
    }
    if files.is_empty() {
        return Err(ApiError::bad_request("no files in the multipart body"));
    }
    let store = s.store.clone();
    let records = blocking(move || {
        store.update(&id, |p| {
            files.into_iter().map(|(name, bytes)| store.add_image(p, &bytes, name)).collect::<ApiResult<Vec<_>>>()
        })
    })
    .await?;
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    Ok((StatusCode::CREATED, Json(json!({ "image_ids": ids, "images": records }))))
}

async fn get_image(State(s): State<AppState>, Path((id, image_id)): Path<(String, String)>) -> ApiResult<Response> {
    let p = s.store.load(&id)?;
    let bytes = s.store.read_image_png(&p, &image_id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SetReference {
    image_id: String,
    points: Vec<PointPrompt>,
}

fn reference_json(r: &ReferenceRecord, mask: Option<&BinaryMask>, iou_pred: Option<f32>) -> serde_json::Value {
    json!({
        "image_id": r.image_id,
        "points": r.points,
        "validated": r.validated,
        "failed": r.load_error.is_some(),
        "iou_pred": iou_pred,
        "mask": mask.map(MaskPayload::from_mask),
    })
}

async fn set_reference(State(s): State<AppState>, Path(id): Path<String>, b: JsonBody<SetReference>) -> ApiResult<Json<serde_json::Value>> {
    let req = body(b)?;
    let (store, model) = (s.store.clone(), s.model.clone());
    blocking(move || {
        let project = store.load(&id)?;
        project.image(&req.image_id)?;
        let (mask, iou) = pipeline::propose_mask(&store, &model, &project, &req.image_id, &req.points)?;
        store.update(&id, |p| {
            store.write_mask(&p.id, REFERENCE_MASK_FILE, &mask)?;
            let r = ReferenceRecord {
                image_id: req.image_id.clone(),
                points: req.points.clone(),
                mask_file: REFERENCE_MASK_FILE.to_string(),
                validated: false,
                load_error: None,
            };
            let out = reference_json(&r, Some(&mask), Some(iou));
            p.reference = Some(r);
            Ok(Json(out))
        })
    })
    .await
}

async fn get_reference(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let p = s.store.load(&id)?;
    let r = p.reference.as_ref().ok_or_else(|| ApiError::not_found("reference of project", &id))?;
    let mask = s.store.read_mask(&id, &r.mask_file).ok();
    Ok(Json(reference_json(r, mask.as_ref(), None)))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ValidateReference {
    #[serde(default)]
    mask_edits: Option<MaskPayload>,
}

async fn validate_reference(
    State(s): State<AppState>,
    Path(id): Path<String>,
    b: Option<Json<ValidateReference>>,
) -> ApiResult<Json<serde_json::Value>> {
    let req = b.map(|Json(v)| v).unwrap_or_default();
    let (store, model) = (s.store.clone(), s.model.clone());
    blocking(move || {
        let project = store.load(&id)?;
        let r = project.reference.clone().ok_or_else(|| ApiError::conflict("no reference has been proposed"))?;
        let img = project.image(&r.image_id)?.clone();
        let current = store.read_mask(&id, &r.mask_file).ok();
        let mask = match &req.mask_edits {
            Some(m) => m.decode(img.height, img.width)?,
            None => current.clone().ok_or_else(|| ApiError::conflict("reference mask is unreadable; send mask_edits"))?,
        };
        if r.validated && current.as_ref() == Some(&mask) {
            return Ok(Json(reference_json(&r, Some(&mask), None)));
        }
        let grid = model.encode(&store.read_image(&project, &r.image_id)?)?;
        build_reference(&grid, &mask)?;
        store.update(&id, |p| {
            store.write_mask(&p.id, REFERENCE_MASK_FILE, &mask)?;
            let label_file = mask_file_for(&r.image_id);
            store.write_mask(&p.id, &label_file, &mask)?;
            let seq = p.bump_seq();
            let rec = p.labels.entry(r.image_id.clone()).or_insert_with(|| MaskRecord {
                image_id: r.image_id.clone(),
                file: label_file,
                status: LabelStatus::Validated,
                confidence: 1.0,
                seq,
                history: Vec::new(),
                load_error: None,
            });
            rec.status = LabelStatus::Validated;
            rec.confidence = 1.0;
            rec.seq = seq;
            rec.load_error = None;
            rec.history.push(HistoryEntry {
                seq,
                action: "reference".into(),
                status: LabelStatus::Validated,
                pixels: mask.count(),
                strokes: Vec::new(),
            });
            let reference = p.reference.as_mut().expect("checked above");
            reference.validated = true;
            reference.load_error = None;
            Ok(Json(reference_json(reference, Some(&mask), None)))
        })
    })
    .await
}

fn accepted(job: JobRecord) -> (StatusCode, Json<serde_json::Value>) {
    (StatusCode::ACCEPTED, Json(json!({ "job_id": job.id, "job": job })))
}

async fn submit_match(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let p = s.store.load(&id)?;
    if p.validated_reference().is_none() {
        return Err(ApiError::conflict("validate a reference before matching"));
    }
    let job = s.queue.submit(&id, JobKind::Match, serde_json::Value::Null)?;
    s.store.update(&id, |p| {
        p.job_ids.push(job.id.clone());
        Ok(())
    })?;
    Ok(accepted(job))
}

async fn submit_finetune(
    State(s): State<AppState>,
    Path(id): Path<String>,
    b: Option<Json<FinetunePayload>>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let payload = b.map(|Json(v)| v).unwrap_or_default();
    payload.validate()?;
    let p = s.store.load(&id)?;
    if p.training_labels(payload.k).is_empty() {
        return Err(ApiError::conflict("no refined or validated labels to train on"));
    }
    let job = s.queue.submit(&id, JobKind::Finetune, serde_json::to_value(&payload)?)?;
    s.store.update(&id, |p| {
        p.job_ids.push(job.id.clone());
        Ok(())
    })?;
    Ok(accepted(job))
}

async fn submit_evaluate(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    s.store.load(&id)?;
    let job = s.queue.submit(&id, JobKind::Evaluate, serde_json::Value::Null)?;
    s.store.update(&id, |p| {
        p.job_ids.push(job.id.clone());
        Ok(())
    })?;
    Ok(accepted(job))
}

fn label_json(rec: &MaskRecord, mask: Option<&BinaryMask>) -> serde_json::Value {
    json!({
        "image_id": rec.image_id,
        "status": rec.status,
        "confidence": rec.confidence,
        "failed": rec.failed(),
        "error": rec.load_error,
        "history": rec.history,
        "mask": mask.map(MaskPayload::from_mask),
    })
}

async fn list_labels(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let p = s.store.load(&id)?;
    let labels: Vec<_> = p.labels.values().map(|r| label_json(r, None)).collect();
    Ok(Json(json!({ "labels": labels })))
}

async fn get_label(State(s): State<AppState>, Path((id, image_id)): Path<(String, String)>) -> ApiResult<Json<serde_json::Value>> {
    let p = s.store.load(&id)?;
    p.image(&image_id)?;
    let rec = p.labels.get(&image_id).ok_or_else(|| ApiError::not_found("label", &image_id))?;
    let mask = if rec.failed() { None } else { Some(s.store.read_mask(&id, &rec.file)?) };
    Ok(Json(label_json(rec, mask.as_ref())))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PutLabel {
    mask: MaskPayload,
    status: LabelStatus,
    #[serde(default)]
    strokes: Vec<Stroke>,
}

async fn put_label(
    State(s): State<AppState>,
    Path((id, image_id)): Path<(String, String)>,
    b: JsonBody<PutLabel>,
) -> ApiResult<Json<serde_json::Value>> {
    let req = body(b)?;
    let store = s.store.clone();
    blocking(move || {
        store.update(&id, |p| {
            let img = p.image(&image_id)?.clone();
            let mask = req.mask.decode(img.height, img.width)?;
            if let Some(old) = p.labels.get(&image_id) {
                if !old.status.can_become(req.status) {
                    return Err(ApiError::conflict(format!(
                        "label is {:?}; it cannot move back to {:?}",
                        old.status, req.status
                    )));
                }
            }
            let file = mask_file_for(&image_id);
            store.write_mask(&p.id, &file, &mask)?;
            let seq = p.bump_seq();
            let rec = p.labels.entry(image_id.clone()).or_insert_with(|| MaskRecord {
                image_id: image_id.clone(),
                file,
                status: req.status,
                confidence: 1.0,
                seq,
                history: Vec::new(),
                load_error: None,
            });
            rec.status = req.status;
            rec.confidence = 1.0;
            rec.seq = seq;
            rec.load_error = None;
            rec.history.push(HistoryEntry { seq, action: "edit".into(), status: req.status, pixels: mask.count(), strokes: req.strokes });
            Ok(Json(label_json(rec, Some(&mask))))
        })
    })
    .await
}

async fn list_jobs(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    s.store.load(&id)?;
    Ok(Json(json!({ "jobs": s.queue.for_project(&id) })))
}

async fn get_job(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<JobRecord>> {
    Ok(Json(s.queue.get(&id)?))
}

async fn get_metrics(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let p = s.store.load(&id)?;
    let validated = p.labels.values().filter(|l| l.status == LabelStatus::Validated).count();
    let latest = p.metrics.last().and_then(|m| m.miou);
    Ok(Json(json!({ "validated": validated, "miou": latest, "rounds": p.metrics })))
}

async fn export(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let p = s.store.load(&id)?;
    let bytes = export_bytes(&s.store, &p)?;
    let name = format!("attachment; filename=\"{id}.epef\"");
    Ok(([(header::CONTENT_TYPE, "application/octet-stream".to_string()), (header::CONTENT_DISPOSITION, name)], Bytes::from(bytes))
        .into_response())
}

/// The newest fine-tuned delta checkpoint of a project.
pub fn export_bytes(store: &Store, project: &Project) -> ApiResult<Vec<u8>> {
    let rec = project
        .latest_checkpoint()
        .ok_or_else(|| ApiError::conflict("the project has no completed fine-tune to export"))?;
    store.read_checkpoint(&project.id, rec)
}
