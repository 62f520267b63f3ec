//! Flat-directory project store.
//!
//! ```text
//! <root>/projects/<id>/project.json
//!                     /images/<image_id>.png
//!                     /masks/<image_id>.png        1-bit
//!                     /masks/reference.png
//!                     /checkpoints/<n>.epef
//! <root>/jobs/<job_id>.json
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use vplab_core::image::{BinaryMask, ImageRgb};
use vplab_core::matcher::LabelStatus;
use vplab_core::peft::EpeftConfig;
use vplab_core::segcore::{PointPrompt, TOY_PATCH};

use crate::codec;
use crate::error::{ApiError, ApiResult};

pub const SCHEMA_VERSION: u32 = 1;
pub const REFERENCE_MASK_FILE: &str = "masks/reference.png";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub schema_version: u32,
    pub id: String,
    pub name: String,
    pub class_label: String,
    pub encoder_id: String,
    pub images: Vec<ImageRecord>,
    pub reference: Option<ReferenceRecord>,
    pub labels: BTreeMap<String, MaskRecord>,
    pub job_ids: Vec<String>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub metrics: Vec<MetricsRound>,
    pub peft: EpeftConfig,
    /// Source of image ids and of the ordering used by "most recently validated".
    pub next_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub file: String,
    pub height: usize,
    pub width: usize,
    pub original_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub image_id: String,
    pub points: Vec<PointPrompt>,
    pub mask_file: String,
    pub validated: bool,
    #[serde(skip)]
    pub load_error: Option<String>,
}

/// A painted stroke as sent by the annotation tool. Stored for provenance only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub x: f32,
    pub y: f32,
    pub radius: f32,
    /// `true` paints foreground, `false` erases.
    pub value: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub seq: u64,
    pub action: String,
    pub status: LabelStatus,
    pub pixels: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub strokes: Vec<Stroke>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub image_id: String,
    pub file: String,
    pub status: LabelStatus,
    pub confidence: f32,
    /// `next_seq` value at the last status or mask change.
    pub seq: u64,
    pub history: Vec<HistoryEntry>,
    /// Set while loading when the mask file cannot be decoded.
    #[serde(skip)]
    pub load_error: Option<String>,
}

impl MaskRecord {
    pub fn failed(&self) -> bool {
        self.load_error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub id: String,
    pub file: String,
    pub round: usize,
    pub job_id: String,
    pub examples: usize,
    pub epoch_losses: Vec<f64>,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRound {
    /// 0 for the base decoder, `n` after the `n`-th fine-tune.
    pub round: usize,
    pub checkpoint_id: Option<String>,
    pub job_id: String,
    pub validated: usize,
    /// mIoU in percent of the matcher pipeline against validated masks.
    pub miou: Option<f64>,
}

impl Project {
    pub fn new(id: String, name: String, class_label: String) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            id,
            name,
            class_label,
            encoder_id: TOY_PATCH.to_string(),
            images: Vec::new(),
            reference: None,
            labels: BTreeMap::new(),
            job_ids: Vec::new(),
            checkpoints: Vec::new(),
            metrics: Vec::new(),
            peft: EpeftConfig::default(),
            next_seq: 1,
        }
    }

    pub fn bump_seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    pub fn image(&self, image_id: &str) -> ApiResult<&ImageRecord> {
        self.images.iter().find(|i| i.id == image_id).ok_or_else(|| ApiError::not_found("image", image_id))
    }

    pub fn validated_reference(&self) -> Option<&ReferenceRecord> {
        self.reference.as_ref().filter(|r| r.validated && r.load_error.is_none())
    }

    pub fn latest_checkpoint(&self) -> Option<&CheckpointRecord> {
        self.checkpoints.last()
    }

    /// Labels usable for fine-tuning: refined or validated, readable, newest first.
    /// With `k`, only the `k` most recently validated.
    pub fn training_labels(&self, k: Option<usize>) -> Vec<&MaskRecord> {
        let mut usable: Vec<&MaskRecord> = self
            .labels
            .values()
            .filter(|l| !l.failed())
            .filter(|l| match k {
                Some(_) => l.status == LabelStatus::Validated,
                None => l.status >= LabelStatus::Refined,
            })
            .collect();
        usable.sort_by(|a, b| b.seq.cmp(&a.seq).then_with(|| a.image_id.cmp(&b.image_id)));
        if let Some(k) = k {
            usable.truncate(k);
        }
        usable
    }
}

/// Owns the data directory. Mutations of one project are serialised through
/// [`Store::lock`]; different projects proceed independently.
pub struct Store {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> ApiResult<Self> {
        let root = root.into();
        std::fs::create_dir_all(root.join("projects"))?;
        std::fs::create_dir_all(root.join("jobs"))?;
        Ok(Self { root, locks: Mutex::new(HashMap::new()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn jobs_dir(&self) -> PathBuf {
        self.root.join("jobs")
    }

    pub fn project_dir(&self, id: &str) -> PathBuf {
        self.root.join("projects").join(id)
    }

    fn project_lock(&self, id: &str) -> Arc<Mutex<()>> {
        self.locks.lock().expect("lock table").entry(id.to_string()).or_default().clone()
    }

    /// Runs `f` on the project under its lock and saves the result if `f` succeeds.
    pub fn update<T>(&self, id: &str, f: impl FnOnce(&mut Project) -> ApiResult<T>) -> ApiResult<T> {
        let lock = self.project_lock(id);
        let _guard: MutexGuard<'_, ()> = lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut project = self.load(id)?;
        let out = f(&mut project)?;
        self.save(&project)?;
        Ok(out)
    }

    pub fn create_project(&self, name: &str, class_label: &str) -> ApiResult<Project> {
        if name.trim().is_empty() {
            return Err(ApiError::bad_request("project name must not be empty"));
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.project_dir(&id);
        for sub in ["images", "masks", "checkpoints"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        let project = Project::new(id, name.to_string(), class_label.to_string());
        self.save(&project)?;
        Ok(project)
    }

    pub fn list_projects(&self) -> ApiResult<Vec<String>> {
        let mut ids: Vec<String> = std::fs::read_dir(self.root.join("projects"))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("project.json").is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn project_bytes(project: &Project) -> ApiResult<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(project)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn save(&self, project: &Project) -> ApiResult<()> {
        write_atomic(&self.project_dir(&project.id).join("project.json"), &Self::project_bytes(project)?)
    }

    /// Loads a project. Masks that cannot be decoded are flagged on their
    /// record instead of failing the load.
    pub fn load(&self, id: &str) -> ApiResult<Project> {
        if !is_safe_id(id) {
            return Err(ApiError::not_found("project", id));
        }
        let path = self.project_dir(id).join("project.json");
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(ApiError::not_found("project", id)),
            Err(e) => return Err(e.into()),
        };
        let raw: serde_json::Value = serde_json::from_slice(&bytes)?;
        let version = raw.get("schema_version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
        if version != SCHEMA_VERSION {
            return Err(ApiError::migration_required(version, SCHEMA_VERSION));
        }
        let mut project: Project = serde_json::from_value(raw)?;
        for rec in project.labels.values_mut() {
            rec.load_error = self.read_mask(id, &rec.file).err().map(|e| e.message);
        }
        if let Some(r) = project.reference.as_mut() {
            r.load_error = self.read_mask(id, &r.mask_file).err().map(|e| e.message);
        }
        Ok(project)
    }

    /// Stores an upload as PNG at the working size.
    pub fn add_image(&self, project: &mut Project, bytes: &[u8], original_name: Option<String>) -> ApiResult<ImageRecord> {
        let seq = project.bump_seq();
        let id = format!("img{seq:04}");
        let Some((img, png)) = codec::decode_upload(bytes, &id)? else {
            return Err(ApiError::unsupported_media(format!(
                "{} is not a PNG or JPEG image",
                original_name.as_deref().unwrap_or("upload")
            )));
        };
        let file = format!("images/{id}.png");
        write_atomic(&self.project_dir(&project.id).join(&file), &png)?;
        let rec = ImageRecord { id, file, height: img.height(), width: img.width(), original_name };
        project.images.push(rec.clone());
        Ok(rec)
    }

    pub fn read_image(&self, project: &Project, image_id: &str) -> ApiResult<ImageRgb> {
        let rec = project.image(image_id)?;
        let bytes = std::fs::read(self.project_dir(&project.id).join(&rec.file))?;
        codec::load_stored_image(&bytes, image_id)
    }

    pub fn read_image_png(&self, project: &Project, image_id: &str) -> ApiResult<Vec<u8>> {
        let rec = project.image(image_id)?;
        Ok(std::fs::read(self.project_dir(&project.id).join(&rec.file))?)
    }

    pub fn write_mask(&self, project_id: &str, file: &str, mask: &BinaryMask) -> ApiResult<()> {
        write_atomic(&self.project_dir(project_id).join(file), &codec::mask_to_png(mask))
    }

    pub fn read_mask(&self, project_id: &str, file: &str) -> ApiResult<BinaryMask> {
        let bytes = std::fs::read(self.project_dir(project_id).join(file))
            .map_err(|e| ApiError::internal(format!("mask {file}: {e}")))?;
        codec::mask_from_png(&bytes).map_err(|e| ApiError::internal(format!("mask {file}: {}", e.message)))
    }

    pub fn write_checkpoint(&self, project_id: &str, round: usize, bytes: &[u8]) -> ApiResult<String> {
        let file = format!("checkpoints/{round:04}.epef");
        write_atomic(&self.project_dir(project_id).join(&file), bytes)?;
        Ok(file)
    }

    pub fn read_checkpoint(&self, project_id: &str, rec: &CheckpointRecord) -> ApiResult<Vec<u8>> {
        Ok(std::fs::read(self.project_dir(project_id).join(&rec.file))?)
    }
}

pub fn mask_file_for(image_id: &str) -> String {
    format!("masks/{image_id}.png")
}

/// Ids are generated by the service; anything else is rejected before it
/// can reach the file system.
pub fn is_safe_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> ApiResult<()> {
    let dir = path.parent().ok_or_else(|| ApiError::internal("path has no parent"))?;
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".{}.tmp", path.file_name().and_then(|n| n.to_str()).unwrap_or("file")));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
