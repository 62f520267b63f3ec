use thiserror::Error;

use crate::peft::EpeftState;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown encoder `{0}`")]
    EncoderNotFound(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite values after decoder layer {layer}")]
    Numerical { layer: usize },

    #[error("mask slot {slot} out of range (decoder has {available})")]
    Slot { slot: usize, available: usize },

    #[error("pattern `{pattern}` matches no decoder layer; available: {}", available.join(", "))]
    TargetResolution { pattern: String, available: Vec<String> },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("lora merge state: {0}")]
    MergeState(String),

    #[error("checkpoint does not match: {0}")]
    ConfigMismatch(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("reference mask covers no feature cell")]
    EmptyReference,

    #[error("no similarity cell reached tau = {tau}")]
    NoMatch { tau: f32 },

    #[error("dataset spec: {0}")]
    Spec(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged {
        epoch: usize,
        last_state: Box<EpeftState>,
    },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
