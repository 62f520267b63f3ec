//! `EPEF1` delta checkpoints: only the trainable arrays, never the base.

use std::collections::BTreeMap;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::config::EpeftConfig;
use super::state::{attach_shell, EpeftState};
use crate::error::{Error, Result};
use crate::segcore::DecoderConfig;
use crate::tensorfile::{self, NamedArray};

pub const EPEF_MAGIC: &[u8; 5] = b"EPEF1";

#[derive(Debug, Serialize, Deserialize)]
struct EpefMeta {
    version: u32,
    fingerprint: String,
    decoder: DecoderConfig,
    config: EpeftConfig,
}

pub fn save_delta(state: &EpeftState) -> Result<Vec<u8>> {
    let meta = EpefMeta {
        version: 1,
        fingerprint: state.fingerprint().to_string(),
        decoder: *state.decoder_config(),
        config: state.config().clone(),
    };
    let params = state.named_params();
    let arrays: Vec<_> = params.iter().map(|(n, _, v)| NamedArray { name: n, tensor: v.as_tensor() }).collect();
    tensorfile::encode(EPEF_MAGIC, &meta, &arrays)
}

/// Reads a checkpoint and checks it belongs to a decoder shaped like `decoder`.
pub fn load_delta(bytes: &[u8], decoder: &DecoderConfig) -> Result<EpeftState> {
    let decoded = tensorfile::decode::<EpefMeta>(EPEF_MAGIC, bytes)?;
    let meta = &decoded.meta;
    if meta.version != 1 {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {}", meta.version)));
    }
    if meta.config.fingerprint() != meta.fingerprint {
        return Err(Error::ConfigMismatch(format!(
            "stored fingerprint {} does not match its config ({})",
            meta.fingerprint,
            meta.config.fingerprint()
        )));
    }
    if &meta.decoder != decoder {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint targets {:?}, decoder is {:?}",
            meta.decoder, decoder
        )));
    }
    let state = attach_shell(&meta.config, decoder, DType::F32)?;
    let expected: Vec<_> = state.named_params().into_iter().map(|(n, _, v)| (n, v.dims().to_vec())).collect();
    let found: Vec<_> = decoded.arrays.iter().map(|(e, _)| (e.name.clone(), e.shape.clone())).collect();
    if expected != found {
        return Err(Error::CorruptCheckpoint("array manifest does not match the stored config".into()));
    }
    let values = (0..decoded.arrays.len())
        .map(|i| Ok((decoded.arrays[i].0.name.clone(), decoded.tensor(i, DType::F32)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    state.load_values(&values)?;
    Ok(state)
}

/// Like [`load_delta`], and additionally requires the stored config to be `expected`.
pub fn load_delta_for(bytes: &[u8], decoder: &DecoderConfig, expected: &EpeftConfig) -> Result<EpeftState> {
    let state = load_delta(bytes, decoder)?;
    if state.fingerprint() != expected.fingerprint() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint config {} differs from the expected {}",
            state.fingerprint(),
            expected.fingerprint()
        )));
    }
    Ok(state)
}
