//! Decoder configuration, layer inventory and the frozen base weights.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prompt::PolarityEmbeddings;
use crate::error::{Error, Result};
use crate::tensorfile::{self, NamedArray};

pub const SEGC_MAGIC: &[u8; 5] = b"SEGC1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Width of the encoder features fed to the input projection.
    pub d_feature: usize,
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    /// Internal width of the cross attentions.
    pub d_down: usize,
    pub d_mlp: usize,
    pub n_mask_tokens: usize,
    pub upscale: usize,
}

impl DecoderConfig {
    /// Small profile used by tests, experiments and the shipped fixture.
    pub const fn tiny() -> Self {
        Self { d_feature: 32, d: 64, depth: 2, heads: 4, d_down: 32, d_mlp: 128, n_mask_tokens: 1, upscale: 4 }
    }

    /// Dimensions of the SAM mask decoder.
    pub const fn sam_scale() -> Self {
        Self { d_feature: 32, d: 256, depth: 2, heads: 8, d_down: 128, d_mlp: 2048, n_mask_tokens: 4, upscale: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.depth == 0 || self.n_mask_tokens == 0 || self.heads == 0 {
            return bad("depth, heads and n_mask_tokens must be at least 1".into());
        }
        if self.d % self.heads != 0 || self.d_down % self.heads != 0 {
            return bad(format!("d={} and d_down={} must be divisible by heads={}", self.d, self.d_down, self.heads));
        }
        if self.d % 4 != 0 {
            return bad(format!("d={} must be a multiple of 4 for positional encodings", self.d));
        }
        if !self.upscale.is_power_of_two() {
            return bad(format!("upscale={} must be a power of two", self.upscale));
        }
        let stages = self.upscale.trailing_zeros() as usize;
        if stages > 0 && self.d % (4 << (stages - 1)) != 0 {
            return bad(format!("d={} too small for {} upscaling stages", self.d, stages));
        }
        if self.d_feature == 0 || self.d_mlp == 0 {
            return bad("d_feature and d_mlp must be positive".into());
        }
        Ok(())
    }

    /// Output channels of each 2× upscaling stage: `d/4`, then halving.
    pub fn upscale_channels(&self) -> Vec<usize> {
        let stages = self.upscale.trailing_zeros() as usize;
        (0..stages).map(|s| self.d / (4 << s)).collect()
    }

    /// Channel width of the upscaled embedding the hypernetworks project onto.
    pub fn mask_channels(&self) -> usize {
        self.upscale_channels().last().copied().unwrap_or(self.d)
    }

    /// Path of the attention module at `index`: blocks first, then the final attention.
    pub fn attention_paths(&self) -> Vec<AttentionSpec> {
        let mut out = Vec::new();
        for b in 0..self.depth {
            out.push(AttentionSpec { path: format!("blocks.{b}.self_attn"), inner: self.d, block: Some(b) });
            out.push(AttentionSpec { path: format!("blocks.{b}.cross_t2i"), inner: self.d_down, block: Some(b) });
            out.push(AttentionSpec { path: format!("blocks.{b}.cross_i2t"), inner: self.d_down, block: Some(b) });
        }
        out.push(AttentionSpec { path: "final_attn".into(), inner: self.d_down, block: None });
        out
    }

    pub fn mlp_paths(&self) -> Vec<String> {
        (0..self.depth).map(|b| format!("blocks.{b}.mlp")).collect()
    }

    /// Every linear layer of the decoder with its `(d_in, d_out)`.
    pub fn linear_layers(&self) -> Vec<LinearSpec> {
        let mut out = vec![LinearSpec::new("input_proj", self.d_feature, self.d)];
        for att in self.attention_paths() {
            for p in ["q_proj", "k_proj", "v_proj"] {
                out.push(LinearSpec::new(format!("{}.{p}", att.path), self.d, att.inner));
            }
            out.push(LinearSpec::new(format!("{}.out_proj", att.path), att.inner, self.d));
        }
        for mlp in self.mlp_paths() {
            out.push(LinearSpec::new(format!("{mlp}.lin1"), self.d, self.d_mlp));
            out.push(LinearSpec::new(format!("{mlp}.lin2"), self.d_mlp, self.d));
        }
        let mut c_in = self.d;
        for (s, c) in self.upscale_channels().into_iter().enumerate() {
            out.push(LinearSpec::new(format!("upscale.{s}.proj"), c_in, 4 * c));
            c_in = c;
        }
        for j in 0..self.n_mask_tokens {
            out.push(LinearSpec::new(format!("hyper.{j}.lin0"), self.d, self.d));
            out.push(LinearSpec::new(format!("hyper.{j}.lin1"), self.d, self.d));
            out.push(LinearSpec::new(format!("hyper.{j}.lin2"), self.d, self.mask_channels()));
        }
        out.push(LinearSpec::new("iou_head.lin0", self.d, self.d));
        out.push(LinearSpec::new("iou_head.lin1", self.d, self.d));
        out.push(LinearSpec::new("iou_head.lin2", self.d, self.n_mask_tokens));
        out
    }

    fn norm_layers(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for b in 0..self.depth {
            for n in 1..=4 {
                out.push((format!("blocks.{b}.norm{n}"), self.d));
            }
        }
        out.push(("norm_final".into(), self.d));
        let chans = self.upscale_channels();
        for (s, c) in chans.iter().enumerate().take(chans.len().saturating_sub(1)) {
            out.push((format!("upscale.{s}.norm"), *c));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSpec {
    pub path: String,
    /// Width of the projected queries, keys and values.
    pub inner: usize,
    /// Owning two-way block, `None` for the final token-to-image attention.
    pub block: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearSpec {
    pub path: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearSpec {
    fn new(path: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self { path: path.into(), d_in, d_out }
    }
}

/// Frozen base weights of a decoder, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct DecoderWeights {
    cfg: DecoderConfig,
    tensors: BTreeMap<String, Tensor>,
    /// Fingerprint of the LoRA state folded into these weights, if any.
    merged_lora: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SegcMeta {
    version: u32,
    config: DecoderConfig,
}

impl DecoderWeights {
    /// Freshly initialised weights: uniform `±1/√d_in` linears with zero bias,
    /// unit layer norms and unit-variance tokens.
    pub fn random(cfg: DecoderConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        let dev = &Device::Cpu;
        for l in cfg.linear_layers() {
            let bound = 1.0 / (l.d_in as f32).sqrt();
            let w: Vec<f32> = (0..l.d_in * l.d_out).map(|_| rng.random_range(-bound..bound)).collect();
            tensors.insert(format!("{}.weight", l.path), Tensor::from_vec(w, (l.d_out, l.d_in), dev)?);
            tensors.insert(format!("{}.bias", l.path), Tensor::zeros(l.d_out, DType::F32, dev)?);
        }
        for (path, width) in cfg.norm_layers() {
            tensors.insert(format!("{path}.gamma"), Tensor::ones(width, DType::F32, dev)?);
            tensors.insert(format!("{path}.beta"), Tensor::zeros(width, DType::F32, dev)?);
        }
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| normal.sample(&mut rng)).collect() };
        tensors.insert("iou_token".into(), Tensor::from_vec(draw(cfg.d), (1, cfg.d), dev)?);
        tensors.insert(
            "mask_tokens".into(),
            Tensor::from_vec(draw(cfg.n_mask_tokens * cfg.d), (cfg.n_mask_tokens, cfg.d), dev)?,
        );
        tensors.insert("point_embed.positive".into(), Tensor::from_vec(draw(cfg.d), cfg.d, dev)?);
        tensors.insert("point_embed.negative".into(), Tensor::from_vec(draw(cfg.d), cfg.d, dev)?);
        let tensors = tensors
            .into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(dtype)?)))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, tensors, merged_lora: None })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.tensors.values().next().map(Tensor::dtype).unwrap_or(DType::F32)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Shape(format!("decoder has no parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::elem_count).sum()
    }

    pub fn merged_lora(&self) -> Option<&str> {
        self.merged_lora.as_deref()
    }

    pub(crate) fn with_replaced(&self, replaced: BTreeMap<String, Tensor>, merged_lora: Option<String>) -> Self {
        let mut tensors = self.tensors.clone();
        tensors.extend(replaced);
        Self { cfg: self.cfg, tensors, merged_lora }
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.to_dtype(dtype)?)))
            .collect::<Result<_>>()?;
        Ok(Self { cfg: self.cfg, tensors, merged_lora: self.merged_lora.clone() })
    }

    /// Wraps every parameter in a fresh [`Var`]; the returned weights share
    /// storage with the variables, so optimiser steps are visible through them.
    pub fn to_vars(&self) -> Result<(Self, Vec<(String, Var)>)> {
        let mut vars = Vec::new();
        let mut tensors = BTreeMap::new();
        for (k, v) in &self.tensors {
            let var = Var::from_tensor(&v.copy()?)?;
            tensors.insert(k.clone(), var.as_tensor().clone());
            vars.push((k.clone(), var));
        }
        Ok((Self { cfg: self.cfg, tensors, merged_lora: self.merged_lora.clone() }, vars))
    }

    /// Deep copy detached from any autograd graph.
    pub fn snapshot(&self) -> Result<Self> {
        let tensors =
            self.tensors.iter().map(|(k, v)| Ok((k.clone(), v.detach().copy()?))).collect::<Result<_>>()?;
        Ok(Self { cfg: self.cfg, tensors, merged_lora: self.merged_lora.clone() })
    }

    pub fn polarity_embeddings(&self) -> Result<PolarityEmbeddings> {
        Ok(PolarityEmbeddings {
            positive: self.get("point_embed.positive")?.clone(),
            negative: self.get("point_embed.negative")?.clone(),
        })
    }

    /// SHA-256 over names, shapes and little-endian f32 values, in name order.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.tensors {
            h.update(k.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                h.update(x.to_le_bytes());
            }
        }
        if let Some(m) = &self.merged_lora {
            h.update(m.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Serialises to the `SEGC1` container.
    pub fn to_segc_bytes(&self) -> Result<Vec<u8>> {
        if self.merged_lora.is_some() {
            return Err(Error::MergeState("refusing to save weights with a merged LoRA delta as a base".into()));
        }
        let arrays: Vec<_> = self.tensors.iter().map(|(k, v)| NamedArray { name: k, tensor: v }).collect();
        tensorfile::encode(SEGC_MAGIC, &SegcMeta { version: 1, config: self.cfg }, &arrays)
    }

    pub fn from_segc_bytes(bytes: &[u8]) -> Result<Self> {
        let decoded = tensorfile::decode::<SegcMeta>(SEGC_MAGIC, bytes)?;
        let cfg = decoded.meta.config;
        cfg.validate()?;
        let reference = Self::random(cfg, 0, DType::F32)?;
        let mut tensors = BTreeMap::new();
        for (i, (entry, _)) in decoded.arrays.iter().enumerate() {
            let expected = reference.get(&entry.name).map_err(|_| {
                Error::CorruptCheckpoint(format!("unexpected array `{}` for this config", entry.name))
            })?;
            if expected.dims() != entry.shape.as_slice() {
                return Err(Error::CorruptCheckpoint(format!(
                    "array `{}` has shape {:?}, config implies {:?}",
                    entry.name,
                    entry.shape,
                    expected.dims()
                )));
            }
            tensors.insert(entry.name.clone(), decoded.tensor(i, DType::F32)?);
        }
        if tensors.len() != reference.tensors.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} arrays present, config needs {}",
                tensors.len(),
                reference.tensors.len()
            )));
        }
        Ok(Self { cfg, tensors, merged_lora: None })
    }
}

/// Base weights pretrained on the synthetic `shapes` family for the tiny profile.
pub fn tiny_fixture() -> Result<DecoderWeights> {
    DecoderWeights::from_segc_bytes(include_bytes!("../../fixtures/base_tiny.segc"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        DecoderConfig::tiny().validate().unwrap();
        DecoderConfig::sam_scale().validate().unwrap();
        let bad = DecoderConfig { heads: 3, ..DecoderConfig::tiny() };
        assert!(bad.validate().is_err());
        let bad = DecoderConfig { upscale: 3, ..DecoderConfig::tiny() };
        assert!(bad.validate().is_err());
        assert_eq!(DecoderConfig::sam_scale().upscale_channels(), vec![64, 32]);
    }

    #[test]
    fn segc_round_trip() {
        let w = DecoderWeights::random(DecoderConfig::tiny(), 3, DType::F32).unwrap();
        let bytes = w.to_segc_bytes().unwrap();
        assert_eq!(&bytes[..5], SEGC_MAGIC);
        let back = DecoderWeights::from_segc_bytes(&bytes).unwrap();
        assert_eq!(back.content_hash().unwrap(), w.content_hash().unwrap());
        assert_eq!(back.to_segc_bytes().unwrap(), bytes);
    }

    #[test]
    fn fixture_loads() {
        let w = tiny_fixture().unwrap();
        assert_eq!(*w.config(), DecoderConfig::tiny());
    }
}
