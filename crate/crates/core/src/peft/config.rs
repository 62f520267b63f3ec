use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::segcore::DecoderConfig;

/// Which techniques to attach and how.
///
/// Config files are TOML documents whose keys are the field names below; every
/// key is optional and falls back to [`EpeftConfig::default`] (the full ensemble).
///
/// ```toml
/// lora = true
/// ia3 = true
/// prompts = true
/// adapter = true
/// lora_rank = 4
/// lora_alpha = 4.0
/// lora_targets = ["*.q_proj", "*.v_proj", "blocks.*.mlp.lin1", "blocks.*.mlp.lin2"]
/// # ia3_blocks = [0, 1, 2]   # omitted: every block plus the final attention (index = depth)
/// m_tok = 8
/// m_img = 8
/// deep_prompts = false
/// # adapter_bottleneck = 4   # omitted: d / 8
/// seed = 0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpeftConfig {
    pub lora: bool,
    pub ia3: bool,
    pub prompts: bool,
    pub adapter: bool,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    /// Glob patterns over linear-layer paths such as `blocks.0.self_attn.q_proj`.
    pub lora_targets: Vec<String>,
    /// Blocks receiving IA3 vectors; index `depth` is the final attention.
    pub ia3_blocks: Option<Vec<usize>>,
    pub m_tok: usize,
    pub m_img: usize,
    /// Fresh memory tokens at every block instead of once at the decoder input.
    pub deep_prompts: bool,
    pub adapter_bottleneck: Option<usize>,
    /// Seed for the random parts of the initialisation.
    pub seed: u64,
}

impl Default for EpeftConfig {
    fn default() -> Self {
        Self {
            lora: true,
            ia3: true,
            prompts: true,
            adapter: true,
            lora_rank: 4,
            lora_alpha: 4.0,
            lora_targets: ["*.q_proj", "*.v_proj", "blocks.*.mlp.lin1", "blocks.*.mlp.lin2"]
                .map(String::from)
                .to_vec(),
            ia3_blocks: None,
            m_tok: 8,
            m_img: 8,
            deep_prompts: false,
            adapter_bottleneck: None,
            seed: 0,
        }
    }
}

impl EpeftConfig {
    pub fn ensemble() -> Self {
        Self::default()
    }

    fn only(lora: bool, ia3: bool, prompts: bool, adapter: bool) -> Self {
        Self { lora, ia3, prompts, adapter, ..Self::default() }
    }

    pub fn lora_only() -> Self {
        Self::only(true, false, false, false)
    }

    pub fn ia3_only() -> Self {
        Self::only(false, true, false, false)
    }

    pub fn prompts_only() -> Self {
        Self::only(false, false, true, false)
    }

    pub fn adapter_only() -> Self {
        Self::only(false, false, false, true)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn bottleneck_for(&self, decoder: &DecoderConfig) -> usize {
        self.adapter_bottleneck.unwrap_or((decoder.d / 8).max(1))
    }

    /// The conditioning MLP exists only when there are prompt tokens for it to feed.
    pub fn has_cond_mlp(&self) -> bool {
        self.adapter && self.prompts
    }

    pub fn ia3_selects(&self, block: Option<usize>, depth: usize) -> bool {
        let index = block.unwrap_or(depth);
        self.ia3_blocks.as_ref().is_none_or(|b| b.contains(&index))
    }

    /// Checks everything that does not need the layer inventory.
    pub fn validate(&self, decoder: &DecoderConfig) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lora || self.ia3 || self.prompts || self.adapter) {
            return bad("at least one technique must be enabled".into());
        }
        if self.lora {
            if self.lora_rank == 0 {
                return bad("lora_rank must be at least 1".into());
            }
            if !self.lora_alpha.is_finite() {
                return bad("lora_alpha must be finite".into());
            }
            if self.lora_targets.is_empty() {
                return bad("lora_targets is empty".into());
            }
        }
        if self.ia3 {
            if let Some(blocks) = &self.ia3_blocks {
                if blocks.is_empty() {
                    return bad("ia3_blocks is empty".into());
                }
                if let Some(b) = blocks.iter().find(|b| **b > decoder.depth) {
                    return bad(format!("ia3 block {b} exceeds depth {}", decoder.depth));
                }
            }
        }
        if self.adapter {
            let b = self.bottleneck_for(decoder);
            if b == 0 || b >= decoder.d {
                return bad(format!("adapter bottleneck {b} must be in 1..{}", decoder.d));
            }
        }
        Ok(())
    }

    /// Stable hex digest of the serialised config.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(&Sha256::digest(&bytes)[..16])
    }
}
