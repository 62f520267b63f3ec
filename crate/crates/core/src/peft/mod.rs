//! Parameter-efficient deltas over the mask decoder and their ensemble.
//!
//! Four techniques are attached side by side and can be enabled independently:
//!
//! * LoRA branches on selected linear layers,
//! * IA3 rescaling vectors on attention keys/values and MLP activations,
//! * gated memory tokens prepended to both decoder streams,
//! * residual bottleneck adapters after each block MLP, plus an MLP that
//!   conditions the memory tokens on the mean image feature.
//!
//! Every technique is initialised so that a fresh state leaves the decoder
//! output unchanged: `B = 0`, unit IA3 vectors, zero gates, `W_up = 0`.

mod adapter;
mod checkpoint;
mod config;
mod ia3;
mod lora;
mod prompts;
mod state;

pub use adapter::{adapter_forward, AdapterBlock, AdapterInstance, CondMlp};
pub use checkpoint::{load_delta, load_delta_for, save_delta, EPEF_MAGIC};
pub use config::EpeftConfig;
pub use ia3::{ia3_forward, Ia3Branch, Ia3Scales};
pub use lora::{lora_forward, merge_lora, unmerge_lora, LoraBranch};
pub use prompts::{inject_prompts, PromptBank, StripPlan, Stream};
pub use state::{attach, resolve_lora_targets, EpeftState, ParamCounts, Technique};

pub(crate) use ia3::{scale_ff, scale_keys_values};
pub(crate) use prompts::refresh_deep;
