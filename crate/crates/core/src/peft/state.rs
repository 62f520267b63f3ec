use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adapter::{AdapterBlock, AdapterInstance, CondMlp};
use super::config::EpeftConfig;
use super::ia3::{Ia3Branch, Ia3Scales};
use super::lora::LoraBranch;
use super::prompts::PromptBank;
use crate::error::{Error, Result};
use crate::segcore::{DecoderConfig, DecoderWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    Lora,
    Ia3,
    Prompts,
    Adapter,
    CondMlp,
}

/// Trainable parameter counts per technique.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub lora: usize,
    pub ia3: usize,
    pub prompts: usize,
    pub adapter: usize,
    pub cond_mlp: usize,
    pub total: usize,
}

impl ParamCounts {
    fn add(&mut self, t: Technique, n: usize) {
        match t {
            Technique::Lora => self.lora += n,
            Technique::Ia3 => self.ia3 += n,
            Technique::Prompts => self.prompts += n,
            Technique::Adapter => self.adapter += n,
            Technique::CondMlp => self.cond_mlp += n,
        }
        self.total += n;
    }

    pub fn get(&self, t: Technique) -> usize {
        match t {
            Technique::Lora => self.lora,
            Technique::Ia3 => self.ia3,
            Technique::Prompts => self.prompts,
            Technique::Adapter => self.adapter,
            Technique::CondMlp => self.cond_mlp,
        }
    }

    /// Closed-form counts for `cfg` attached to a decoder shaped like `decoder`.
    pub fn closed_form(cfg: &EpeftConfig, decoder: &DecoderConfig) -> Result<Self> {
        cfg.validate(decoder)?;
        let mut c = Self::default();
        let d = decoder.d;
        if cfg.lora {
            let targets = resolve_lora_targets(&cfg.lora_targets, decoder)?;
            for l in decoder.linear_layers().iter().filter(|l| targets.contains(&l.path)) {
                c.add(Technique::Lora, cfg.lora_rank * (l.d_in + l.d_out));
            }
        }
        if cfg.ia3 {
            for att in decoder.attention_paths() {
                if cfg.ia3_selects(att.block, decoder.depth) {
                    c.add(Technique::Ia3, 2 * att.inner);
                }
            }
            for b in 0..decoder.depth {
                if cfg.ia3_selects(Some(b), decoder.depth) {
                    c.add(Technique::Ia3, decoder.d_mlp);
                }
            }
        }
        if cfg.prompts {
            let layers = if cfg.deep_prompts { decoder.depth } else { 1 };
            c.add(Technique::Prompts, layers * (cfg.m_tok + cfg.m_img) * d + 2);
        }
        if cfg.adapter {
            let b = cfg.bottleneck_for(decoder);
            c.add(Technique::Adapter, decoder.depth * (2 * d * b + b + d));
        }
        if cfg.has_cond_mlp() {
            c.add(Technique::CondMlp, 2 * (d * d + d));
        }
        Ok(c)
    }
}

/// Linear-layer paths matched by any of `patterns`; every pattern must match something.
pub fn resolve_lora_targets(patterns: &[String], decoder: &DecoderConfig) -> Result<BTreeSet<String>> {
    let available: Vec<String> = decoder.linear_layers().into_iter().map(|l| l.path).collect();
    let mut out = BTreeSet::new();
    for p in patterns {
        let pat = glob::Pattern::new(p).map_err(|e| Error::InvalidConfig(format!("pattern `{p}`: {e}")))?;
        let hits: Vec<_> = available.iter().filter(|a| pat.matches(a)).cloned().collect();
        if hits.is_empty() {
            return Err(Error::TargetResolution { pattern: p.clone(), available: available.clone() });
        }
        out.extend(hits);
    }
    Ok(out)
}

/// All trainable deltas of one fine-tune, detached from the frozen base.
#[derive(Debug)]
pub struct EpeftState {
    config: EpeftConfig,
    decoder: DecoderConfig,
    fingerprint: String,
    lora: BTreeMap<String, LoraBranch>,
    ia3: BTreeMap<String, Ia3Branch>,
    prompts: Option<PromptBank>,
    adapter: Option<AdapterBlock>,
}

fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
}

struct Init {
    seed: u64,
    dtype: DType,
}

impl Init {
    fn var(&self, data: Vec<f32>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    fn fill(&self, value: f32, shape: &[usize]) -> Result<Var> {
        self.var(vec![value; shape.iter().product()], shape)
    }

    fn uniform(&self, name: &str, bound: f32, shape: &[usize]) -> Result<Var> {
        let mut rng = param_rng(self.seed, name);
        self.var((0..shape.iter().product()).map(|_| rng.random_range(-bound..bound)).collect(), shape)
    }

    fn normal(&self, name: &str, std: f32, shape: &[usize]) -> Result<Var> {
        let mut rng = param_rng(self.seed, name);
        let n = Normal::new(0.0, std).expect("finite std");
        self.var((0..shape.iter().product()).map(|_| n.sample(&mut rng)).collect(), shape)
    }
}

/// Builds a fresh state for `cfg` on `weights`; its forward equals the base forward.
pub fn attach(cfg: &EpeftConfig, weights: &DecoderWeights) -> Result<EpeftState> {
    let decoder = *weights.config();
    cfg.validate(&decoder)?;
    let init = Init { seed: cfg.seed, dtype: weights.dtype() };
    let d = decoder.d;

    let mut lora = BTreeMap::new();
    if cfg.lora {
        let targets = resolve_lora_targets(&cfg.lora_targets, &decoder)?;
        for l in decoder.linear_layers().into_iter().filter(|l| targets.contains(&l.path)) {
            let r = cfg.lora_rank;
            let bound = 1.0 / (l.d_in as f32).sqrt();
            let a = init.uniform(&format!("lora.{}.a", l.path), bound, &[r, l.d_in])?;
            let b = init.fill(0.0, &[l.d_out, r])?;
            lora.insert(
                l.path.clone(),
                LoraBranch { target_layer: l.path, rank: r, alpha: cfg.lora_alpha, a, b },
            );
        }
    }

    let mut ia3 = BTreeMap::new();
    if cfg.ia3 {
        for att in decoder.attention_paths() {
            if cfg.ia3_selects(att.block, decoder.depth) {
                let scales = Ia3Scales::Attention {
                    l_k: init.fill(1.0, &[att.inner])?,
                    l_v: init.fill(1.0, &[att.inner])?,
                };
                ia3.insert(att.path.clone(), Ia3Branch { target: att.path, target_block: att.block, scales });
            }
        }
        for (b, path) in decoder.mlp_paths().into_iter().enumerate() {
            if cfg.ia3_selects(Some(b), decoder.depth) {
                let scales = Ia3Scales::Mlp { l_ff: init.fill(1.0, &[decoder.d_mlp])? };
                ia3.insert(path.clone(), Ia3Branch { target: path, target_block: Some(b), scales });
            }
        }
    }

    let prompts = if cfg.prompts {
        let tokens = |name: &str, m: usize| -> Result<Option<Var>> {
            if m == 0 {
                return Ok(None);
            }
            let shape = if cfg.deep_prompts { vec![decoder.depth, m, d] } else { vec![m, d] };
            init.normal(name, 1.0, &shape).map(Some)
        };
        Some(PromptBank {
            m_tok: cfg.m_tok,
            m_img: cfg.m_img,
            deep: cfg.deep_prompts,
            tokens_tok: tokens("prompts.tokens_tok", cfg.m_tok)?,
            tokens_img: tokens("prompts.tokens_img", cfg.m_img)?,
            gate_tok: init.fill(0.0, &[1])?,
            gate_img: init.fill(0.0, &[1])?,
        })
    } else {
        None
    };

    let adapter = if cfg.adapter {
        let b = cfg.bottleneck_for(&decoder);
        let bound = 1.0 / (d as f32).sqrt();
        let instances = (0..decoder.depth)
            .map(|blk| {
                Ok(AdapterInstance {
                    block: blk,
                    w_down: init.uniform(&format!("adapter.{blk}.w_down"), bound, &[b, d])?,
                    b_down: init.fill(0.0, &[b])?,
                    w_up: init.fill(0.0, &[d, b])?,
                    b_up: init.fill(0.0, &[d])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cond_mlp = if cfg.has_cond_mlp() {
            Some(CondMlp {
                w0: init.uniform("adapter.cond.w0", bound, &[d, d])?,
                b0: init.fill(0.0, &[d])?,
                w1: init.fill(0.0, &[d, d])?,
                b1: init.fill(0.0, &[d])?,
            })
        } else {
            None
        };
        Some(AdapterBlock { bottleneck: b, instances, cond_mlp })
    } else {
        None
    };

    Ok(EpeftState { fingerprint: cfg.fingerprint(), config: cfg.clone(), decoder, lora, ia3, prompts, adapter })
}

impl EpeftState {
    pub fn config(&self) -> &EpeftConfig {
        &self.config
    }

    pub fn decoder_config(&self) -> &DecoderConfig {
        &self.decoder
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn dtype(&self) -> DType {
        self.named_params().first().map(|(_, _, v)| v.dtype()).unwrap_or(DType::F32)
    }

    pub fn lora_branches(&self) -> impl Iterator<Item = &LoraBranch> {
        self.lora.values()
    }

    pub fn ia3_branches(&self) -> impl Iterator<Item = &Ia3Branch> {
        self.ia3.values()
    }

    pub fn lora(&self, path: &str) -> Option<&LoraBranch> {
        self.lora.get(path)
    }

    pub fn ia3(&self, path: &str) -> Option<&Ia3Branch> {
        self.ia3.get(path)
    }

    pub fn prompts(&self) -> Option<&PromptBank> {
        self.prompts.as_ref()
    }

    pub fn adapter(&self) -> Option<&AdapterBlock> {
        self.adapter.as_ref()
    }

    pub fn check_decoder(&self, decoder: &DecoderConfig) -> Result<()> {
        if &self.decoder != decoder {
            return Err(Error::ConfigMismatch(format!(
                "state was attached to {:?}, decoder is {:?}",
                self.decoder, decoder
            )));
        }
        Ok(())
    }

    /// Every trainable array as `(name, technique, var)`, in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, Technique, &Var)> {
        let mut out = Vec::new();
        for (path, br) in &self.lora {
            out.push((format!("lora.{path}.a"), Technique::Lora, &br.a));
            out.push((format!("lora.{path}.b"), Technique::Lora, &br.b));
        }
        for (path, br) in &self.ia3 {
            for (suffix, v) in br.vars() {
                out.push((format!("ia3.{path}.{suffix}"), Technique::Ia3, v));
            }
        }
        if let Some(p) = &self.prompts {
            if let Some(v) = &p.tokens_tok {
                out.push(("prompts.tokens_tok".into(), Technique::Prompts, v));
            }
            if let Some(v) = &p.tokens_img {
                out.push(("prompts.tokens_img".into(), Technique::Prompts, v));
            }
            out.push(("prompts.gate_tok".into(), Technique::Prompts, &p.gate_tok));
            out.push(("prompts.gate_img".into(), Technique::Prompts, &p.gate_img));
        }
        if let Some(a) = &self.adapter {
            for inst in &a.instances {
                let b = inst.block;
                out.push((format!("adapter.{b}.w_down"), Technique::Adapter, &inst.w_down));
                out.push((format!("adapter.{b}.b_down"), Technique::Adapter, &inst.b_down));
                out.push((format!("adapter.{b}.w_up"), Technique::Adapter, &inst.w_up));
                out.push((format!("adapter.{b}.b_up"), Technique::Adapter, &inst.b_up));
            }
            if let Some(c) = &a.cond_mlp {
                out.push(("adapter.cond.w0".into(), Technique::CondMlp, &c.w0));
                out.push(("adapter.cond.b0".into(), Technique::CondMlp, &c.b0));
                out.push(("adapter.cond.w1".into(), Technique::CondMlp, &c.w1));
                out.push(("adapter.cond.b1".into(), Technique::CondMlp, &c.b1));
            }
        }
        out
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_params().into_iter().map(|(_, _, v)| v.clone()).collect()
    }

    /// Counts by enumerating the arrays actually held.
    pub fn count_trainable(&self) -> ParamCounts {
        let mut c = ParamCounts::default();
        for (_, t, v) in self.named_params() {
            c.add(t, v.elem_count());
        }
        c
    }

    /// Overwrites parameters by name; names absent from `values` are left alone.
    pub fn load_values(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, _, var) in self.named_params() {
            if let Some(t) = values.get(&name) {
                if t.dims() != var.dims() {
                    return Err(Error::Shape(format!(
                        "`{name}` expects {:?}, got {:?}",
                        var.dims(),
                        t.dims()
                    )));
                }
                var.set(&t.to_dtype(var.dtype())?)?;
            }
        }
        Ok(())
    }

    pub fn values(&self) -> Result<BTreeMap<String, Tensor>> {
        self.named_params().into_iter().map(|(n, _, v)| Ok((n, v.as_tensor().detach().copy()?))).collect()
    }

    /// Independent deep copy, safe to publish while the original keeps training.
    pub fn snapshot(&self) -> Result<Self> {
        let fresh = attach_like(self)?;
        fresh.load_values(&self.values()?)?;
        Ok(fresh)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let fresh = attach_shell(&self.config, &self.decoder, dtype)?;
        fresh.load_values(&self.values()?)?;
        Ok(fresh)
    }

    pub(crate) fn lora_digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t, v) in self.named_params() {
            if t == Technique::Lora {
                h.update(name.as_bytes());
                for x in v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                    h.update(x.to_le_bytes());
                }
            }
        }
        Ok(hex::encode(&h.finalize()[..8]))
    }
}

fn attach_like(state: &EpeftState) -> Result<EpeftState> {
    attach_shell(&state.config, &state.decoder, state.dtype())
}

/// A state with the right arrays and init values, built without base weights.
pub(crate) fn attach_shell(cfg: &EpeftConfig, decoder: &DecoderConfig, dtype: DType) -> Result<EpeftState> {
    let shell = DecoderWeights::random(*decoder, 0, dtype)?;
    attach(cfg, &shell)
}
