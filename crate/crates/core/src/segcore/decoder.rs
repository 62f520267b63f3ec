//! Two-way transformer mask decoder with hooks for every PEFT technique.
//!
//! Token stream: `[memory tokens; iou token; mask tokens; prompt tokens]`.
//! Image stream: `[memory tokens; h·w image cells]`.
//!
//! Each block runs token self-attention, token→image cross-attention, an MLP
//! on the tokens and image→token cross-attention, with a layer norm after each
//! residual. A final token→image attention precedes the heads: a hypernetwork
//! MLP per mask token projected onto the upscaled image embedding, and an IoU
//! head. Memory-token keys enter every attention through a separate softmax
//! whose output is scaled by the stream's gate, so a zero gate leaves the
//! original rows untouched.

use candle_core::{Tensor, D};

use super::encoder::FeatureGrid;
use super::mask::MaskLogits;
use super::prompt::grid_pe;
use super::weights::DecoderWeights;
use crate::error::{Error, Result};
use crate::peft::{self, EpeftState, Stream};

pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `log(1 + eˣ)` without overflow.
pub(crate) fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub(crate) fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(softplus(&x.neg()?)?.neg()?.exp()?)
}

struct Forward<'a> {
    w: &'a DecoderWeights,
    peft: Option<&'a EpeftState>,
}

impl Forward<'_> {
    fn linear(&self, path: &str, x: &Tensor) -> Result<Tensor> {
        let w = self.w.get(&format!("{path}.weight"))?;
        let b = self.w.get(&format!("{path}.bias"))?;
        let mut y = x.matmul(&w.t()?)?.broadcast_add(b)?;
        if self.w.merged_lora().is_none() {
            if let Some(branch) = self.peft.and_then(|p| p.lora(path)) {
                y = (y + branch.apply(x)?)?;
            }
        }
        Ok(y)
    }

    fn layer_norm(&self, path: &str, x: &Tensor) -> Result<Tensor> {
        let gamma = self.w.get(&format!("{path}.gamma"))?;
        let beta = self.w.get(&format!("{path}.beta"))?;
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
    }

    fn heads(&self) -> usize {
        self.w.config().heads
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c) = x.dims2()?;
        let h = self.heads();
        Ok(x.reshape((n, h, c / h))?.transpose(0, 1)?.contiguous()?)
    }

    /// Multi-head attention. The first `injected` keys are memory tokens whose
    /// contribution is computed separately and multiplied by `gate`.
    fn attention(
        &self,
        path: &str,
        q_in: &Tensor,
        k_in: &Tensor,
        v_in: &Tensor,
        injected: usize,
        gate: Option<&Tensor>,
    ) -> Result<Tensor> {
        let q = self.linear(&format!("{path}.q_proj"), q_in)?;
        let mut k = self.linear(&format!("{path}.k_proj"), k_in)?;
        let mut v = self.linear(&format!("{path}.v_proj"), v_in)?;
        if let Some(branch) = self.peft.and_then(|p| p.ia3(path)) {
            (k, v) = peft::scale_keys_values(&k, &v, branch)?;
        }
        let (n_q, inner) = q.dims2()?;
        let (q, k, v) = (self.split_heads(&q)?, self.split_heads(&k)?, self.split_heads(&v)?);
        let scale = 1.0 / ((inner / self.heads()) as f64).sqrt();
        let sdpa = |k: &Tensor, v: &Tensor| -> Result<Tensor> {
            let scores = (q.matmul(&k.t()?)? * scale)?;
            Ok(softmax_last(&scores)?.matmul(v)?)
        };
        let out = match gate {
            Some(g) if injected > 0 => {
                let n_k = k.dim(1)?;
                let orig = sdpa(&k.narrow(1, injected, n_k - injected)?, &v.narrow(1, injected, n_k - injected)?)?;
                let mem = sdpa(&k.narrow(1, 0, injected)?, &v.narrow(1, 0, injected)?)?;
                (orig + mem.broadcast_mul(g)?)?
            }
            _ => sdpa(&k, &v)?,
        };
        let out = out.transpose(0, 1)?.contiguous()?.reshape((n_q, inner))?;
        self.linear(&format!("{path}.out_proj"), &out)
    }

    fn mlp(&self, block: usize, x: &Tensor) -> Result<Tensor> {
        let path = format!("blocks.{block}.mlp");
        let mut h = self.linear(&format!("{path}.lin1"), x)?.gelu_erf()?;
        if let Some(branch) = self.peft.and_then(|p| p.ia3(&path)) {
            h = peft::scale_ff(&h, branch)?;
        }
        self.linear(&format!("{path}.lin2"), &h)
    }

    fn head_mlp(&self, path: &str, x: &Tensor) -> Result<Tensor> {
        let h = self.linear(&format!("{path}.lin0"), x)?.gelu_erf()?;
        let h = self.linear(&format!("{path}.lin1"), &h)?.gelu_erf()?;
        self.linear(&format!("{path}.lin2"), &h)
    }
}

fn check_finite(t: &Tensor, layer: usize) -> Result<()> {
    let s = t.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical { layer })
    }
}

/// Runs the decoder on one image with an `n × d` prompt-token sequence.
///
/// Layer indices reported by [`Error::Numerical`] are block numbers, then
/// `depth` for the final attention and `depth + 1` for the heads.
pub fn decode(
    grid: &FeatureGrid,
    prompts: &Tensor,
    weights: &DecoderWeights,
    peft: Option<&EpeftState>,
) -> Result<MaskLogits> {
    let cfg = *weights.config();
    if grid.dim() != cfg.d_feature {
        return Err(Error::Shape(format!(
            "feature width {} does not match decoder input width {}",
            grid.dim(),
            cfg.d_feature
        )));
    }
    let (_, p_width) = prompts.dims2()?;
    if p_width != cfg.d {
        return Err(Error::Shape(format!("prompt tokens have width {p_width}, decoder expects {}", cfg.d)));
    }
    if let Some(state) = peft {
        state.check_decoder(&cfg)?;
    }
    let dtype = weights.dtype();
    let f = Forward { w: weights, peft };
    let (h, w) = (grid.height(), grid.width());

    let image = f.linear("input_proj", &grid.to_tensor(dtype)?)?;
    let image_pe = grid_pe(h, w, cfg.d, dtype)?;
    let tokens = Tensor::cat(&[weights.get("iou_token")?, weights.get("mask_tokens")?, &prompts.to_dtype(dtype)?], 0)?;

    let bank = peft.and_then(EpeftState::prompts);
    let adapter = peft.and_then(EpeftState::adapter);
    let mean_image = image.mean(0)?;
    let cond = match adapter.and_then(|a| a.cond_mlp.as_ref()) {
        Some(mlp) if bank.is_some() => Some(mlp.forward(&mean_image)?),
        _ => None,
    };
    let (mut queries, mut keys, m_tok, m_img) = match bank {
        Some(b) => {
            let (t, i, plan) = peft::inject_prompts(&tokens, &image, b, &mean_image, adapter)?;
            (t, i, plan.token_rows.len(), plan.image_rows.len())
        }
        None => (tokens, image, 0, 0),
    };
    let query_pe = queries.clone();
    let key_pe = if m_img > 0 {
        Tensor::cat(&[&Tensor::zeros((m_img, cfg.d), dtype, image_pe.device())?, &image_pe], 0)?
    } else {
        image_pe
    };
    let gate_tok = bank.filter(|_| m_tok > 0).map(|b| b.gate(Stream::Token));
    let gate_img = bank.filter(|_| m_img > 0).map(|b| b.gate(Stream::Image));

    for blk in 0..cfg.depth {
        if let Some(b) = bank.filter(|b| b.deep && blk > 0) {
            queries = peft::refresh_deep(&queries, b, Stream::Token, blk, cond.as_ref())?;
            keys = peft::refresh_deep(&keys, b, Stream::Image, blk, cond.as_ref())?;
        }
        let p = format!("blocks.{blk}");
        queries = if blk == 0 {
            f.attention(&format!("{p}.self_attn"), &queries, &queries, &queries, m_tok, gate_tok)?
        } else {
            let q = (&queries + &query_pe)?;
            (&queries + f.attention(&format!("{p}.self_attn"), &q, &q, &queries, m_tok, gate_tok)?)?
        };
        queries = f.layer_norm(&format!("{p}.norm1"), &queries)?;

        let q = (&queries + &query_pe)?;
        let k = (&keys + &key_pe)?;
        queries = (&queries + f.attention(&format!("{p}.cross_t2i"), &q, &k, &keys, m_img, gate_img)?)?;
        queries = f.layer_norm(&format!("{p}.norm2"), &queries)?;

        queries = (&queries + f.mlp(blk, &queries)?)?;
        if let Some(inst) = adapter.and_then(|a| a.instance(blk)) {
            queries = peft::adapter_forward(&queries, inst)?;
        }
        queries = f.layer_norm(&format!("{p}.norm3"), &queries)?;

        let q = (&queries + &query_pe)?;
        let k = (&keys + &key_pe)?;
        keys = (&keys + f.attention(&format!("{p}.cross_i2t"), &k, &q, &queries, m_tok, gate_tok)?)?;
        keys = f.layer_norm(&format!("{p}.norm4"), &keys)?;

        check_finite(&queries, blk)?;
        check_finite(&keys, blk)?;
    }

    let q = (&queries + &query_pe)?;
    let k = (&keys + &key_pe)?;
    queries = (&queries + f.attention("final_attn", &q, &k, &keys, m_img, gate_img)?)?;
    queries = f.layer_norm("norm_final", &queries)?;
    check_finite(&queries, cfg.depth)?;

    // Strip memory rows before the heads.
    let iou_token = queries.narrow(0, m_tok, 1)?;
    let mask_tokens = queries.narrow(0, m_tok + 1, cfg.n_mask_tokens)?;
    let n_img = keys.dim(0)?;
    let mut up = keys.narrow(0, m_img, n_img - m_img)?;

    let (mut uh, mut uw) = (h, w);
    let chans = cfg.upscale_channels();
    for (s, c) in chans.iter().enumerate() {
        let y = f.linear(&format!("upscale.{s}.proj"), &up)?;
        let y = y.reshape((uh, uw, 2, 2, *c))?.permute((0, 2, 1, 3, 4))?.contiguous()?;
        uh *= 2;
        uw *= 2;
        let mut y = y.reshape((uh * uw, *c))?;
        if s + 1 < chans.len() {
            y = f.layer_norm(&format!("upscale.{s}.norm"), &y)?;
        }
        up = y.gelu_erf()?;
    }

    let hyper = (0..cfg.n_mask_tokens)
        .map(|j| f.head_mlp(&format!("hyper.{j}"), &mask_tokens.narrow(0, j, 1)?))
        .collect::<Result<Vec<_>>>()?;
    let hyper = Tensor::cat(&hyper, 0)?;
    let logits = hyper.matmul(&up.t()?)?.reshape((cfg.n_mask_tokens, uh, uw))?;
    let iou = sigmoid(&f.head_mlp("iou_head", &iou_token)?)?.squeeze(0)?;
    check_finite(&logits, cfg.depth + 1)?;
    Ok(MaskLogits::new(logits, iou))
}
