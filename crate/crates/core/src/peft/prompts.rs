//! Gated memory tokens prepended to the token stream and the image stream.

use std::ops::Range;

use candle_core::{Tensor, Var};

use super::adapter::AdapterBlock;
use crate::error::{Error, Result};

#[derive(Debug)]
pub struct PromptBank {
    pub m_tok: usize,
    pub m_img: usize,
    /// When set, token arrays carry one slice per two-way block.
    pub deep: bool,
    /// `m_tok × d`, or `depth × m_tok × d` when deep.
    pub tokens_tok: Option<Var>,
    pub tokens_img: Option<Var>,
    /// Multiplies the attention output drawn from injected token-stream keys. Zero at init.
    pub gate_tok: Var,
    /// Same for injected image-stream keys.
    pub gate_img: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Token,
    Image,
}

impl PromptBank {
    pub fn count(&self, stream: Stream) -> usize {
        match stream {
            Stream::Token => self.m_tok,
            Stream::Image => self.m_img,
        }
    }

    pub fn gate(&self, stream: Stream) -> &Tensor {
        match stream {
            Stream::Token => self.gate_tok.as_tensor(),
            Stream::Image => self.gate_img.as_tensor(),
        }
    }

    /// Memory tokens for `stream` at `layer` (`m × d`), before conditioning.
    pub fn layer_tokens(&self, stream: Stream, layer: usize) -> Result<Option<Tensor>> {
        let var = match stream {
            Stream::Token => &self.tokens_tok,
            Stream::Image => &self.tokens_img,
        };
        let Some(var) = var else { return Ok(None) };
        let t = var.as_tensor();
        Ok(Some(if self.deep { t.get(layer)? } else { t.clone() }))
    }

    /// Conditioned tokens for `stream` at `layer`.
    pub(crate) fn conditioned(&self, stream: Stream, layer: usize, cond: Option<&Tensor>) -> Result<Option<Tensor>> {
        let Some(t) = self.layer_tokens(stream, layer)? else { return Ok(None) };
        Ok(Some(match cond {
            Some(c) => t.broadcast_add(c)?,
            None => t,
        }))
    }
}

/// Rows occupied by injected memory tokens, to be dropped before the mask head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StripPlan {
    pub token_rows: Range<usize>,
    pub image_rows: Range<usize>,
}

/// Prepends the conditioned memory tokens to both streams.
///
/// The conditioning offset is `cond_mlp(mean_image_feature)` when `adapter`
/// carries a conditioning MLP, and zero otherwise.
pub fn inject_prompts(
    token_seq: &Tensor,
    image_seq: &Tensor,
    bank: &PromptBank,
    mean_image_feature: &Tensor,
    adapter: Option<&AdapterBlock>,
) -> Result<(Tensor, Tensor, StripPlan)> {
    let (_, d_tok) = token_seq.dims2()?;
    let (_, d_img) = image_seq.dims2()?;
    let d_mean = mean_image_feature.dims1()?;
    if d_tok != d_img || d_tok != d_mean {
        return Err(Error::Shape(format!(
            "stream widths differ: tokens {d_tok}, image {d_img}, mean feature {d_mean}"
        )));
    }
    let cond = match adapter.and_then(|a| a.cond_mlp.as_ref()) {
        Some(mlp) => Some(mlp.forward(mean_image_feature)?),
        None => None,
    };
    let prepend = |seq: &Tensor, stream: Stream| -> Result<Tensor> {
        match bank.conditioned(stream, 0, cond.as_ref())? {
            Some(mem) => {
                let (_, d_mem) = mem.dims2()?;
                if d_mem != d_tok {
                    return Err(Error::Shape(format!("memory tokens of width {d_mem} for streams of width {d_tok}")));
                }
                Ok(Tensor::cat(&[&mem, seq], 0)?)
            }
            None => Ok(seq.clone()),
        }
    };
    let tokens = prepend(token_seq, Stream::Token)?;
    let image = prepend(image_seq, Stream::Image)?;
    let plan = StripPlan { token_rows: 0..bank.m_tok, image_rows: 0..bank.m_img };
    Ok((tokens, image, plan))
}

/// Replaces the injected rows of `seq` with the bank's tokens for `layer`.
pub(crate) fn refresh_deep(
    seq: &Tensor,
    bank: &PromptBank,
    stream: Stream,
    layer: usize,
    cond: Option<&Tensor>,
) -> Result<Tensor> {
    let m = bank.count(stream);
    match bank.conditioned(stream, layer, cond)? {
        Some(mem) if m > 0 => {
            let n = seq.dim(0)?;
            Ok(Tensor::cat(&[&mem, &seq.narrow(0, m, n - m)?], 0)?)
        }
        _ => Ok(seq.clone()),
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device};

    use super::*;

    fn bank(m_tok: usize, m_img: usize, d: usize) -> PromptBank {
        let tokens = |m: usize| {
            (m > 0).then(|| Var::from_tensor(&Tensor::ones((m, d), DType::F32, &Device::Cpu).unwrap()).unwrap())
        };
        let zero = || Var::from_tensor(&Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap()).unwrap();
        PromptBank {
            m_tok,
            m_img,
            deep: false,
            tokens_tok: tokens(m_tok),
            tokens_img: tokens(m_img),
            gate_tok: zero(),
            gate_img: zero(),
        }
    }

    #[test]
    fn prepends_and_records_plan() {
        let tok = Tensor::zeros((6, 8), DType::F32, &Device::Cpu).unwrap();
        let img = Tensor::zeros((16, 8), DType::F32, &Device::Cpu).unwrap();
        let mean = Tensor::zeros(8, DType::F32, &Device::Cpu).unwrap();
        let (t, i, plan) = inject_prompts(&tok, &img, &bank(4, 2, 8), &mean, None).unwrap();
        assert_eq!(t.dims(), &[10, 8]);
        assert_eq!(i.dims(), &[18, 8]);
        assert_eq!(plan.token_rows, 0..4);
        assert_eq!(plan.image_rows, 0..2);
        assert_eq!(t.get(3).unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 8.0);
        assert_eq!(t.get(4).unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn empty_bank_is_passthrough() {
        let tok = Tensor::ones((6, 8), DType::F32, &Device::Cpu).unwrap();
        let img = Tensor::ones((16, 8), DType::F32, &Device::Cpu).unwrap();
        let mean = Tensor::zeros(8, DType::F32, &Device::Cpu).unwrap();
        let (t, i, plan) = inject_prompts(&tok, &img, &bank(0, 0, 8), &mean, None).unwrap();
        assert_eq!(t.dims(), tok.dims());
        assert_eq!(i.dims(), img.dims());
        assert!(plan.token_rows.is_empty() && plan.image_rows.is_empty());
    }

    #[test]
    fn width_mismatch() {
        let tok = Tensor::zeros((6, 8), DType::F32, &Device::Cpu).unwrap();
        let img = Tensor::zeros((16, 4), DType::F32, &Device::Cpu).unwrap();
        let mean = Tensor::zeros(8, DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(inject_prompts(&tok, &img, &bank(1, 1, 8), &mean, None), Err(Error::Shape(_))));
    }
}
