//! Low-rank weight deltas: `W' = W + (alpha / r)·B·A`.

use std::collections::BTreeMap;

use candle_core::{Tensor, Var};

use super::EpeftState;
use crate::error::{Error, Result};
use crate::segcore::DecoderWeights;

#[derive(Debug)]
pub struct LoraBranch {
    pub target_layer: String,
    pub rank: usize,
    pub alpha: f32,
    /// `r × d_in`, small random at init.
    pub a: Var,
    /// `d_out × r`, zero at init.
    pub b: Var,
}

impl LoraBranch {
    pub fn scale(&self) -> f64 {
        f64::from(self.alpha) / self.rank as f64
    }

    /// `(alpha / r)·B·A`, shaped like the target weight.
    pub fn delta_weight(&self) -> Result<Tensor> {
        Ok((self.b.as_tensor().matmul(self.a.as_tensor())? * self.scale())?)
    }

    /// Low-rank contribution for a batch of row vectors `x: n × d_in`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.matmul(&self.a.as_tensor().t()?)?;
        Ok((h.matmul(&self.b.as_tensor().t()?)? * self.scale())?)
    }
}

/// `W·x + (alpha/r)·B·(A·x)` for a single vector.
pub fn lora_forward(x: &Tensor, w: &Tensor, branch: &LoraBranch) -> Result<Tensor> {
    let d_in = x.dims1()?;
    let (d_out, w_in) = w.dims2()?;
    let (r, a_in) = branch.a.dims2()?;
    let (b_out, b_r) = branch.b.dims2()?;
    if w_in != d_in || a_in != d_in || b_out != d_out || b_r != r {
        return Err(Error::Shape(format!(
            "x[{d_in}], W[{d_out}x{w_in}], A[{r}x{a_in}], B[{b_out}x{b_r}] do not compose"
        )));
    }
    let x = x.unsqueeze(0)?;
    let base = x.matmul(&w.t()?)?;
    Ok((base + branch.apply(&x)?)?.squeeze(0)?)
}

fn merge_marker(state: &EpeftState) -> Result<String> {
    Ok(format!("{}:{}", state.fingerprint(), state.lora_digest()?))
}

/// Folds every LoRA delta into a copy of `weights`; the copy decodes without branches.
pub fn merge_lora(state: &EpeftState, weights: &DecoderWeights) -> Result<DecoderWeights> {
    if let Some(m) = weights.merged_lora() {
        return Err(Error::MergeState(format!("weights already carry merged LoRA `{m}`")));
    }
    state.check_decoder(weights.config())?;
    let mut replaced = BTreeMap::new();
    for branch in state.lora_branches() {
        let name = format!("{}.weight", branch.target_layer);
        let w = weights.get(&name)?;
        replaced.insert(name, (w + branch.delta_weight()?)?);
    }
    Ok(weights.with_replaced(replaced, Some(merge_marker(state)?)))
}

/// Inverse of [`merge_lora`] for the same state.
pub fn unmerge_lora(state: &EpeftState, merged: &DecoderWeights) -> Result<DecoderWeights> {
    let marker = merge_marker(state)?;
    match merged.merged_lora() {
        None => return Err(Error::MergeState("weights carry no merged LoRA".into())),
        Some(m) if m != marker => {
            return Err(Error::MergeState(format!("weights were merged with `{m}`, not `{marker}`")))
        }
        Some(_) => {}
    }
    let mut replaced = BTreeMap::new();
    for branch in state.lora_branches() {
        let name = format!("{}.weight", branch.target_layer);
        let w = merged.get(&name)?;
        replaced.insert(name, (w - branch.delta_weight()?)?);
    }
    Ok(merged.with_replaced(replaced, None))
}

#[cfg(test)]
mod tests {
    use candle_core::{Device, Tensor};

    use super::*;

    fn branch(a: &[f32], b: &[f32], r: usize, d_in: usize, d_out: usize, alpha: f32) -> LoraBranch {
        LoraBranch {
            target_layer: "t".into(),
            rank: r,
            alpha,
            a: Var::from_tensor(&Tensor::from_slice(a, (r, d_in), &Device::Cpu).unwrap()).unwrap(),
            b: Var::from_tensor(&Tensor::from_slice(b, (d_out, r), &Device::Cpu).unwrap()).unwrap(),
        }
    }

    #[test]
    fn hand_computed_example() {
        let w = Tensor::from_slice(&[1f32, 0.0, 0.0, 1.0], (2, 2), &Device::Cpu).unwrap();
        let br = branch(&[1.0, 1.0], &[2.0, 0.0], 1, 2, 2, 1.0);
        let x = Tensor::from_slice(&[1f32, 0.0], 2, &Device::Cpu).unwrap();
        assert_eq!(lora_forward(&x, &w, &br).unwrap().to_vec1::<f32>().unwrap(), vec![3.0, 0.0]);
    }

    #[test]
    fn zero_b_is_plain_linear() {
        let w = Tensor::from_slice(&[0.5f32, -1.0, 2.0, 0.25, 1.5, -0.75], (3, 2), &Device::Cpu).unwrap();
        let br = branch(&[0.3, -0.2, 0.1, 0.9], &[0.0; 6], 2, 2, 3, 4.0);
        let x = Tensor::from_slice(&[0.7f32, -1.3], 2, &Device::Cpu).unwrap();
        let plain = w.matmul(&x.unsqueeze(1).unwrap()).unwrap().squeeze(1).unwrap();
        assert_eq!(
            lora_forward(&x, &w, &br).unwrap().to_vec1::<f32>().unwrap(),
            plain.to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn merged_weight_matches_branch() {
        let w = Tensor::from_slice(&[0.5f32, -1.0, 2.0, 0.25, 1.5, -0.75], (3, 2), &Device::Cpu).unwrap();
        let br = branch(&[0.3, -0.2, 0.1, 0.9], &[0.4, -0.6, 1.1, 0.2, -0.3, 0.8], 2, 2, 3, 3.0);
        let x = Tensor::from_slice(&[0.7f32, -1.3], 2, &Device::Cpu).unwrap();
        let merged = (&w + br.delta_weight().unwrap()).unwrap();
        let via_merge = merged.matmul(&x.unsqueeze(1).unwrap()).unwrap().squeeze(1).unwrap();
        let via_branch = lora_forward(&x, &w, &br).unwrap();
        let diff = (via_merge - via_branch).unwrap().abs().unwrap().max(0).unwrap();
        assert!(diff.to_scalar::<f32>().unwrap() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let w = Tensor::zeros((3, 2), candle_core::DType::F32, &Device::Cpu).unwrap();
        let br = branch(&[0.0; 3], &[0.0; 3], 1, 3, 3, 1.0);
        let x = Tensor::zeros(2, candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(lora_forward(&x, &w, &br), Err(Error::Shape(_))));
    }
}
