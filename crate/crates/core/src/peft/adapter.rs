//! Residual bottleneck adapters and the image-conditioning MLP that feeds the prompt bank.

use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

/// `x + W_up·GELU(W_down·x + b_down) + b_up`, placed after a block's MLP.
#[derive(Debug)]
pub struct AdapterInstance {
    pub block: usize,
    /// `b × d`
    pub w_down: Var,
    pub b_down: Var,
    /// `d × b`, zero at init.
    pub w_up: Var,
    pub b_up: Var,
}

/// Two-layer `d → d → d` MLP with GELU, mapping the mean image feature to an
/// offset added to every memory token. The last layer starts at zero.
#[derive(Debug)]
pub struct CondMlp {
    pub w0: Var,
    pub b0: Var,
    pub w1: Var,
    pub b1: Var,
}

#[derive(Debug)]
pub struct AdapterBlock {
    pub bottleneck: usize,
    pub instances: Vec<AdapterInstance>,
    pub cond_mlp: Option<CondMlp>,
}

impl AdapterBlock {
    pub fn instance(&self, block: usize) -> Option<&AdapterInstance> {
        self.instances.iter().find(|i| i.block == block)
    }
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(x.matmul(&w.t()?)?.broadcast_add(b)?)
}

/// Applies the adapter to a vector `d` or a row batch `n × d`.
pub fn adapter_forward(x: &Tensor, blk: &AdapterInstance) -> Result<Tensor> {
    let (b, d) = blk.w_down.dims2()?;
    let width = *x.dims().last().unwrap_or(&0);
    if width != d || blk.w_up.dims2()? != (d, b) {
        return Err(Error::Shape(format!("adapter of width {d} applied to input of width {width}")));
    }
    let rows = if x.rank() == 1 { x.unsqueeze(0)? } else { x.clone() };
    let h = affine(&rows, blk.w_down.as_tensor(), blk.b_down.as_tensor())?.gelu_erf()?;
    let out = (&rows + affine(&h, blk.w_up.as_tensor(), blk.b_up.as_tensor())?)?;
    Ok(if x.rank() == 1 { out.squeeze(0)? } else { out })
}

impl CondMlp {
    pub fn forward(&self, mean_feature: &Tensor) -> Result<Tensor> {
        let x = mean_feature.unsqueeze(0)?;
        let h = affine(&x, self.w0.as_tensor(), self.b0.as_tensor())?.gelu_erf()?;
        Ok(affine(&h, self.w1.as_tensor(), self.b1.as_tensor())?.squeeze(0)?)
    }
}
