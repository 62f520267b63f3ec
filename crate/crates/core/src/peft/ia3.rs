//! Learned rescaling of attention keys, values and inner MLP activations.

use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

/// One attention (`l_k`, `l_v`) or one block MLP (`l_ff`). All vectors start at one.
#[derive(Debug)]
pub enum Ia3Scales {
    Attention { l_k: Var, l_v: Var },
    Mlp { l_ff: Var },
}

#[derive(Debug)]
pub struct Ia3Branch {
    /// Attention path (`blocks.0.cross_t2i`) or MLP path (`blocks.0.mlp`).
    pub target: String,
    /// Owning block; `None` for the final attention.
    pub target_block: Option<usize>,
    pub scales: Ia3Scales,
}

impl Ia3Branch {
    pub fn vars(&self) -> Vec<(&'static str, &Var)> {
        match &self.scales {
            Ia3Scales::Attention { l_k, l_v } => vec![("l_k", l_k), ("l_v", l_v)],
            Ia3Scales::Mlp { l_ff } => vec![("l_ff", l_ff)],
        }
    }
}

fn scale(x: &Tensor, l: &Tensor, what: &str) -> Result<Tensor> {
    let width = *x.dims().last().unwrap_or(&0);
    let len = l.dims1()?;
    if width != len {
        return Err(Error::Shape(format!("{what} width {width} does not match scale vector of length {len}")));
    }
    Ok(x.broadcast_mul(l)?)
}

/// Elementwise products `l_k⊙keys`, `l_v⊙values`, `l_ff⊙ff_inner` along the last axis.
pub fn ia3_forward(
    keys: &Tensor,
    values: &Tensor,
    ff_inner: &Tensor,
    l_k: &Tensor,
    l_v: &Tensor,
    l_ff: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    Ok((scale(keys, l_k, "keys")?, scale(values, l_v, "values")?, scale(ff_inner, l_ff, "ff_inner")?))
}

pub(crate) fn scale_keys_values(k: &Tensor, v: &Tensor, branch: &Ia3Branch) -> Result<(Tensor, Tensor)> {
    match &branch.scales {
        Ia3Scales::Attention { l_k, l_v } => Ok((scale(k, l_k, "keys")?, scale(v, l_v, "values")?)),
        Ia3Scales::Mlp { .. } => Err(Error::Shape(format!("`{}` is an MLP branch", branch.target))),
    }
}

pub(crate) fn scale_ff(h: &Tensor, branch: &Ia3Branch) -> Result<Tensor> {
    match &branch.scales {
        Ia3Scales::Mlp { l_ff } => scale(h, l_ff, "ff_inner"),
        Ia3Scales::Attention { .. } => Err(Error::Shape(format!("`{}` is an attention branch", branch.target))),
    }
}
