//! Learnable building blocks shared by the network modules.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::Result;
use crate::params::{Bindings, Init, ParamId};
use crate::tensor_ops;

/// Weight init std for linear layers and attention tables.
pub const TRUNC_NORMAL_STD: f64 = 0.02;

/// Affine map with weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        init.scoped(name, |i| {
            let weight = i.trunc_normal("weight", &[in_dim, out_dim], TRUNC_NORMAL_STD)?;
            let bias = if bias { Some(i.zeros("bias", &[out_dim])?) } else { None };
            Ok(Linear {
                weight,
                bias,
                in_dim,
                out_dim,
            })
        })
    }

    /// Applies the map over the last axis.
    pub fn forward(&self, p: &Bindings, x: &Var) -> Result<Var> {
        let b = self.bias.map(|b| p.get(b));
        x.linear(&p.get(self.weight), b.as_ref())
    }

    /// Applies the map over the channel axis of `[N, C, H, W]`.
    pub fn forward_channels(&self, p: &Bindings, x: &Var) -> Result<Var> {
        let w = p.get(self.weight);
        let wt = w
            .gather(Rc::new(tensor_ops::permute_map(w.shape(), &[1, 0])?))?
            .reshape(&[self.out_dim, self.in_dim, 1, 1])?;
        let b = self.bias.map(|b| p.get(b));
        x.conv2d(&wt, b.as_ref(), 0)
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// Square-kernel stride-1 convolution, weight `[out, in, k, k]`, "same"
/// zero padding for odd `k`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(init: &mut Init, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        init.scoped(name, |i| {
            let weight =
                i.kaiming_uniform("weight", &[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel)?;
            let bias = Some(i.zeros("bias", &[out_ch])?);
            Ok(Conv2d { weight, bias, kernel })
        })
    }

    /// A conv whose weight is drawn from a truncated normal (1x1 gate convs).
    pub fn new_trunc_normal(
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Result<Self> {
        init.scoped(name, |i| {
            let weight = i.trunc_normal("weight", &[out_ch, in_ch, kernel, kernel], TRUNC_NORMAL_STD)?;
            let bias = Some(i.zeros("bias", &[out_ch])?);
            Ok(Conv2d { weight, bias, kernel })
        })
    }

    pub fn new_zeros(init: &mut Init, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        init.scoped(name, |i| {
            let weight = i.zeros("weight", &[out_ch, in_ch, kernel, kernel])?;
            let bias = Some(i.zeros("bias", &[out_ch])?);
            Ok(Conv2d { weight, bias, kernel })
        })
    }

    pub fn forward(&self, p: &Bindings, x: &Var) -> Result<Var> {
        let b = self.bias.map(|b| p.get(b));
        x.conv2d(&p.get(self.weight), b.as_ref(), self.kernel / 2)
    }
}

/// Layer norm over the last axis with learnable affine parameters.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        init.scoped(name, |i| {
            Ok(LayerNorm {
                gamma: i.ones("weight", &[dim])?,
                beta: i.zeros("bias", &[dim])?,
            })
        })
    }

    pub fn forward(&self, p: &Bindings, x: &Var) -> Result<Var> {
        x.layer_norm(&p.get(self.gamma), &p.get(self.beta))
    }
}

/// `[N, C, H, W]` to token grid `[N, H*W, C]`.
pub fn map_to_tokens(x: &Var) -> Result<Var> {
    let [n, c, h, w] = x.value().dims4()?;
    x.reshape(&[n, c, h * w])?
        .gather(tensor_ops::memo("to_tokens", &[n as isize, c as isize, (h * w) as isize], || {
            tensor_ops::permute_map(&[n, c, h * w], &[0, 2, 1])
        })?)
}

/// Token grid `[N, H*W, C]` to `[N, C, H, W]`.
pub fn tokens_to_map(x: &Var, h: usize, w: usize) -> Result<Var> {
    let [n, l, c] = x.value().dims3()?;
    if l != h * w {
        return Err(crate::Error::InvalidArgument(format!(
            "{l} tokens cannot form a {h}x{w} grid"
        )));
    }
    x.gather(tensor_ops::memo("to_map", &[n as isize, l as isize, c as isize], || {
        tensor_ops::permute_map(&[n, l, c], &[0, 2, 1])
    })?)?
        .reshape(&[n, c, h, w])
}
