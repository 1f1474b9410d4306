//! Hybrid interpolation-convolution patch expanding.
//!
//! Tokens are layer-normed and widened by a linear layer, then upsampled 2x
//! twice: once by nearest-neighbour repetition and once by zero interleaving
//! (originals on even rows/columns). One convolution, shared by both
//! branches, maps each upsampled grid to the output width and the two
//! results are merged.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{map_to_tokens, tokens_to_map, Conv2d, LayerNorm, Linear};
use crate::params::{Bindings, Init};
use crate::tensor_ops::{self, ShuffleFactor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HicConfig {
    pub in_dim: usize,
    pub mid_dim: usize,
    pub out_dim: usize,
    pub kernel: usize,
    pub merge: MergeMode,
}

impl HicConfig {
    /// Interior decoder stage: `C -> 2C -> C/2`, 3x3 shared conv, mean merge.
    pub fn halving(in_dim: usize, merge: MergeMode) -> Self {
        HicConfig {
            in_dim,
            mid_dim: 2 * in_dim,
            out_dim: in_dim / 2,
            kernel: 3,
            merge,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.mid_dim == 0 || self.out_dim == 0 {
            return Err(Error::config("hic", "all widths must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("hic.kernel", "shared conv kernel must be odd"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Hic {
    pub cfg: HicConfig,
    pub norm: LayerNorm,
    pub expand: Linear,
    pub conv: Conv2d,
}

impl Hic {
    pub fn new(init: &mut Init, name: &str, cfg: HicConfig) -> Result<Self> {
        cfg.validate()?;
        init.scoped(name, |i| {
            Ok(Hic {
                cfg,
                norm: LayerNorm::new(i, "norm", cfg.in_dim)?,
                expand: Linear::new(i, "expand", cfg.in_dim, cfg.mid_dim, true)?,
                conv: Conv2d::new(i, "shared_conv", cfg.mid_dim, cfg.out_dim, cfg.kernel)?,
            })
        })
    }

    /// Upsampled branch outputs `(nearest, zero_interleaved)` before merging,
    /// both `[N, out_dim, 2H, 2W]`.
    pub fn branches(&self, p: &Bindings, tokens: &Var, h: usize, w: usize) -> Result<(Var, Var)> {
        let [_, l, c] = tokens.value().dims3()?;
        if l != h * w || c != self.cfg.in_dim {
            return Err(Error::invalid(format!(
                "hic: expected [N, {}, {}], got {:?}",
                h * w,
                self.cfg.in_dim,
                tokens.shape()
            )));
        }
        let t = self.expand.forward(p, &self.norm.forward(p, tokens)?)?;
        let map = tokens_to_map(&t, h, w)?;
        let key = tensor_ops::shape_key(map.shape());
        let near = map.gather(tensor_ops::memo("nearest2x", &key, || tensor_ops::nearest_upsample2x_map(map.shape()))?)?;
        let zero = map.gather(tensor_ops::memo("interleave2x", &key, || tensor_ops::zero_interleave2x_map(map.shape()))?)?;
        Ok((self.conv.forward(p, &near)?, self.conv.forward(p, &zero)?))
    }

    /// Tokens `[N, H*W, C]` to tokens `[N, 4*H*W, out_dim]`.
    pub fn forward(&self, p: &Bindings, tokens: &Var, h: usize, w: usize) -> Result<Var> {
        map_to_tokens(&self.forward_grid(p, tokens, h, w)?)
    }

    /// Same as [`Hic::forward`] but returns the `[N, out_dim, 2H, 2W]` map.
    pub fn forward_grid(&self, p: &Bindings, tokens: &Var, h: usize, w: usize) -> Result<Var> {
        let (a, b) = self.branches(p, tokens, h, w)?;
        let sum = a.add(&b)?;
        Ok(match self.cfg.merge {
            MergeMode::Mean => sum.scale(0.5),
            MergeMode::Sum => sum,
        })
    }

    /// Feature-map form: `[N, C, H, W]` to `[N, out_dim, 2H, 2W]`.
    pub fn forward_map(&self, p: &Bindings, x: &Var) -> Result<Var> {
        let [_, _, h, w] = x.value().dims4()?;
        self.forward_grid(p, &map_to_tokens(x)?, h, w)
    }
}

/// Learned linear expansion plus sub-pixel rearrangement (the conventional
/// patch expanding layer), used when HIC is switched off.
#[derive(Debug, Clone)]
pub struct LinearExpand {
    pub in_dim: usize,
    pub expand: Linear,
    pub norm: LayerNorm,
}

impl LinearExpand {
    pub fn new(init: &mut Init, name: &str, in_dim: usize) -> Result<Self> {
        if in_dim % 2 != 0 {
            return Err(Error::config("embed_dim", "expanding width must be even"));
        }
        init.scoped(name, |i| {
            Ok(LinearExpand {
                in_dim,
                expand: Linear::new(i, "expand", in_dim, 2 * in_dim, false)?,
                norm: LayerNorm::new(i, "norm", in_dim / 2)?,
            })
        })
    }

    pub fn forward(&self, p: &Bindings, tokens: &Var, h: usize, w: usize) -> Result<Var> {
        let t = self.expand.forward(p, tokens)?;
        let map = tokens_to_map(&t, h, w)?;
        let up = map.gather(Rc::new(tensor_ops::pixel_shuffle_map(
            map.shape(),
            ShuffleFactor::new(2)?,
        )?))?;
        self.norm.forward(p, &map_to_tokens(&up)?)
    }
}

/// Decoder upsampler: HIC or the linear fallback.
#[derive(Debug, Clone)]
pub enum Upsampler {
    Hic(Hic),
    Linear(LinearExpand),
}

impl Upsampler {
    pub fn forward(&self, p: &Bindings, tokens: &Var, h: usize, w: usize) -> Result<Var> {
        match self {
            Upsampler::Hic(m) => m.forward(p, tokens, h, w),
            Upsampler::Linear(m) => m.forward(p, tokens, h, w),
        }
    }
}
