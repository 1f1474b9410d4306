//! Efficient global attention gates.
//!
//! * ESGA: a channel gate followed by a spatial gate. The channel gate is a
//!   per-position bottleneck MLP over channels; the spatial gate folds each
//!   2x2 neighbourhood into channels with an inverse pixel shuffle, runs a
//!   1x1 bottleneck, and unfolds back before the sigmoid.
//! * EPGA: the same two paths run in parallel on a skip concatenation, their
//!   logits averaged under one sigmoid, gating a linear fusion of the input.
//!
//! The skip concatenation is `2C` wide and every gate output is `C` wide, so
//! the fusion weight is `[2C, C]`.


use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Linear};
use crate::params::{Bindings, Init};
use crate::tensor_ops::{self, shape_key, ShuffleFactor};

/// Spatial folding factor used by both gates.
pub const GATE_SHUFFLE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EgaConfig {
    pub channels: usize,
    pub compression_ratio: usize,
    pub use_gelu: bool,
}

impl EgaConfig {
    pub fn new(channels: usize, compression_ratio: usize, use_gelu: bool) -> Result<Self> {
        let cfg = EgaConfig {
            channels,
            compression_ratio,
            use_gelu,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.compression_ratio == 0 {
            return Err(Error::config(
                "compression_ratio",
                "channels and compression ratio must be positive",
            ));
        }
        if self.channels % self.compression_ratio != 0 {
            return Err(Error::config(
                "compression_ratio",
                format!(
                    "{} channels are not divisible by r = {}",
                    self.channels, self.compression_ratio
                ),
            ));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.compression_ratio
    }

    /// `C*C/r + C/r + C/r*C + C + 4C*C/r + C/r + C/r*4C + 4C`.
    pub fn param_count(&self) -> usize {
        let (c, h) = (self.channels, self.hidden());
        let s2 = GATE_SHUFFLE * GATE_SHUFFLE;
        (c * h + h) + (h * c + c) + (s2 * c * h + h) + (h * s2 * c + s2 * c)
    }
}

fn shuffle() -> ShuffleFactor {
    ShuffleFactor::new(GATE_SHUFFLE).expect("non-zero")
}

fn act(x: Var, gelu: bool) -> Var {
    if gelu {
        x.gelu()
    } else {
        x
    }
}

fn check_channels(x: &Var, expected: usize, what: &str) -> Result<()> {
    let [_, c, h, w] = x.value().dims4()?;
    if c != expected {
        return Err(Error::invalid(format!(
            "{what}: expected {expected} channels, got {c}"
        )));
    }
    if h % GATE_SHUFFLE != 0 || w % GATE_SHUFFLE != 0 {
        return Err(Error::invalid(format!(
            "{what}: spatial size {h}x{w} is not divisible by {GATE_SHUFFLE}"
        )));
    }
    Ok(())
}

/// Channel MLP: `L2(act(L1(x)))` over the channel axis, without sigmoid.
fn channel_logits(p: &Bindings, l1: &Linear, l2: &Linear, x: &Var, gelu: bool) -> Result<Var> {
    let hidden = act(l1.forward_channels(p, x)?, gelu);
    l2.forward_channels(p, &hidden)
}

/// Spatial path: `PS(Conv2(act(Conv1(PS^-1(x)))))`, without sigmoid.
fn spatial_logits(p: &Bindings, c1: &Conv2d, c2: &Conv2d, x: &Var, gelu: bool) -> Result<Var> {
    let folded = x.gather(tensor_ops::memo("unshuffle2", &shape_key(x.shape()), || {
        tensor_ops::pixel_unshuffle_map(x.shape(), shuffle())
    })?)?;
    let hidden = act(c1.forward(p, &folded)?, gelu);
    let z = c2.forward(p, &hidden)?;
    z.gather(tensor_ops::memo("shuffle2", &shape_key(z.shape()), || {
        tensor_ops::pixel_shuffle_map(z.shape(), shuffle())
    })?)
}

/// Sequential channel-then-spatial gate.
#[derive(Debug, Clone)]
pub struct Esga {
    pub cfg: EgaConfig,
    pub l1: Linear,
    pub l2: Linear,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl Esga {
    pub fn new(init: &mut Init, name: &str, cfg: EgaConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, h) = (cfg.channels, cfg.hidden());
        let s2 = GATE_SHUFFLE * GATE_SHUFFLE;
        init.scoped(name, |i| {
            Ok(Esga {
                cfg,
                l1: Linear::new(i, "channel_fc1", c, h, true)?,
                l2: Linear::new(i, "channel_fc2", h, c, true)?,
                conv1: Conv2d::new_trunc_normal(i, "spatial_conv1", s2 * c, h, 1)?,
                conv2: Conv2d::new_trunc_normal(i, "spatial_conv2", h, s2 * c, 1)?,
            })
        })
    }

    /// `x * sigmoid(L2(act(L1(x))))` at every spatial position.
    pub fn channel_attention(&self, p: &Bindings, x: &Var) -> Result<Var> {
        let [_, c, _, _] = x.value().dims4()?;
        if c != self.cfg.channels {
            return Err(Error::invalid(format!(
                "channel_attention: expected {} channels, got {c}",
                self.cfg.channels
            )));
        }
        let gate = channel_logits(p, &self.l1, &self.l2, x, self.cfg.use_gelu)?.sigmoid();
        x.mul(&gate)
    }

    /// `x * sigmoid(PS(Conv2(act(Conv1(PS^-1(x))))))`.
    pub fn spatial_attention(&self, p: &Bindings, x: &Var) -> Result<Var> {
        check_channels(x, self.cfg.channels, "spatial_attention")?;
        let gate = spatial_logits(p, &self.conv1, &self.conv2, x, self.cfg.use_gelu)?.sigmoid();
        x.mul(&gate)
    }

    pub fn forward(&self, p: &Bindings, x: &Var) -> Result<Var> {
        check_channels(x, self.cfg.channels, "esga")?;
        let y = self.channel_attention(p, x)?;
        self.spatial_attention(p, &y)
    }

    pub fn param_count(&self) -> usize {
        self.cfg.param_count()
    }
}

/// Parallel gate over a `2C`-wide skip concatenation, emitting `C` channels.
#[derive(Debug, Clone)]
pub struct Epga {
    pub out_channels: usize,
    pub use_gelu: bool,
    pub l1: Linear,
    pub l2: Linear,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub fuse: Linear,
}

impl Epga {
    /// `out_channels` is `C`; the input is `2C` wide.
    pub fn new(
        init: &mut Init,
        name: &str,
        out_channels: usize,
        compression_ratio: usize,
        use_gelu: bool,
    ) -> Result<Self> {
        let c_cat = 2 * out_channels;
        if compression_ratio == 0 || c_cat % compression_ratio != 0 {
            return Err(Error::config(
                "compression_ratio",
                format!("skip width {c_cat} is not divisible by r = {compression_ratio}"),
            ));
        }
        let h = c_cat / compression_ratio;
        let s2 = GATE_SHUFFLE * GATE_SHUFFLE;
        init.scoped(name, |i| {
            Ok(Epga {
                out_channels,
                use_gelu,
                l1: Linear::new(i, "channel_fc1", c_cat, h, true)?,
                l2: Linear::new(i, "channel_fc2", h, out_channels, true)?,
                conv1: Conv2d::new_trunc_normal(i, "spatial_conv1", s2 * c_cat, h, 1)?,
                conv2: Conv2d::new_trunc_normal(i, "spatial_conv2", h, s2 * out_channels, 1)?,
                fuse: Linear::new(i, "fuse", c_cat, out_channels, true)?,
            })
        })
    }

    /// `sigmoid(0.5 * channel(x) + 0.5 * spatial(x)) * L(x)`.
    pub fn forward(&self, p: &Bindings, x_cat: &Var) -> Result<Var> {
        check_channels(x_cat, 2 * self.out_channels, "epga")?;
        let ch = channel_logits(p, &self.l1, &self.l2, x_cat, self.use_gelu)?;
        let sp = spatial_logits(p, &self.conv1, &self.conv2, x_cat, self.use_gelu)?;
        let gate = ch.scale(0.5).add(&sp.scale(0.5))?.sigmoid();
        gate.mul(&self.fuse.forward_channels(p, x_cat)?)
    }

    pub fn param_count(&self) -> usize {
        [&self.l1, &self.l2, &self.fuse]
            .iter()
            .map(|l| l.param_count())
            .sum::<usize>()
            + {
                let (c_cat, h, c) = (2 * self.out_channels, self.l1.out_dim, self.out_channels);
                let s2 = GATE_SHUFFLE * GATE_SHUFFLE;
                (s2 * c_cat * h + h) + (h * s2 * c + s2 * c)
            }
    }
}
