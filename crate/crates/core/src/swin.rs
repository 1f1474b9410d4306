//! Shifted-window transformer blocks with an ESGA feed-forward, plus the
//! patch embedding and patch merging layers of the hierarchical encoder.

use std::rc::Rc;

use crate::attention::{EgaConfig, Esga};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{map_to_tokens, tokens_to_map, Conv2d, LayerNorm, Linear, TRUNC_NORMAL_STD};
use crate::params::{Bindings, Init, ParamId};
use crate::tensor::Tensor;
use crate::tensor_ops::{self, IndexMap, ShuffleFactor};

/// Logit added between tokens that must not attend to each other.
pub const MASK_LOGIT: f64 = -100.0;

/// Width multiplier of the plain MLP used when ESGA is disabled.
pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwinBlockConfig {
    pub dim: usize,
    pub num_heads: usize,
    pub window: usize,
    pub shift: usize,
    pub ega: EgaConfig,
    pub use_esga: bool,
}

impl SwinBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.dim % self.num_heads != 0 {
            return Err(Error::config(
                "heads",
                format!("dim {} is not divisible by {} heads", self.dim, self.num_heads),
            ));
        }
        if self.window == 0 {
            return Err(Error::config("window_size", "window must be positive"));
        }
        if self.shift != 0 && self.shift != self.window / 2 {
            return Err(Error::config("shift", "shift must be 0 or window/2"));
        }
        if self.ega.channels != self.dim {
            return Err(Error::config("ega", "gate width must equal block dim"));
        }
        Ok(())
    }
}

/// Plain two-layer GELU MLP (the standard transformer feed-forward).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        init.scoped(name, |i| {
            Ok(Mlp {
                fc1: Linear::new(i, "fc1", dim, hidden, true)?,
                fc2: Linear::new(i, "fc2", hidden, dim, true)?,
            })
        })
    }

    pub fn forward(&self, p: &Bindings, x: &Var) -> Result<Var> {
        self.fc2.forward(p, &self.fc1.forward(p, x)?.gelu())
    }
}

#[derive(Debug, Clone)]
pub enum FeedForward {
    Esga(Esga),
    Mlp(Mlp),
}

/// Index into the `(2w-1)^2` relative-position table for each token pair of
/// a `w x w` window, row-major over `(query, key)`.
pub fn relative_position_index(w: usize) -> Vec<usize> {
    let l = w * w;
    let mut idx = Vec::with_capacity(l * l);
    for q in 0..l {
        let (qy, qx) = (q / w, q % w);
        for k in 0..l {
            let (ky, kx) = (k / w, k % w);
            let dy = qy + w - 1 - ky;
            let dx = qx + w - 1 - kx;
            idx.push(dy * (2 * w - 1) + dx);
        }
    }
    idx
}

/// Additive attention mask `[nW, w*w, w*w]` for a cyclically shifted
/// `h x w` grid: 0 within a region, [`MASK_LOGIT`] across regions.
pub fn shifted_window_mask(h: usize, w: usize, ws: usize, shift: usize) -> Result<Tensor> {
    if ws == 0 || h % ws != 0 || w % ws != 0 {
        return Err(Error::invalid(format!(
            "window {ws} does not divide {h}x{w}"
        )));
    }
    let band = |v: usize, len: usize| -> usize {
        if v < len - ws {
            0
        } else if v < len - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / ws, w / ws);
    let l = ws * ws;
    let mut data = Vec::with_capacity(nh * nw * l * l);
    for wy in 0..nh {
        for wx in 0..nw {
            let label = |t: usize| {
                let (y, x) = (wy * ws + t / ws, wx * ws + t % ws);
                band(y, h) * 3 + band(x, w)
            };
            for q in 0..l {
                for k in 0..l {
                    data.push(if label(q) == label(k) { 0.0 } else { MASK_LOGIT });
                }
            }
        }
    }
    Tensor::new(&[nh * nw, l, l], data)
}

/// `[B, L, 3*dim]` to `[B*heads, L, hd]` for q (part 0), k (1) or v (2).
fn split_heads_map(b: usize, l: usize, dim: usize, heads: usize, part: usize) -> IndexMap {
    let hd = dim / heads;
    let mut src = Vec::with_capacity(b * l * dim);
    for bi in 0..b {
        for h in 0..heads {
            for t in 0..l {
                let base = (bi * l + t) * 3 * dim + part * dim + h * hd;
                src.extend(base..base + hd);
            }
        }
    }
    IndexMap {
        in_shape: vec![b, l, 3 * dim],
        out_shape: vec![b * heads, l, hd],
        src,
    }
}

/// `[B*heads, L, hd]` back to `[B, L, heads*hd]`.
fn merge_heads_map(b: usize, l: usize, heads: usize, hd: usize) -> IndexMap {
    let mut src = Vec::with_capacity(b * l * heads * hd);
    for bi in 0..b {
        for t in 0..l {
            for h in 0..heads {
                let base = ((bi * heads + h) * l + t) * hd;
                src.extend(base..base + hd);
            }
        }
    }
    IndexMap {
        in_shape: vec![b * heads, l, hd],
        out_shape: vec![b, l, heads * hd],
        src,
    }
}

/// Pre-norm shifted-window block: `x + WMSA(LN(x))`, then `x + ESGA(LN(x))`.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub cfg: SwinBlockConfig,
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub rel_bias: ParamId,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl SwinBlock {
    pub fn new(init: &mut Init, name: &str, cfg: SwinBlockConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let table = (2 * cfg.window - 1) * (2 * cfg.window - 1);
        init.scoped(name, |i| {
            let norm1 = LayerNorm::new(i, "norm1", d)?;
            let (qkv, proj, rel_bias) = i.scoped("attn", |i| {
                Ok((
                    Linear::new(i, "qkv", d, 3 * d, true)?,
                    Linear::new(i, "proj", d, d, true)?,
                    i.trunc_normal(
                        "relative_position_bias_table",
                        &[table, cfg.num_heads],
                        TRUNC_NORMAL_STD,
                    )?,
                ))
            })?;
            let norm2 = LayerNorm::new(i, "norm2", d)?;
            let ffn = if cfg.use_esga {
                FeedForward::Esga(Esga::new(i, "esga", cfg.ega)?)
            } else {
                FeedForward::Mlp(Mlp::new(i, "mlp", d, MLP_RATIO * d)?)
            };
            Ok(SwinBlock {
                cfg,
                norm1,
                qkv,
                proj,
                rel_bias,
                norm2,
                ffn,
            })
        })
    }

    /// Window size and shift actually used on an `h x w` grid: a grid no
    /// larger than the window is attended as a single unshifted window.
    pub fn effective_window(&self, h: usize, w: usize) -> (usize, usize) {
        if h.min(w) <= self.cfg.window {
            (h.min(w), 0)
        } else {
            (self.cfg.window, self.cfg.shift)
        }
    }

    /// Relative position bias `[heads, L, L]` for window `ws <= cfg.window`.
    fn position_bias(&self, p: &Bindings, ws: usize) -> Result<Var> {
        let full = self.cfg.window;
        let heads = self.cfg.num_heads;
        let rel = relative_position_index(ws);
        let l = ws * ws;
        // Smaller windows index the centre of the full table.
        let offset = full - ws;
        let mut src = Vec::with_capacity(heads * l * l);
        for h in 0..heads {
            for &r in &rel {
                let (dy, dx) = (r / (2 * ws - 1) + offset, r % (2 * ws - 1) + offset);
                src.push((dy * (2 * full - 1) + dx) * heads + h);
            }
        }
        let table = p.get(self.rel_bias);
        table.gather(Rc::new(IndexMap {
            in_shape: table.shape().to_vec(),
            out_shape: vec![heads, l, l],
            src,
        }))
    }

    /// Multi-head attention inside each window of `[B_w, L, dim]`, with
    /// relative position bias and an optional `[nW, L, L]` mask.
    pub fn window_msa(&self, p: &Bindings, windows: &Var, mask: Option<&Tensor>) -> Result<Var> {
        let [b, l, d] = windows.value().dims3()?;
        let ws = (l as f64).sqrt().round() as usize;
        if ws * ws != l || ws > self.cfg.window || d != self.cfg.dim {
            return Err(Error::invalid(format!(
                "window_msa: expected [B, w*w, {}] with w <= {}, got {:?}",
                self.cfg.dim,
                self.cfg.window,
                windows.shape()
            )));
        }
        let heads = self.cfg.num_heads;
        let hd = d / heads;
        let qkv = self.qkv.forward(p, windows)?;
        let key = [b as isize, l as isize, d as isize, heads as isize];
        let q = qkv
            .gather(tensor_ops::memo("split_q", &key, || Ok(split_heads_map(b, l, d, heads, 0)))?)?
            .scale(1.0 / (hd as f64).sqrt());
        let k = qkv.gather(tensor_ops::memo("split_k", &key, || Ok(split_heads_map(b, l, d, heads, 1)))?)?;
        let v = qkv.gather(tensor_ops::memo("split_v", &key, || Ok(split_heads_map(b, l, d, heads, 2)))?)?;
        let mut logits = q
            .bmm(&k, true)?
            .reshape(&[b, heads, l, l])?
            .add_suffix(&self.position_bias(p, ws)?)?;
        if let Some(mask) = mask {
            let [nw, ml, _] = mask.dims3()?;
            if ml != l || b % nw != 0 {
                return Err(Error::invalid("window_msa: mask does not match windows"));
            }
            let mut expanded = Vec::with_capacity(nw * heads * l * l);
            for win in mask.data().chunks(l * l) {
                for _ in 0..heads {
                    expanded.extend_from_slice(win);
                }
            }
            let m = Var::constant(Tensor::new(&[nw, heads, l, l], expanded)?);
            logits = logits.reshape(&[b / nw, nw, heads, l, l])?.add_suffix(&m)?;
        }
        let attn = logits.reshape(&[b * heads, l, l])?.softmax();
        let out = attn
            .bmm(&v, false)?
            .gather(tensor_ops::memo("merge_heads", &key, || Ok(merge_heads_map(b, l, heads, hd)))?)?;
        self.proj.forward(p, &out)
    }

    /// Attention branch on a token grid `[N, H*W, dim]`, before the residual.
    pub fn attention_branch(&self, p: &Bindings, x: &Var, h: usize, w: usize) -> Result<Var> {
        let [n, l, c] = x.value().dims3()?;
        let (ws, shift) = self.effective_window(h, w);
        if l != h * w || h % ws != 0 || w % ws != 0 {
            return Err(Error::invalid(format!(
                "swin block: {h}x{w} grid ({l} tokens) is not tiled by window {ws}"
            )));
        }
        let y = self.norm1.forward(p, x)?;
        let s = shift as isize;
        let grid = [n as isize, h as isize, w as isize, c as isize];
        let shifted = if shift > 0 {
            y.gather(tensor_ops::memo("roll", &[grid[0], grid[1], grid[2], grid[3], -s], || {
                Ok(tensor_ops::roll_tokens_map(n, h, w, c, -s, -s))
            })?)?
        } else {
            y
        };
        let windows = shifted.gather(tensor_ops::memo("partition", &[grid[0], grid[1], grid[2], grid[3], ws as isize], || {
            tensor_ops::window_partition_tokens_map(n, h, w, c, ws)
        })?)?;
        let mask = if shift > 0 {
            Some(shifted_window_mask(h, w, ws, shift)?)
        } else {
            None
        };
        let attn = self.window_msa(p, &windows, mask.as_ref())?;
        let nwin = attn.shape()[0];
        let merged = attn.gather(tensor_ops::memo("reverse", &[grid[0], grid[1], grid[2], grid[3], ws as isize], || {
            tensor_ops::window_reverse_tokens_map(nwin, ws, c, h, w)
        })?)?;
        if shift > 0 {
            merged.gather(tensor_ops::memo("roll", &[grid[0], grid[1], grid[2], grid[3], s], || {
                Ok(tensor_ops::roll_tokens_map(n, h, w, c, s, s))
            })?)
        } else {
            Ok(merged)
        }
    }

    /// Feed-forward branch (ESGA on the spatial layout, or MLP) before the residual.
    pub fn ffn_branch(&self, p: &Bindings, x: &Var, h: usize, w: usize) -> Result<Var> {
        let y = self.norm2.forward(p, x)?;
        match &self.ffn {
            FeedForward::Esga(esga) => {
                let map = tokens_to_map(&y, h, w)?;
                map_to_tokens(&esga.forward(p, &map)?)
            }
            FeedForward::Mlp(mlp) => mlp.forward(p, &y),
        }
    }

    pub fn forward(&self, p: &Bindings, x: &Var, h: usize, w: usize) -> Result<Var> {
        let x = x.add(&self.attention_branch(p, x, h, w)?)?;
        x.add(&self.ffn_branch(p, &x, h, w)?)
    }
}

/// A run of blocks alternating unshifted and half-window-shifted attention.
#[derive(Debug, Clone)]
pub struct SwinStage {
    pub blocks: Vec<SwinBlock>,
}

impl SwinStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        dim: usize,
        depth: usize,
        heads: usize,
        window: usize,
        compression_ratio: usize,
        use_esga: bool,
    ) -> Result<Self> {
        init.scoped(name, |i| {
            let blocks = (0..depth)
                .map(|b| {
                    let cfg = SwinBlockConfig {
                        dim,
                        num_heads: heads,
                        window,
                        shift: if b % 2 == 0 { 0 } else { window / 2 },
                        ega: EgaConfig::new(dim, compression_ratio, true)?,
                        use_esga,
                    };
                    SwinBlock::new(i, &format!("block{b}"), cfg)
                })
                .collect::<Result<_>>()?;
            Ok(SwinStage { blocks })
        })
    }

    pub fn forward(&self, p: &Bindings, x: &Var, h: usize, w: usize) -> Result<Var> {
        let mut x = x.clone();
        for b in &self.blocks {
            x = b.forward(p, &x, h, w)?;
        }
        Ok(x)
    }
}

/// Non-overlapping `patch x patch` projection to `dim` channels, then layer norm.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub patch: usize,
    pub proj: Conv2d,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new(init: &mut Init, name: &str, in_ch: usize, dim: usize, patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::config("patch_size", "patch size must be positive"));
        }
        init.scoped(name, |i| {
            Ok(PatchEmbed {
                patch,
                proj: Conv2d::new(i, "proj", in_ch * patch * patch, dim, 1)?,
                norm: LayerNorm::new(i, "norm", dim)?,
            })
        })
    }

    /// `[N, C_in, H, W]` to tokens `[N, (H/patch)*(W/patch), dim]`.
    pub fn forward(&self, p: &Bindings, x: &Var) -> Result<Var> {
        let [_, _, h, w] = x.value().dims4()?;
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::invalid(format!(
                "patch_embed: {h}x{w} is not divisible by patch {}",
                self.patch
            )));
        }
        let folded = if self.patch > 1 {
            x.gather(Rc::new(tensor_ops::pixel_unshuffle_map(
                x.shape(),
                ShuffleFactor::new(self.patch)?,
            )?))?
        } else {
            x.clone()
        };
        let tokens = map_to_tokens(&self.proj.forward(p, &folded)?)?;
        self.norm.forward(p, &tokens)
    }
}

/// Gathers each 2x2 token neighbourhood as `[x(0,0), x(1,0), x(0,1), x(1,1)]`.
pub fn patch_merge_map(n: usize, h: usize, w: usize, c: usize) -> Result<IndexMap> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "patch_merging needs even spatial size, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut src = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for y in 0..ho {
            for x in 0..wo {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let base = (b * h * w + (2 * y + dy) * w + 2 * x + dx) * c;
                    src.extend(base..base + c);
                }
            }
        }
    }
    Ok(IndexMap {
        in_shape: vec![n, h * w, c],
        out_shape: vec![n, ho * wo, 4 * c],
        src,
    })
}

#[derive(Debug, Clone)]
pub struct PatchMerging {
    pub dim: usize,
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerging {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        init.scoped(name, |i| {
            Ok(PatchMerging {
                dim,
                norm: LayerNorm::new(i, "norm", 4 * dim)?,
                reduction: Linear::new(i, "reduction", 4 * dim, 2 * dim, false)?,
            })
        })
    }

    /// `[N, H*W, dim]` to `[N, (H/2)*(W/2), 2*dim]`.
    pub fn forward(&self, p: &Bindings, x: &Var, h: usize, w: usize) -> Result<Var> {
        let [n, l, c] = x.value().dims3()?;
        if l != h * w || c != self.dim {
            return Err(Error::invalid(format!(
                "patch_merging: expected [N, {}, {}], got {:?}",
                h * w,
                self.dim,
                x.shape()
            )));
        }
        let key = [n as isize, h as isize, w as isize, c as isize];
        let grouped = x.gather(tensor_ops::memo("patch_merge", &key, || patch_merge_map(n, h, w, c))?)?;
        self.reduction.forward(p, &self.norm.forward(p, &grouped)?)
    }
}
