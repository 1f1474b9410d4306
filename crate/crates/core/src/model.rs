//! Network assembly.
//!
//! ```text
//! x ─ reflect pad ─ shallow conv ─ res+ESGA ×2 ─┬─ patch embed
//!                                                │   [swin stage ─ merge] × k ─ bottleneck
//!                                                │   [upsample ─ EPGA(skip) ─ swin stage] × k
//!                                                │   norm ─ unembed
//!                                                └──(+)── texture MLP (+) ─ res+ESGA ×2 ─ out conv ─ crop ─(+ x)
//! ```
//!
//! The output convolution starts at zero, so a freshly built network is the
//! identity map.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{EgaConfig, Epga, Esga};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::hic::{Hic, HicConfig, LinearExpand, MergeMode, Upsampler};
use crate::layers::{map_to_tokens, tokens_to_map, Conv2d, LayerNorm, Linear};
use crate::params::{Bindings, Init, ParamStore};
use crate::swin::{PatchEmbed, PatchMerging, SwinStage};
use crate::tensor::{FeatureMap, Tensor};
use crate::tensor_ops::{self, ShuffleFactor};

/// Module switches for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub esga: bool,
    pub epga: bool,
    pub hic: bool,
    pub texture_mlp: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            esga: true,
            epga: true,
            hic: true,
            texture_mlp: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub shallow_width: usize,
    pub embed_dim: usize,
    /// Encoder stages, then the bottleneck, then decoder stages (odd length).
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window_size: usize,
    pub patch_size: usize,
    pub compression_ratio: usize,
    pub conv_kernel: usize,
    pub hic_merge: MergeMode,
    pub toggles: Toggles,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            shallow_width: 32,
            embed_dim: 32,
            depths: vec![2, 2, 1, 2, 2],
            heads: vec![2, 4, 8, 4, 2],
            window_size: 8,
            patch_size: 1,
            compression_ratio: 4,
            conv_kernel: 3,
            hic_merge: MergeMode::Mean,
            toggles: Toggles::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A very small network for tests and smoke runs.
    pub fn tiny() -> Self {
        ModelConfig {
            shallow_width: 8,
            embed_dim: 8,
            depths: vec![1, 1, 1],
            heads: vec![1, 1, 1],
            window_size: 4,
            compression_ratio: 2,
            ..ModelConfig::default()
        }
    }

    /// Number of down-sampling stages.
    pub fn stages(&self) -> usize {
        self.depths.len() / 2
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Input sides are padded up to a multiple of this.
    pub fn size_multiple(&self) -> usize {
        self.window_size * self.patch_size * (1 << self.stages())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("shallow_width", self.shallow_width),
            ("embed_dim", self.embed_dim),
            ("window_size", self.window_size),
            ("patch_size", self.patch_size),
            ("compression_ratio", self.compression_ratio),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::config("conv_kernel", "must be odd"));
        }
        if self.depths.len() % 2 == 0 {
            return Err(Error::config(
                "depths",
                "needs encoder stages, one bottleneck and mirrored decoder stages (odd length)",
            ));
        }
        if self.heads.len() != self.depths.len() {
            return Err(Error::config("heads", "must have one entry per stage in `depths`"));
        }
        if self.depths.iter().any(|&d| d == 0) {
            return Err(Error::config("depths", "every stage needs at least one block"));
        }
        let k = self.stages();
        for (i, &heads) in self.heads.iter().enumerate() {
            let level = if i <= k { i } else { 2 * k - i };
            let dim = self.stage_dim(level);
            if heads == 0 || dim % heads != 0 {
                return Err(Error::config(
                    "heads",
                    format!("stage {i} width {dim} is not divisible by {heads} heads"),
                ));
            }
            if self.toggles.esga && dim % self.compression_ratio != 0 {
                return Err(Error::config(
                    "compression_ratio",
                    format!("stage {i} width {dim} is not divisible by r = {}", self.compression_ratio),
                ));
            }
        }
        if self.toggles.esga && self.shallow_width % self.compression_ratio != 0 {
            return Err(Error::config(
                "compression_ratio",
                format!(
                    "shallow width {} is not divisible by r = {}",
                    self.shallow_width, self.compression_ratio
                ),
            ));
        }
        Ok(())
    }
}

/// Two width-preserving convolutions with an ESGA gate inside the residual.
#[derive(Debug, Clone)]
pub struct ResConvBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub esga: Option<Esga>,
}

impl ResConvBlock {
    pub fn new(init: &mut Init, name: &str, width: usize, kernel: usize, r: usize, use_esga: bool) -> Result<Self> {
        init.scoped(name, |i| {
            Ok(ResConvBlock {
                conv1: Conv2d::new(i, "conv1", width, width, kernel)?,
                conv2: Conv2d::new(i, "conv2", width, width, kernel)?,
                esga: if use_esga {
                    Some(Esga::new(i, "esga", EgaConfig::new(width, r, false)?)?)
                } else {
                    None
                },
            })
        })
    }

    pub fn forward(&self, p: &Bindings, x: &Var) -> Result<Var> {
        let y = self.conv2.forward(p, &self.conv1.forward(p, x)?.relu())?;
        let y = match &self.esga {
            Some(g) => g.forward(p, &y)?,
            None => y,
        };
        x.add(&y)
    }
}

/// Decoder skip fusion: EPGA or a plain linear projection of the concatenation.
#[derive(Debug, Clone)]
pub enum SkipFusion {
    Epga(Epga),
    Linear(Linear),
}

impl SkipFusion {
    /// `[N, 2C, H, W]` to `[N, C, H, W]`.
    pub fn forward(&self, p: &Bindings, x_cat: &Var) -> Result<Var> {
        match self {
            SkipFusion::Epga(e) => e.forward(p, x_cat),
            SkipFusion::Linear(l) => l.forward_channels(p, x_cat),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HsaNet {
    pub cfg: ModelConfig,
    pub shallow: Conv2d,
    pub res_in: Vec<ResConvBlock>,
    pub embed: PatchEmbed,
    pub encoder: Vec<SwinStage>,
    pub merges: Vec<PatchMerging>,
    pub bottleneck: SwinStage,
    pub upsamplers: Vec<Upsampler>,
    pub fusions: Vec<SkipFusion>,
    pub decoder: Vec<SwinStage>,
    pub final_norm: LayerNorm,
    pub unembed: Linear,
    pub texture: Option<Linear>,
    pub res_out: Vec<ResConvBlock>,
    pub output: Conv2d,
}

/// Per-module parameter counts of a built network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub modules: Vec<(String, usize)>,
    pub total: usize,
}

impl std::fmt::Display for BuildReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<24} {:>10}", "module", "params")?;
        for (m, n) in &self.modules {
            writeln!(f, "{m:<24} {n:>10}")?;
        }
        write!(f, "{:<24} {:>10}", "total", self.total)
    }
}

impl HsaNet {
    /// Builds the network and its parameters, deterministically from `cfg.seed`.
    pub fn build(cfg: &ModelConfig) -> Result<(HsaNet, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = Self::register(cfg, &mut Init::new(&mut store, &mut rng))?;
        Ok((net, store))
    }

    fn register(cfg: &ModelConfig, init: &mut Init) -> Result<HsaNet> {
        let c0 = cfg.shallow_width;
        let k = cfg.stages();
        let r = cfg.compression_ratio;
        let t = cfg.toggles;
        let kern = cfg.conv_kernel;

        let shallow = Conv2d::new(init, "shallow", cfg.in_channels, c0, kern)?;
        let res_in = (0..2)
            .map(|i| ResConvBlock::new(init, &format!("res_in{i}"), c0, kern, r, t.esga))
            .collect::<Result<Vec<_>>>()?;
        let embed = PatchEmbed::new(init, "embed", c0, cfg.embed_dim, cfg.patch_size)?;

        let mut encoder = Vec::with_capacity(k);
        let mut merges = Vec::with_capacity(k);
        for s in 0..k {
            let dim = cfg.stage_dim(s);
            encoder.push(SwinStage::new(
                init,
                &format!("enc{s}"),
                dim,
                cfg.depths[s],
                cfg.heads[s],
                cfg.window_size,
                r,
                t.esga,
            )?);
            merges.push(PatchMerging::new(init, &format!("merge{s}"), dim)?);
        }
        let bottleneck = SwinStage::new(
            init,
            "bottleneck",
            cfg.stage_dim(k),
            cfg.depths[k],
            cfg.heads[k],
            cfg.window_size,
            r,
            t.esga,
        )?;

        // Decoder modules are stored deepest first, in execution order.
        let mut upsamplers = Vec::with_capacity(k);
        let mut fusions = Vec::with_capacity(k);
        let mut decoder = Vec::with_capacity(k);
        for (j, s) in (0..k).rev().enumerate() {
            let below = cfg.stage_dim(s + 1);
            let dim = cfg.stage_dim(s);
            upsamplers.push(if t.hic {
                Upsampler::Hic(Hic::new(init, &format!("up{s}"), HicConfig::halving(below, cfg.hic_merge))?)
            } else {
                Upsampler::Linear(LinearExpand::new(init, &format!("up{s}"), below)?)
            });
            fusions.push(if t.epga {
                SkipFusion::Epga(Epga::new(init, &format!("fuse{s}"), dim, r, false)?)
            } else {
                SkipFusion::Linear(Linear::new(init, &format!("fuse{s}"), 2 * dim, dim, true)?)
            });
            decoder.push(SwinStage::new(
                init,
                &format!("dec{s}"),
                dim,
                cfg.depths[k + 1 + j],
                cfg.heads[k + 1 + j],
                cfg.window_size,
                r,
                t.esga,
            )?);
        }

        let final_norm = LayerNorm::new(init, "final_norm", cfg.embed_dim)?;
        let unembed = Linear::new(
            init,
            "unembed",
            cfg.embed_dim,
            c0 * cfg.patch_size * cfg.patch_size,
            true,
        )?;
        let texture = if t.texture_mlp {
            Some(Linear::new(init, "texture_mlp", c0, c0, true)?)
        } else {
            None
        };
        let res_out = (0..2)
            .map(|i| ResConvBlock::new(init, &format!("res_out{i}"), c0, kern, r, t.esga))
            .collect::<Result<Vec<_>>>()?;
        let output = Conv2d::new_zeros(init, "output", c0, cfg.in_channels, kern)?;

        Ok(HsaNet {
            cfg: cfg.clone(),
            shallow,
            res_in,
            embed,
            encoder,
            merges,
            bottleneck,
            upsamplers,
            fusions,
            decoder,
            final_norm,
            unembed,
            texture,
            res_out,
            output,
        })
    }

    pub fn report(store: &ParamStore) -> BuildReport {
        BuildReport {
            modules: store.counts_by_module(),
            total: store.param_count(),
        }
    }

    /// Reflect padding `(top, bottom, left, right)` that brings `h x w` to
    /// the next multiple of [`ModelConfig::size_multiple`].
    pub fn padding(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let m = self.cfg.size_multiple();
        let ph = h.div_ceil(m) * m - h;
        let pw = w.div_ceil(m) * m - w;
        (ph / 2, ph - ph / 2, pw / 2, pw - pw / 2)
    }

    /// Central transformer encoder-decoder on `[N, C0, H, W]` (already
    /// padded), returning the un-embedded map of the same shape.
    fn central(&self, p: &Bindings, f: &Var) -> Result<Var> {
        let [_, _, h, w] = f.value().dims4()?;
        let patch = self.cfg.patch_size;
        let (mut gh, mut gw) = (h / patch, w / patch);
        let mut t = self.embed.forward(p, f)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (stage, merge) in self.encoder.iter().zip(&self.merges) {
            t = stage.forward(p, &t, gh, gw)?;
            skips.push((t.clone(), gh, gw));
            t = merge.forward(p, &t, gh, gw)?;
            gh /= 2;
            gw /= 2;
        }
        t = self.bottleneck.forward(p, &t, gh, gw)?;
        for ((up, fuse), stage) in self.upsamplers.iter().zip(&self.fusions).zip(&self.decoder) {
            let (skip, sh, sw) = skips.pop().expect("one skip per decoder stage");
            let upsampled = up.forward(p, &t, gh, gw)?;
            gh = sh;
            gw = sw;
            let cat = tokens_to_map(&upsampled.concat(&skip, 2)?, gh, gw)?;
            t = map_to_tokens(&fuse.forward(p, &cat)?)?;
            t = stage.forward(p, &t, gh, gw)?;
        }
        let u = self.unembed.forward(p, &self.final_norm.forward(p, &t)?)?;
        let map = tokens_to_map(&u, gh, gw)?;
        if patch > 1 {
            map.gather(Rc::new(tensor_ops::pixel_shuffle_map(
                map.shape(),
                ShuffleFactor::new(patch)?,
            )?))
        } else {
            Ok(map)
        }
    }

    /// `x + body(x)` for `x: [N, in_channels, H, W]`.
    pub fn forward(&self, p: &Bindings, x: &Var) -> Result<Var> {
        let [_, c, h, w] = x.value().dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::invalid(format!(
                "expected {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if h < 2 || w < 2 {
            return Err(Error::invalid(format!(
                "input {h}x{w} is too small for reflect padding"
            )));
        }
        let (top, bottom, left, right) = self.padding(h, w);
        let xp = if top + bottom + left + right > 0 {
            x.gather(Rc::new(tensor_ops::reflect_pad_map(x.shape(), top, bottom, left, right)?))?
        } else {
            x.clone()
        };

        let mut f = self.shallow.forward(p, &xp)?;
        for b in &self.res_in {
            f = b.forward(p, &f)?;
        }
        let mut g = f.add(&self.central(p, &f)?)?;
        if let Some(tex) = &self.texture {
            g = g.add(&tex.forward_channels(p, &g)?)?;
        }
        for b in &self.res_out {
            g = b.forward(p, &g)?;
        }
        let y = self.output.forward(p, &g)?;
        let y = if top + bottom + left + right > 0 {
            y.gather(Rc::new(tensor_ops::crop_map(y.shape(), top, left, h, w)?))?
        } else {
            y
        };
        x.add(&y)
    }

    /// Inference on a plain tensor, without recording gradients.
    pub fn denoise(&self, store: &ParamStore, x: &FeatureMap) -> Result<FeatureMap> {
        let p = Bindings::inference(store);
        Ok(self.forward(&p, &Var::constant(x.clone()))?.value().clone())
    }
}

/// Total number of scalar parameters.
pub fn param_count(store: &ParamStore) -> usize {
    store.param_count()
}

/// Builds a standalone network for a config and runs it on `x`.
pub fn forward_once(cfg: &ModelConfig, x: &Tensor) -> Result<Tensor> {
    let (net, store) = HsaNet::build(cfg)?;
    net.denoise(&store, x)
}
