//! Naive loop oracles and shared helpers for the integration tests.
//!
//! Everything here is written directly from the operator definitions with
//! explicit index arithmetic, sharing no code with the library beyond the
//! `Tensor` container and parameter lookup.

#![allow(dead_code)]

use hsanet::params::ParamStore;
use hsanet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Overwrites every parameter with uniform noise in `[-scale, scale]`
/// (layer-norm gains around 1), so no gate or output path is trivial.
pub fn randomize(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut r = rng(seed);
    for id in store.ids().collect::<Vec<_>>() {
        let is_gain = is_norm_gain(store, store.name(id));
        for v in store.value_mut(id).data_mut() {
            let u: f64 = r.gen_range(-scale..scale);
            *v = if is_gain { 1.0 + u } else { u };
        }
    }
}

/// Layer-norm gains are the only 1-D parameters named `weight`.
fn is_norm_gain(store: &ParamStore, name: &str) -> bool {
    name.ends_with(".weight") && store.value_by_name(name).is_some_and(|t| t.ndim() == 1)
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    // NaN counts as infinitely far, so it can never pass a tolerance.
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| if x == y { 0.0 } else { (x - y).abs() })
        .map(|d| if d.is_nan() { f64::INFINITY } else { d })
        .fold(0.0, f64::max)
}

/// Parameter lookup by dotted prefix.
#[derive(Clone)]
pub struct P<'a> {
    pub store: &'a ParamStore,
    pub prefix: String,
}

impl<'a> P<'a> {
    pub fn root(store: &'a ParamStore) -> Self {
        P { store, prefix: String::new() }
    }

    pub fn at(&self, name: &str) -> P<'a> {
        P {
            store: self.store,
            prefix: self.full(name),
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.value_by_name(&self.full(name)).is_some()
    }

    pub fn t(&self, name: &str) -> &'a Tensor {
        let full = self.full(name);
        self.store
            .value_by_name(&full)
            .unwrap_or_else(|| panic!("missing parameter {full}"))
    }
}

fn idx4(s: &[usize], n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * s[1] + c) * s[2] + y) * s[3] + x
}

// ---------------------------------------------------------------- scalar maps

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

pub fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).unwrap()
}

pub fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()).unwrap()
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    zip(a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    zip(a, b, |x, y| x * y)
}

// ------------------------------------------------------------ linear algebra

/// Zero-padded stride-1 cross-correlation.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, pad: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, k) = (ws[0], ws[2]);
    assert_eq!(ws[1], ci);
    let (ho, wo) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
    let mut out = vec![0.0; n * co * ho * wo];
    for b_ in 0..n {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for i in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - pad as isize;
                                let ix = xx as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((o * ci + i) * k + ky) * k + kx]
                                    * x.data()[idx4(xs, b_, i, iy as usize, ix as usize)];
                            }
                        }
                    }
                    out[((b_ * co + o) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, co, ho, wo], out).unwrap()
}

/// A registered `Conv2d` (weight + bias, "same" padding).
pub fn conv(p: &P, x: &Tensor) -> Tensor {
    let w = p.t("weight");
    let bias = if p.has("bias") { Some(p.t("bias")) } else { None };
    conv2d(x, w, bias, w.shape()[2] / 2)
}

/// `y = x @ w + b` over the last axis, `w: [in, out]`.
pub fn linear_last(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    assert_eq!(*x.shape().last().unwrap(), din);
    let rows = x.numel() / din;
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for j in 0..dout {
            let mut acc = b.map_or(0.0, |b| b.data()[j]);
            for i in 0..din {
                acc += x.data()[r * din + i] * w.data()[i * dout + j];
            }
            out[r * dout + j] = acc;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(&shape, out).unwrap()
}

pub fn linear(p: &P, x: &Tensor) -> Tensor {
    let bias = if p.has("bias") { Some(p.t("bias")) } else { None };
    linear_last(x, p.t("weight"), bias)
}

/// A registered `Linear` applied over the channel axis of `[N, C, H, W]`.
pub fn linear_channels(p: &P, x: &Tensor) -> Tensor {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    to_map(&linear(p, &to_tokens(x)), h, w)
}

pub fn layer_norm(p: &P, x: &Tensor) -> Tensor {
    let (g, b) = (p.t("weight"), p.t("bias"));
    let d = g.numel();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) / (var + LN_EPS).sqrt() * g.data()[j] + b.data()[j];
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

// ---------------------------------------------------------- rearrangements

/// `[N, C, H, W]` to `[N, H*W, C]`.
pub fn to_tokens(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![0.0; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(b * h * w + y * w + xx) * c + ch] = x.data()[idx4(s, b, ch, y, xx)];
                }
            }
        }
    }
    Tensor::new(&[n, h * w, c], out).unwrap()
}

pub fn to_map(t: &Tensor, h: usize, w: usize) -> Tensor {
    let s = t.shape();
    let (n, l, c) = (s[0], s[1], s[2]);
    assert_eq!(l, h * w);
    let mut out = vec![0.0; t.numel()];
    for b in 0..n {
        for tok in 0..l {
            for ch in 0..c {
                out[(b * c + ch) * l + tok] = t.data()[(b * l + tok) * c + ch];
            }
        }
    }
    Tensor::new(&[n, c, h, w], out).unwrap()
}

/// `out[n, c, y*s+i, x*s+j] = in[n, c*s*s + i*s + j, y, x]`.
pub fn pixel_shuffle(x: &Tensor, s: usize) -> Tensor {
    let xs = x.shape();
    let (n, c, h, w) = (xs[0], xs[1] / (s * s), xs[2], xs[3]);
    let os = [n, c, h * s, w * s];
    let mut out = vec![0.0; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    for i in 0..s {
                        for j in 0..s {
                            out[idx4(&os, b, ch, y * s + i, xx * s + j)] =
                                x.data()[idx4(xs, b, ch * s * s + i * s + j, y, xx)];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&os, out).unwrap()
}

pub fn pixel_unshuffle(x: &Tensor, s: usize) -> Tensor {
    let xs = x.shape();
    let (n, c, h, w) = (xs[0], xs[1], xs[2] / s, xs[3] / s);
    let os = [n, c * s * s, h, w];
    let mut out = vec![0.0; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    for i in 0..s {
                        for j in 0..s {
                            out[idx4(&os, b, ch * s * s + i * s + j, y, xx)] =
                                x.data()[idx4(xs, b, ch, y * s + i, xx * s + j)];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&os, out).unwrap()
}

pub fn nearest2x(x: &Tensor) -> Tensor {
    let xs = x.shape();
    let os = [xs[0], xs[1], 2 * xs[2], 2 * xs[3]];
    let mut out = vec![0.0; x.numel() * 4];
    for b in 0..os[0] {
        for c in 0..os[1] {
            for y in 0..os[2] {
                for xx in 0..os[3] {
                    out[idx4(&os, b, c, y, xx)] = x.data()[idx4(xs, b, c, y / 2, xx / 2)];
                }
            }
        }
    }
    Tensor::new(&os, out).unwrap()
}

pub fn zero_interleave2x(x: &Tensor) -> Tensor {
    let xs = x.shape();
    let os = [xs[0], xs[1], 2 * xs[2], 2 * xs[3]];
    let mut out = vec![0.0; x.numel() * 4];
    for b in 0..os[0] {
        for c in 0..os[1] {
            for y in (0..os[2]).step_by(2) {
                for xx in (0..os[3]).step_by(2) {
                    out[idx4(&os, b, c, y, xx)] = x.data()[idx4(xs, b, c, y / 2, xx / 2)];
                }
            }
        }
    }
    Tensor::new(&os, out).unwrap()
}

/// `[N, C, H, W]` to windows `[N*nH*nW, ws*ws, C]`, windows row-major.
pub fn window_partition(x: &Tensor, ws: usize) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (nh, nw) = (h / ws, w / ws);
    let mut out = Vec::with_capacity(x.numel());
    for b in 0..n {
        for wy in 0..nh {
            for wx in 0..nw {
                for a in 0..ws {
                    for bb in 0..ws {
                        for ch in 0..c {
                            out.push(x.data()[idx4(s, b, ch, wy * ws + a, wx * ws + bb)]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n * nh * nw, ws * ws, c], out).unwrap()
}

/// Mirror without repeating the edge sample.
pub fn reflect(i: isize, len: usize) -> usize {
    let mut i = i;
    let n = len as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

pub fn reflect_pad(x: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Tensor {
    let s = x.shape();
    let os = [s[0], s[1], s[2] + top + bottom, s[3] + left + right];
    let mut out = vec![0.0; os.iter().product()];
    for b in 0..os[0] {
        for c in 0..os[1] {
            for y in 0..os[2] {
                for xx in 0..os[3] {
                    let sy = reflect(y as isize - top as isize, s[2]);
                    let sx = reflect(xx as isize - left as isize, s[3]);
                    out[idx4(&os, b, c, y, xx)] = x.data()[idx4(s, b, c, sy, sx)];
                }
            }
        }
    }
    Tensor::new(&os, out).unwrap()
}

pub fn crop(x: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Tensor {
    let s = x.shape();
    let os = [s[0], s[1], h, w];
    let mut out = vec![0.0; os.iter().product()];
    for b in 0..s[0] {
        for c in 0..s[1] {
            for y in 0..h {
                for xx in 0..w {
                    out[idx4(&os, b, c, y, xx)] = x.data()[idx4(s, b, c, top + y, left + xx)];
                }
            }
        }
    }
    Tensor::new(&os, out).unwrap()
}

// ------------------------------------------------------------------- gates

fn per_pixel_mlp(p1: &P, p2: &P, x: &Tensor, gelu_on: bool) -> Tensor {
    let h = linear_channels(p1, x);
    let h = if gelu_on { map(&h, gelu) } else { h };
    linear_channels(p2, &h)
}

fn spatial_path(p: &P, x: &Tensor, gelu_on: bool) -> Tensor {
    let folded = pixel_unshuffle(x, 2);
    let h = conv(&p.at("spatial_conv1"), &folded);
    let h = if gelu_on { map(&h, gelu) } else { h };
    pixel_shuffle(&conv(&p.at("spatial_conv2"), &h), 2)
}

pub fn channel_attention(p: &P, x: &Tensor, gelu_on: bool) -> Tensor {
    let logits = per_pixel_mlp(&p.at("channel_fc1"), &p.at("channel_fc2"), x, gelu_on);
    mul(x, &map(&logits, sigmoid))
}

pub fn spatial_attention(p: &P, x: &Tensor, gelu_on: bool) -> Tensor {
    mul(x, &map(&spatial_path(p, x, gelu_on), sigmoid))
}

pub fn esga(p: &P, x: &Tensor, gelu_on: bool) -> Tensor {
    spatial_attention(p, &channel_attention(p, x, gelu_on), gelu_on)
}

pub fn epga(p: &P, x: &Tensor, gelu_on: bool) -> Tensor {
    let ch = per_pixel_mlp(&p.at("channel_fc1"), &p.at("channel_fc2"), x, gelu_on);
    let sp = spatial_path(p, x, gelu_on);
    let gate = zip(&ch, &sp, |a, b| sigmoid(0.5 * a + 0.5 * b));
    mul(&gate, &linear_channels(&p.at("fuse"), x))
}

// -------------------------------------------------------------- transformer

pub struct BlockShape {
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
}

/// One pre-norm shifted-window block on tokens `[N, H*W, C]`.
pub fn swin_block(p: &P, x: &Tensor, h: usize, w: usize, s: &BlockShape) -> Tensor {
    let [n, l, c] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    assert_eq!(l, h * w);
    let (ws, shift) = if h.min(w) <= s.window { (h.min(w), 0) } else { (s.window, s.shift) };
    let full = s.window;
    let heads = s.heads;
    let hd = c / heads;
    let y = layer_norm(&p.at("norm1"), x);
    let qkv = linear(&p.at("attn.qkv"), &y);
    let table = p.t("attn.relative_position_bias_table");
    let region = |v: usize, len: usize| {
        if v < len - ws {
            0
        } else if v < len - shift {
            1
        } else {
            2
        }
    };
    let mut attn_out = vec![0.0; n * l * c];
    for b in 0..n {
        for wy in 0..h / ws {
            for wx in 0..w / ws {
                // Window-local token t sits at shifted-grid position (sy, sx),
                // which reads the original grid at (sy + shift, sx + shift).
                let coords: Vec<(usize, usize, usize)> = (0..ws * ws)
                    .map(|t| {
                        let (sy, sx) = (wy * ws + t / ws, wx * ws + t % ws);
                        let oy = (sy + shift) % h;
                        let ox = (sx + shift) % w;
                        (oy * w + ox, sy, sx)
                    })
                    .collect();
                for hh in 0..heads {
                    for (qi, &(qtok, qsy, qsx)) in coords.iter().enumerate() {
                        let mut logits = Vec::with_capacity(ws * ws);
                        for (ki, &(ktok, ksy, ksx)) in coords.iter().enumerate() {
                            let mut dot = 0.0;
                            for d in 0..hd {
                                let q = qkv.data()[(b * l + qtok) * 3 * c + hh * hd + d];
                                let k = qkv.data()[(b * l + ktok) * 3 * c + c + hh * hd + d];
                                dot += q * k;
                            }
                            dot /= (hd as f64).sqrt();
                            let (qy, qx) = ((qi / ws) as isize, (qi % ws) as isize);
                            let (ky, kx) = ((ki / ws) as isize, (ki % ws) as isize);
                            let ry = (qy - ky + full as isize - 1) as usize;
                            let rx = (qx - kx + full as isize - 1) as usize;
                            dot += table.data()[(ry * (2 * full - 1) + rx) * heads + hh];
                            if shift > 0 {
                                let lq = (region(qsy, h), region(qsx, w));
                                let lk = (region(ksy, h), region(ksx, w));
                                if lq != lk {
                                    dot += -100.0;
                                }
                            }
                            logits.push(dot);
                        }
                        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
                        let z: f64 = e.iter().sum();
                        for d in 0..hd {
                            let mut acc = 0.0;
                            for (ki, &(ktok, _, _)) in coords.iter().enumerate() {
                                acc += e[ki] / z * qkv.data()[(b * l + ktok) * 3 * c + 2 * c + hh * hd + d];
                            }
                            attn_out[(b * l + qtok) * c + hh * hd + d] = acc;
                        }
                    }
                }
            }
        }
    }
    let attn = linear(&p.at("attn.proj"), &Tensor::new(&[n, l, c], attn_out).unwrap());
    let x1 = add(x, &attn);
    let y2 = layer_norm(&p.at("norm2"), &x1);
    let ffn = if p.has("esga.channel_fc1.weight") {
        to_tokens(&esga(&p.at("esga"), &to_map(&y2, h, w), true))
    } else {
        let hid = map(&linear(&p.at("mlp.fc1"), &y2), gelu);
        linear(&p.at("mlp.fc2"), &hid)
    };
    add(&x1, &ffn)
}

pub fn swin_stage(p: &P, x: &Tensor, h: usize, w: usize, depth: usize, heads: usize, window: usize) -> Tensor {
    let mut t = x.clone();
    for b in 0..depth {
        let shape = BlockShape {
            heads,
            window,
            shift: if b % 2 == 0 { 0 } else { window / 2 },
        };
        t = swin_block(&p.at(&format!("block{b}")), &t, h, w, &shape);
    }
    t
}

pub fn patch_embed(p: &P, x: &Tensor, patch: usize) -> Tensor {
    let folded = if patch > 1 { pixel_unshuffle(x, patch) } else { x.clone() };
    layer_norm(&p.at("norm"), &to_tokens(&conv(&p.at("proj"), &folded)))
}

pub fn patch_merge(p: &P, t: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, _, c] = [t.shape()[0], t.shape()[1], t.shape()[2]];
    let mut out = Vec::with_capacity(t.numel());
    for b in 0..n {
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let tok = (2 * y + dy) * w + 2 * x + dx;
                    out.extend_from_slice(&t.data()[(b * h * w + tok) * c..][..c]);
                }
            }
        }
    }
    let grouped = Tensor::new(&[n, h * w / 4, 4 * c], out).unwrap();
    linear(&p.at("reduction"), &layer_norm(&p.at("norm"), &grouped))
}

/// Interpolation-convolution expansion: `[N, H*W, C]` to a `[N, C/2, 2H, 2W]` map.
pub fn hic_grid(p: &P, t: &Tensor, h: usize, w: usize) -> Tensor {
    let e = linear(&p.at("expand"), &layer_norm(&p.at("norm"), t));
    let m = to_map(&e, h, w);
    let a = conv(&p.at("shared_conv"), &nearest2x(&m));
    let b = conv(&p.at("shared_conv"), &zero_interleave2x(&m));
    zip(&a, &b, |u, v| 0.5 * (u + v))
}

pub fn linear_expand(p: &P, t: &Tensor, h: usize, w: usize) -> Tensor {
    let e = linear(&p.at("expand"), t);
    let up = pixel_shuffle(&to_map(&e, h, w), 2);
    layer_norm(&p.at("norm"), &to_tokens(&up))
}

// ------------------------------------------------------------------- model

pub struct ModelShape {
    pub stages: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub patch: usize,
    pub esga: bool,
    pub epga: bool,
    pub hic: bool,
    pub texture: bool,
}

pub fn res_block(p: &P, x: &Tensor, esga_on: bool) -> Tensor {
    let y = conv(&p.at("conv2"), &map(&conv(&p.at("conv1"), x), |v| v.max(0.0)));
    let y = if esga_on { esga(&p.at("esga"), &y, false) } else { y };
    add(x, &y)
}

/// The whole network, from its definition.
pub fn model(p: &P, x: &Tensor, m: &ModelShape) -> Tensor {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let mult = m.window * m.patch * (1 << m.stages);
    let (ph, pw) = (h.div_ceil(mult) * mult - h, w.div_ceil(mult) * mult - w);
    let (top, left) = (ph / 2, pw / 2);
    let xp = reflect_pad(x, top, ph - top, left, pw - left);
    let (hp, wp) = (xp.shape()[2], xp.shape()[3]);

    let mut f = conv(&p.at("shallow"), &xp);
    for i in 0..2 {
        f = res_block(&p.at(&format!("res_in{i}")), &f, m.esga);
    }
    let (mut gh, mut gw) = (hp / m.patch, wp / m.patch);
    let mut t = patch_embed(&p.at("embed"), &f, m.patch);
    let mut skips = Vec::new();
    for s in 0..m.stages {
        t = swin_stage(&p.at(&format!("enc{s}")), &t, gh, gw, m.depths[s], m.heads[s], m.window);
        skips.push((t.clone(), gh, gw));
        t = patch_merge(&p.at(&format!("merge{s}")), &t, gh, gw);
        gh /= 2;
        gw /= 2;
    }
    let k = m.stages;
    t = swin_stage(&p.at("bottleneck"), &t, gh, gw, m.depths[k], m.heads[k], m.window);
    for (j, s) in (0..k).rev().enumerate() {
        let up = if m.hic {
            to_tokens(&hic_grid(&p.at(&format!("up{s}")), &t, gh, gw))
        } else {
            linear_expand(&p.at(&format!("up{s}")), &t, gh, gw)
        };
        let (skip, sh, sw) = skips.pop().unwrap();
        gh = sh;
        gw = sw;
        let cat = to_map(&concat_last(&up, &skip), gh, gw);
        let fused = if m.epga {
            epga(&p.at(&format!("fuse{s}")), &cat, false)
        } else {
            linear_channels(&p.at(&format!("fuse{s}")), &cat)
        };
        t = swin_stage(
            &p.at(&format!("dec{s}")),
            &to_tokens(&fused),
            gh,
            gw,
            m.depths[k + 1 + j],
            m.heads[k + 1 + j],
            m.window,
        );
    }
    let u = linear(&p.at("unembed"), &layer_norm(&p.at("final_norm"), &t));
    let central = if m.patch > 1 {
        pixel_shuffle(&to_map(&u, gh, gw), m.patch)
    } else {
        to_map(&u, gh, gw)
    };
    let mut g = add(&f, &central);
    if m.texture {
        g = add(&g, &linear_channels(&p.at("texture_mlp"), &g));
    }
    for i in 0..2 {
        g = res_block(&p.at(&format!("res_out{i}")), &g, m.esga);
    }
    let y = conv(&p.at("output"), &g);
    add(x, &crop(&y, top, left, h, w))
}

pub fn concat_last(a: &Tensor, b: &Tensor) -> Tensor {
    let (ca, cb) = (*a.shape().last().unwrap(), *b.shape().last().unwrap());
    let rows = a.numel() / ca;
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for r in 0..rows {
        out.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
        out.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = ca + cb;
    Tensor::new(&shape, out).unwrap()
}

// --------------------------------------------------------------- objective

pub const SOBEL: [[[f64; 3]; 3]; 4] = [
    [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]],
    [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]],
    [[0.0, 1.0, 2.0], [-1.0, 0.0, 1.0], [-2.0, -1.0, 0.0]],
    [[-2.0, -1.0, 0.0], [-1.0, 0.0, 1.0], [0.0, 1.0, 2.0]],
];

/// Directional gradient maps `[N, 4, H, W]` of a single-channel batch,
/// reflect-padded.
pub fn sobel(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let os = [n, 4, h, w];
    let mut out = vec![0.0; n * 4 * h * w];
    for b in 0..n {
        for (d, k) in SOBEL.iter().enumerate() {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for (ky, row) in k.iter().enumerate() {
                        for (kx, &kv) in row.iter().enumerate() {
                            let sy = reflect(y as isize + ky as isize - 1, h);
                            let sx = reflect(xx as isize + kx as isize - 1, w);
                            acc += kv * x.data()[idx4(s, b, 0, sy, sx)];
                        }
                    }
                    out[idx4(&os, b, d, y, xx)] = acc;
                }
            }
        }
    }
    Tensor::new(&os, out).unwrap()
}

/// `(total, mae, edge)` with the edge term computed on each image separately.
pub fn denoise_loss(pred: &Tensor, target: &Tensor, lambda: f64) -> (f64, f64, f64) {
    let mae = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.numel() as f64;
    let (sp, st) = (sobel(pred), sobel(target));
    let edge = sp.data().iter().zip(st.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / sp.numel() as f64;
    (mae + lambda * edge, mae, edge)
}

// ------------------------------------------------------------------ metrics

pub fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64
}

pub fn psnr(a: &Tensor, b: &Tensor, range: f64) -> f64 {
    10.0 * (range * range / mse(a, b)).log10()
}

/// Mean SSIM of one `h x w` plane: direct 11x11 Gaussian-weighted sums at
/// every fully-contained window position, population covariance.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> f64 {
    const K: usize = 11;
    let sigma: f64 = 1.5;
    let mut g = [[0.0; K]; K];
    let mut z = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            z += *v;
        }
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - K {
        for x in 0..=w - K {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..K {
                for j in 0..K {
                    let wt = g[i][j] / z;
                    let (u, v) = (a[(y + i) * w + x + j], b[(y + i) * w + x + j]);
                    ma += wt * u;
                    mb += wt * v;
                    saa += wt * u * u;
                    sbb += wt * v * v;
                    sab += wt * u * v;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}
pub mod sweeps;
pub mod fd;
