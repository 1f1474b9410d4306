//! Rearrangement and interpolation primitives.
//!
//! Every primitive here is a fixed linear map that copies (or zeroes) input
//! elements, so each is described by an [`IndexMap`]: for every output element
//! the flat index of the input element it reads, or [`IndexMap::ZERO`]. The
//! same map drives the forward pass and, read backwards, its adjoint.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Tensor};

const MEMO_CAPACITY: usize = 512;

thread_local! {
    static MEMO: RefCell<HashMap<(&'static str, Vec<isize>), Rc<IndexMap>>> = RefCell::new(HashMap::new());
}

pub fn shape_key(shape: &[usize]) -> Vec<isize> {
    shape.iter().map(|&d| d as isize).collect()
}

/// Builds an index map once per `(tag, args)` and shares it afterwards.
/// `args` must determine the map completely.
pub fn memo(tag: &'static str, args: &[isize], build: impl FnOnce() -> Result<IndexMap>) -> Result<Rc<IndexMap>> {
    let key = (tag, args.to_vec());
    if let Some(m) = MEMO.with(|c| c.borrow().get(&key).cloned()) {
        return Ok(m);
    }
    let map = Rc::new(build()?);
    MEMO.with(|c| {
        let mut c = c.borrow_mut();
        if c.len() >= MEMO_CAPACITY {
            c.clear();
        }
        c.insert(key, map.clone());
    });
    Ok(map)
}

/// Upscale ratio of the periodic shuffling operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShuffleFactor(usize);

impl ShuffleFactor {
    pub fn new(s: usize) -> Result<Self> {
        if s == 0 {
            return Err(Error::invalid("shuffle factor must be >= 1"));
        }
        Ok(ShuffleFactor(s))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// Gather plan: `out[i] = input[src[i]]`, or zero for [`IndexMap::ZERO`].
#[derive(Debug, Clone)]
pub struct IndexMap {
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub src: Vec<usize>,
}

impl IndexMap {
    pub const ZERO: usize = usize::MAX;

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.in_shape.as_slice() {
            return Err(Error::invalid(format!(
                "index map expects input {:?}, got {:?}",
                self.in_shape,
                x.shape()
            )));
        }
        let xs = x.data();
        let data = self
            .src
            .iter()
            .map(|&s| if s == Self::ZERO { 0.0 } else { xs[s] })
            .collect();
        Tensor::new(&self.out_shape, data)
    }

    /// Adjoint of [`IndexMap::apply`]: scatters-adds `grad` back to input layout.
    pub fn adjoint(&self, grad: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(&self.in_shape);
        let o = out.data_mut();
        for (&s, &g) in self.src.iter().zip(grad.data()) {
            if s != Self::ZERO {
                o[s] += g;
            }
        }
        out
    }
}

fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::invalid(format!(
            "expected [N, C, H, W], got {shape:?}"
        ))),
    }
}

/// Channel-to-space rearrangement with ordering `c*s*s + i*s + j`.
pub fn pixel_shuffle_map(shape: &[usize], s: ShuffleFactor) -> Result<IndexMap> {
    let [n, c, h, w] = dims4(shape)?;
    let s = s.get();
    if c % (s * s) != 0 {
        return Err(Error::invalid(format!(
            "pixel_shuffle: channels {c} not divisible by {}",
            s * s
        )));
    }
    let co = c / (s * s);
    let (ho, wo) = (h * s, w * s);
    let mut src = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..co {
            for y in 0..ho {
                let (hy, i) = (y / s, y % s);
                for x in 0..wo {
                    let (wx, j) = (x / s, x % s);
                    let cin = ch * s * s + i * s + j;
                    src.push(((b * c + cin) * h + hy) * w + wx);
                }
            }
        }
    }
    Ok(IndexMap {
        in_shape: shape.to_vec(),
        out_shape: vec![n, co, ho, wo],
        src,
    })
}

/// Space-to-channel rearrangement; exact inverse of [`pixel_shuffle_map`].
pub fn pixel_unshuffle_map(shape: &[usize], s: ShuffleFactor) -> Result<IndexMap> {
    let [n, c, h, w] = dims4(shape)?;
    let s = s.get();
    if h % s != 0 || w % s != 0 {
        return Err(Error::invalid(format!(
            "pixel_unshuffle: spatial {h}x{w} not divisible by {s}"
        )));
    }
    let (ho, wo, co) = (h / s, w / s, c * s * s);
    let mut src = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for oc in 0..co {
            let (ch, rem) = (oc / (s * s), oc % (s * s));
            let (i, j) = (rem / s, rem % s);
            for y in 0..ho {
                for x in 0..wo {
                    src.push(((b * c + ch) * h + y * s + i) * w + x * s + j);
                }
            }
        }
    }
    Ok(IndexMap {
        in_shape: shape.to_vec(),
        out_shape: vec![n, co, ho, wo],
        src,
    })
}

pub fn nearest_upsample2x_map(shape: &[usize]) -> Result<IndexMap> {
    let [n, c, h, w] = dims4(shape)?;
    let mut src = Vec::with_capacity(n * c * h * w * 4);
    for plane in 0..n * c {
        for y in 0..2 * h {
            for x in 0..2 * w {
                src.push((plane * h + y / 2) * w + x / 2);
            }
        }
    }
    Ok(IndexMap {
        in_shape: shape.to_vec(),
        out_shape: vec![n, c, 2 * h, 2 * w],
        src,
    })
}

/// Originals land on even rows and columns; every other entry is zero.
pub fn zero_interleave2x_map(shape: &[usize]) -> Result<IndexMap> {
    let [n, c, h, w] = dims4(shape)?;
    let mut src = Vec::with_capacity(n * c * h * w * 4);
    for plane in 0..n * c {
        for y in 0..2 * h {
            for x in 0..2 * w {
                src.push(if y % 2 == 0 && x % 2 == 0 {
                    (plane * h + y / 2) * w + x / 2
                } else {
                    IndexMap::ZERO
                });
            }
        }
    }
    Ok(IndexMap {
        in_shape: shape.to_vec(),
        out_shape: vec![n, c, 2 * h, 2 * w],
        src,
    })
}

/// General axis permutation: `out.shape[k] = in.shape[axes[k]]`.
pub fn permute_map(shape: &[usize], axes: &[usize]) -> Result<IndexMap> {
    let nd = shape.len();
    let mut seen = vec![false; nd];
    if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::invalid(format!(
            "invalid permutation {axes:?} for rank {nd}"
        )));
    }
    let mut in_strides = vec![1usize; nd];
    for k in (0..nd.saturating_sub(1)).rev() {
        in_strides[k] = in_strides[k + 1] * shape[k + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total: usize = shape.iter().product();
    let mut src = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    for _ in 0..total {
        src.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for k in (0..nd).rev() {
            idx[k] += 1;
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Ok(IndexMap {
        in_shape: shape.to_vec(),
        out_shape,
        src,
    })
}

fn check_window(h: usize, w: usize, ws: usize) -> Result<()> {
    if ws == 0 || h % ws != 0 || w % ws != 0 {
        return Err(Error::invalid(format!(
            "window size {ws} does not divide spatial size {h}x{w}"
        )));
    }
    Ok(())
}

/// Token grid `[N, H*W, C]` to windows `[N*(H/ws)*(W/ws), ws*ws, C]`.
pub fn window_partition_tokens_map(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    ws: usize,
) -> Result<IndexMap> {
    check_window(h, w, ws)?;
    let (nh, nw) = (h / ws, w / ws);
    let mut src = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for wy in 0..nh {
            for wx in 0..nw {
                for ty in 0..ws {
                    for tx in 0..ws {
                        let tok = (wy * ws + ty) * w + wx * ws + tx;
                        let base = (b * h * w + tok) * c;
                        src.extend(base..base + c);
                    }
                }
            }
        }
    }
    Ok(IndexMap {
        in_shape: vec![n, h * w, c],
        out_shape: vec![n * nh * nw, ws * ws, c],
        src,
    })
}

/// Inverse of [`window_partition_tokens_map`].
pub fn window_reverse_tokens_map(
    windows: usize,
    ws: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Result<IndexMap> {
    check_window(h, w, ws)?;
    let per_image = (h / ws) * (w / ws);
    if windows % per_image != 0 {
        return Err(Error::invalid(format!(
            "{windows} windows are inconsistent with a {h}x{w} grid of {ws}x{ws} windows"
        )));
    }
    let n = windows / per_image;
    let nw = w / ws;
    let mut src = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let win = b * per_image + (y / ws) * nw + x / ws;
                let t = (y % ws) * ws + x % ws;
                let base = (win * ws * ws + t) * c;
                src.extend(base..base + c);
            }
        }
    }
    Ok(IndexMap {
        in_shape: vec![windows, ws * ws, c],
        out_shape: vec![n, h * w, c],
        src,
    })
}

/// Cyclic shift of a token grid `[N, H*W, C]`, matching `torch.roll`
/// on the spatial axes: `out[y][x] = in[(y - dy) mod H][(x - dx) mod W]`.
pub fn roll_tokens_map(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    dy: isize,
    dx: isize,
) -> IndexMap {
    let mut src = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for y in 0..h {
            let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
            for x in 0..w {
                let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
                let base = (b * h * w + sy * w + sx) * c;
                src.extend(base..base + c);
            }
        }
    }
    IndexMap {
        in_shape: vec![n, h * w, c],
        out_shape: vec![n, h * w, c],
        src,
    }
}

/// Mirror index without repeating the edge sample (`reflect` padding).
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflect-pads the spatial axes of `[N, C, H, W]`.
pub fn reflect_pad_map(
    shape: &[usize],
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Result<IndexMap> {
    let [n, c, h, w] = dims4(shape)?;
    let (ho, wo) = (h + top + bottom, w + left + right);
    let mut src = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        for y in 0..ho {
            let sy = reflect_index(y as isize - top as isize, h);
            for x in 0..wo {
                let sx = reflect_index(x as isize - left as isize, w);
                src.push((plane * h + sy) * w + sx);
            }
        }
    }
    Ok(IndexMap {
        in_shape: shape.to_vec(),
        out_shape: vec![n, c, ho, wo],
        src,
    })
}

/// Crops `[N, C, H, W]` to `[N, C, out_h, out_w]` starting at `(top, left)`.
pub fn crop_map(
    shape: &[usize],
    top: usize,
    left: usize,
    out_h: usize,
    out_w: usize,
) -> Result<IndexMap> {
    let [n, c, h, w] = dims4(shape)?;
    if top + out_h > h || left + out_w > w {
        return Err(Error::invalid(format!(
            "crop {out_h}x{out_w}@({top},{left}) exceeds {h}x{w}"
        )));
    }
    let mut src = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        for y in 0..out_h {
            let row = (plane * h + top + y) * w + left;
            src.extend(row..row + out_w);
        }
    }
    Ok(IndexMap {
        in_shape: shape.to_vec(),
        out_shape: vec![n, c, out_h, out_w],
        src,
    })
}

pub fn pixel_shuffle(x: &FeatureMap, s: ShuffleFactor) -> Result<FeatureMap> {
    pixel_shuffle_map(x.shape(), s)?.apply(x)
}

pub fn pixel_unshuffle(x: &FeatureMap, s: ShuffleFactor) -> Result<FeatureMap> {
    pixel_unshuffle_map(x.shape(), s)?.apply(x)
}

pub fn nearest_upsample2x(x: &FeatureMap) -> Result<FeatureMap> {
    nearest_upsample2x_map(x.shape())?.apply(x)
}

pub fn zero_interleave2x(x: &FeatureMap) -> Result<FeatureMap> {
    zero_interleave2x_map(x.shape())?.apply(x)
}

/// `[N, C, H, W]` to windows `[N*(H/ws)*(W/ws), ws*ws, C]`, each window a
/// row-major `ws x ws` tile.
pub fn window_partition(x: &FeatureMap, ws: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let tokens = feature_map_to_tokens(x)?;
    window_partition_tokens_map(n, h, w, c, ws)?.apply(&tokens)
}

/// Inverse of [`window_partition`], producing `[N, C, H, W]`.
pub fn window_reverse(windows: &Tensor, ws: usize, h: usize, w: usize) -> Result<FeatureMap> {
    let [count, tokens, c] = windows.dims3()?;
    if tokens != ws * ws {
        return Err(Error::invalid(format!(
            "windows hold {tokens} tokens, expected {}",
            ws * ws
        )));
    }
    let grid = window_reverse_tokens_map(count, ws, c, h, w)?.apply(windows)?;
    tokens_to_feature_map(&grid, h, w)
}

/// `[N, C, H, W]` to `[N, H*W, C]`.
pub fn feature_map_to_tokens(x: &FeatureMap) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    permute_map(&[n, c, h * w], &[0, 2, 1])?.apply(&x.clone().reshape(&[n, c, h * w])?)
}

/// `[N, H*W, C]` to `[N, C, H, W]`.
pub fn tokens_to_feature_map(t: &Tensor, h: usize, w: usize) -> Result<FeatureMap> {
    let [n, l, c] = t.dims3()?;
    if l != h * w {
        return Err(Error::invalid(format!(
            "{l} tokens cannot form a {h}x{w} grid"
        )));
    }
    permute_map(&[n, l, c], &[0, 2, 1])?
        .apply(t)?
        .reshape(&[n, c, h, w])
}
