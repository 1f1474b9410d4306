//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Var`] is a reference-counted node holding its forward value and, when
//! any input requires a gradient, the operation that produced it. Nodes that
//! need no gradient keep no parents, so inference graphs free intermediate
//! activations as soon as they go out of scope.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;
use crate::tensor_ops::IndexMap;

pub const LAYER_NORM_EPS: f64 = 1e-5;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

struct Node {
    id: u64,
    value: Tensor,
    op: Option<Op>,
    leaf_key: Option<usize>,
}

enum Op {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddSuffix(Var, Var),
    Gather(Var, Rc<IndexMap>),
    Reshape(Var),
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        inner_a: usize,
        inner_b: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    Bmm {
        a: Var,
        b: Var,
        dims: [usize; 4],
        trans_b: bool,
    },
    Mean(Var),
}

impl Op {
    fn parents(&self) -> Vec<&Var> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddSuffix(a, b) => vec![a, b],
            Op::Concat { a, b, .. } | Op::Bmm { a, b, .. } => vec![a, b],
            Op::Scale(a, _)
            | Op::Gather(a, _)
            | Op::Reshape(a)
            | Op::Sigmoid(a)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::Softmax(a)
            | Op::Mean(a) => vec![a],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b.iter());
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
        }
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

impl Var {
    fn make(value: Tensor, op: Op) -> Var {
        let needs = op.parents().iter().any(|p| p.requires_grad());
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op: needs.then_some(op),
            leaf_key: None,
        }))
    }

    /// A value that never receives a gradient.
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op: None,
            leaf_key: None,
        }))
    }

    /// A gradient-tracked leaf; its gradient is reported under `key`.
    pub fn leaf(value: Tensor, key: usize) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op: None,
            leaf_key: Some(key),
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.op.is_some() || self.0.leaf_key.is_some()
    }

    fn same_shape(&self, other: &Var, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "add")?;
        let v = self.value().zip_map(other.value(), |a, b| a + b)?;
        Ok(Var::make(v, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "sub")?;
        let v = self.value().zip_map(other.value(), |a, b| a - b)?;
        Ok(Var::make(v, Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "mul")?;
        let v = self.value().zip_map(other.value(), |a, b| a * b)?;
        Ok(Var::make(v, Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, k: f64) -> Var {
        Var::make(self.value().map(|a| a * k), Op::Scale(self.clone(), k))
    }

    /// Adds `y` tiled over the leading axes of `self`; `y.shape` must be a
    /// suffix of `self.shape`.
    pub fn add_suffix(&self, y: &Var) -> Result<Var> {
        let (xs, ys) = (self.shape(), y.shape());
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(Error::invalid(format!(
                "add_suffix: {ys:?} is not a suffix of {xs:?}"
            )));
        }
        let yd = y.value().data();
        let n = yd.len();
        let mut v = self.value().clone();
        for chunk in v.data_mut().chunks_mut(n) {
            for (a, b) in chunk.iter_mut().zip(yd) {
                *a += b;
            }
        }
        Ok(Var::make(v, Op::AddSuffix(self.clone(), y.clone())))
    }

    pub fn gather(&self, map: Rc<IndexMap>) -> Result<Var> {
        let v = map.apply(self.value())?;
        Ok(Var::make(v, Op::Gather(self.clone(), map)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value().clone().reshape(shape)?;
        Ok(Var::make(v, Op::Reshape(self.clone())))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&self, other: &Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != sb.len()
            || axis >= sa.len()
            || sa.iter().zip(sb).enumerate().any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::invalid(format!(
                "concat: incompatible shapes {sa:?} and {sb:?} on axis {axis}"
            )));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner_a: usize = sa[axis..].iter().product();
        let inner_b: usize = sb[axis..].iter().product();
        let (da, db) = (self.value().data(), other.value().data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            data.extend_from_slice(&da[o * inner_a..(o + 1) * inner_a]);
            data.extend_from_slice(&db[o * inner_b..(o + 1) * inner_b]);
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let v = Tensor::new(&shape, data)?;
        Ok(Var::make(
            v,
            Op::Concat {
                a: self.clone(),
                b: other.clone(),
                outer,
                inner_a,
                inner_b,
            },
        ))
    }

    /// Affine map over the last axis: `x @ w + b`, `w: [in, out]`.
    pub fn linear(&self, w: &Var, b: Option<&Var>) -> Result<Var> {
        let xs = self.shape();
        let (k, o) = match w.shape() {
            [k, o] => (*k, *o),
            s => return Err(Error::invalid(format!("linear weight must be 2-D, got {s:?}"))),
        };
        if xs.last() != Some(&k) {
            return Err(Error::invalid(format!(
                "linear: input {xs:?} does not end in {k}"
            )));
        }
        if let Some(b) = b {
            if b.shape() != [o] {
                return Err(Error::invalid(format!(
                    "linear bias {:?} does not match width {o}",
                    b.shape()
                )));
            }
        }
        let y = kernels::linear_forward(
            self.value().data(),
            w.value().data(),
            b.map(|b| b.value().data()),
            k,
            o,
        );
        let mut shape = xs.to_vec();
        *shape.last_mut().expect("non-empty") = o;
        Ok(Var::make(
            Tensor::new(&shape, y)?,
            Op::Linear {
                x: self.clone(),
                w: w.clone(),
                b: b.cloned(),
            },
        ))
    }

    /// Stride-1 convolution of `[N, Ci, H, W]` with `w: [Co, Ci, k, k]`,
    /// zero-padded by `pad` on every side.
    pub fn conv2d(&self, w: &Var, b: Option<&Var>, pad: usize) -> Result<Var> {
        let [n, ci, h, wd] = self.value().dims4()?;
        let (co, k) = match w.shape() {
            [co, wci, k1, k2] if *wci == ci && k1 == k2 => (*co, *k1),
            s => {
                return Err(Error::invalid(format!(
                    "conv2d weight {s:?} incompatible with {ci} input channels"
                )))
            }
        };
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::invalid(format!(
                "conv2d: {h}x{wd} input too small for kernel {k} with pad {pad}"
            )));
        }
        if let Some(b) = b {
            if b.shape() != [co] {
                return Err(Error::invalid("conv2d bias width mismatch"));
            }
        }
        let geom = ConvGeom { n, ci, co, h, w: wd, k, pad };
        let (ho, wo) = geom.out_hw();
        let y = kernels::conv2d_forward(
            self.value().data(),
            w.value().data(),
            b.map(|b| b.value().data()),
            geom,
        );
        Ok(Var::make(
            Tensor::new(&[n, co, ho, wo], y)?,
            Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                b: b.cloned(),
                geom,
            },
        ))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var) -> Result<Var> {
        let d = *self.shape().last().ok_or_else(|| Error::invalid("layer_norm on scalar"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::invalid(format!(
                "layer_norm affine parameters must be [{d}]"
            )));
        }
        let x = self.value().data();
        let (gm, bt) = (gamma.value().data(), beta.value().data());
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                y[r * d + j] = xh * gm[j] + bt[j];
            }
        }
        Ok(Var::make(
            Tensor::new(self.shape(), y)?,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                rstd,
            },
        ))
    }

    pub fn sigmoid(&self) -> Var {
        Var::make(self.value().map(sigmoid), Op::Sigmoid(self.clone()))
    }

    pub fn gelu(&self) -> Var {
        Var::make(self.value().map(gelu), Op::Gelu(self.clone()))
    }

    pub fn relu(&self) -> Var {
        Var::make(self.value().map(|v| v.max(0.0)), Op::Relu(self.clone()))
    }

    pub fn abs(&self) -> Var {
        Var::make(self.value().map(f64::abs), Op::Abs(self.clone()))
    }

    pub fn square(&self) -> Var {
        Var::make(self.value().map(|v| v * v), Op::Square(self.clone()))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var {
        let d = *self.shape().last().expect("softmax on scalar");
        let mut v = self.value().clone();
        for row in v.data_mut().chunks_mut(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                s += *e;
            }
            for e in row.iter_mut() {
                *e /= s;
            }
        }
        Var::make(v, Op::Softmax(self.clone()))
    }

    /// Batched matrix product over the leading axis: `[B, M, K] @ [B, K, N]`,
    /// or `[B, M, K] @ [B, N, K]^T` when `trans_b`.
    pub fn bmm(&self, other: &Var, trans_b: bool) -> Result<Var> {
        let [ba, m, k] = self.value().dims3()?;
        let [bb, r, c] = other.value().dims3()?;
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if ba != bb || kb != k {
            return Err(Error::invalid(format!(
                "bmm: {:?} x {:?} (trans_b={trans_b}) is not defined",
                self.shape(),
                other.shape()
            )));
        }
        let out = kernels::bmm(self.value().data(), other.value().data(), ba, m, k, n, trans_b);
        Ok(Var::make(
            Tensor::new(&[ba, m, n], out)?,
            Op::Bmm {
                a: self.clone(),
                b: other.clone(),
                dims: [ba, m, k, n],
                trans_b,
            },
        ))
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&self) -> Var {
        Var::make(Tensor::scalar(self.value().mean()), Op::Mean(self.clone()))
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self) -> Result<Gradients> {
        if self.value().numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        let mut nodes: Vec<Rc<Node>> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.0.clone()];
        while let Some(n) = stack.pop() {
            if !seen.insert(n.id) {
                continue;
            }
            if let Some(op) = &n.op {
                for p in op.parents() {
                    if p.requires_grad() && !seen.contains(&p.0.id) {
                        stack.push(p.0.clone());
                    }
                }
            }
            nodes.push(n);
        }
        nodes.sort_by(|a, b| b.id.cmp(&a.id));

        let mut grads: HashMap<u64, Tensor> = HashMap::new();
        grads.insert(self.0.id, Tensor::full(self.shape(), 1.0));
        let mut out = Gradients::default();
        for node in nodes {
            let Some(g) = grads.remove(&node.id) else {
                continue;
            };
            if let Some(key) = node.leaf_key {
                out.insert(key, g);
                continue;
            }
            let Some(op) = &node.op else { continue };
            for (parent, pg) in backward_op(op, &node.value, &g)? {
                if !parent.requires_grad() {
                    continue;
                }
                match grads.get_mut(&parent.0.id) {
                    Some(acc) => acc.add_assign(&pg),
                    None => {
                        grads.insert(parent.0.id, pg);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Leaf gradients keyed by the leaf's key.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: HashMap<usize, Tensor>,
}

impl Gradients {
    fn insert(&mut self, key: usize, g: Tensor) {
        match self.map.get_mut(&key) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.map.insert(key, g);
            }
        }
    }

    pub fn get(&self, key: usize) -> Option<&Tensor> {
        self.map.get(&key)
    }

    pub fn take(&mut self, key: usize) -> Option<Tensor> {
        self.map.remove(&key)
    }
}

fn elementwise(x: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    x.zip_map(g, f).expect("gradient shape matches value")
}

fn backward_op(op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
    Ok(match op {
        Op::Add(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.clone())],
        Op::Sub(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.map(|v| -v))],
        Op::Mul(a, b) => vec![
            (a.clone(), elementwise(b.value(), g, |bv, gv| bv * gv)),
            (b.clone(), elementwise(a.value(), g, |av, gv| av * gv)),
        ],
        Op::Scale(a, k) => vec![(a.clone(), g.map(|v| v * k))],
        Op::AddSuffix(x, y) => {
            let mut gy = Tensor::zeros(y.shape());
            let n = gy.numel();
            {
                let d = gy.data_mut();
                for chunk in g.data().chunks(n) {
                    for (a, b) in d.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
            }
            vec![(x.clone(), g.clone()), (y.clone(), gy)]
        }
        Op::Gather(x, map) => vec![(x.clone(), map.adjoint(g))],
        Op::Reshape(x) => vec![(x.clone(), g.clone().reshape(x.shape())?)],
        Op::Concat {
            a,
            b,
            outer,
            inner_a,
            inner_b,
        } => {
            let gd = g.data();
            let mut ga = Vec::with_capacity(outer * inner_a);
            let mut gb = Vec::with_capacity(outer * inner_b);
            let stride = inner_a + inner_b;
            for o in 0..*outer {
                ga.extend_from_slice(&gd[o * stride..o * stride + inner_a]);
                gb.extend_from_slice(&gd[o * stride + inner_a..(o + 1) * stride]);
            }
            vec![
                (a.clone(), Tensor::new(a.shape(), ga)?),
                (b.clone(), Tensor::new(b.shape(), gb)?),
            ]
        }
        Op::Linear { x, w, b } => {
            let [k, o] = [w.shape()[0], w.shape()[1]];
            let (dx, dw, db) = kernels::linear_backward(x.value().data(), w.value().data(), g.data(), k, o);
            let mut v = vec![
                (x.clone(), Tensor::new(x.shape(), dx)?),
                (w.clone(), Tensor::new(w.shape(), dw)?),
            ];
            if let Some(b) = b {
                v.push((b.clone(), Tensor::new(b.shape(), db)?));
            }
            v
        }
        Op::Conv2d { x, w, b, geom } => {
            let need_dx = x.requires_grad();
            let (dx, dw, db) = kernels::conv2d_backward(x.value().data(), w.value().data(), g.data(), *geom, need_dx);
            let mut v = vec![(w.clone(), Tensor::new(w.shape(), dw)?)];
            if need_dx {
                v.push((x.clone(), Tensor::new(x.shape(), dx)?));
            }
            if let Some(b) = b {
                v.push((b.clone(), Tensor::new(b.shape(), db)?));
            }
            v
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = gamma.shape()[0];
            let gm = gamma.value().data();
            let gd = g.data();
            let mut dx = vec![0.0; gd.len()];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for (r, &rs) in rstd.iter().enumerate() {
                let gr = &gd[r * d..(r + 1) * d];
                let xr = &xhat[r * d..(r + 1) * d];
                let mut sum_gx = 0.0;
                let mut sum_gxx = 0.0;
                for j in 0..d {
                    let gh = gr[j] * gm[j];
                    sum_gx += gh;
                    sum_gxx += gh * xr[j];
                    dgamma[j] += gr[j] * xr[j];
                    dbeta[j] += gr[j];
                }
                let inv_d = 1.0 / d as f64;
                for j in 0..d {
                    let gh = gr[j] * gm[j];
                    dx[r * d + j] = rs * (gh - inv_d * sum_gx - xr[j] * inv_d * sum_gxx);
                }
            }
            vec![
                (x.clone(), Tensor::new(x.shape(), dx)?),
                (gamma.clone(), Tensor::new(&[d], dgamma)?),
                (beta.clone(), Tensor::new(&[d], dbeta)?),
            ]
        }
        Op::Sigmoid(x) => vec![(x.clone(), elementwise(out, g, |y, gv| gv * y * (1.0 - y)))],
        Op::Gelu(x) => vec![(
            x.clone(),
            elementwise(x.value(), g, |v, gv| gv * (std_normal_cdf(v) + v * std_normal_pdf(v))),
        )],
        Op::Relu(x) => vec![(
            x.clone(),
            elementwise(x.value(), g, |v, gv| if v > 0.0 { gv } else { 0.0 }),
        )],
        // Subgradient of |x| at 0 is taken as 0.
        Op::Abs(x) => vec![(
            x.clone(),
            elementwise(x.value(), g, |v, gv| {
                if v > 0.0 {
                    gv
                } else if v < 0.0 {
                    -gv
                } else {
                    0.0
                }
            }),
        )],
        Op::Square(x) => vec![(x.clone(), elementwise(x.value(), g, |v, gv| 2.0 * v * gv))],
        Op::Softmax(x) => {
            let d = *out.shape().last().expect("non-empty");
            let mut dx = g.clone();
            for (dr, yr) in dx.data_mut().chunks_mut(d).zip(out.data().chunks(d)) {
                let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for (dv, &yv) in dr.iter_mut().zip(yr) {
                    *dv = yv * (*dv - dot);
                }
            }
            vec![(x.clone(), dx)]
        }
        Op::Bmm {
            a,
            b,
            dims: [batch, m, k, n],
            trans_b,
        } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let gd = g.data();
            // dA = G @ B^T, with B stored [k, n] (or [n, k] when transposed).
            let da = if *trans_b {
                kernels::bmm(gd, b.value().data(), batch, m, n, k, false)
            } else {
                kernels::bmm(gd, b.value().data(), batch, m, n, k, true)
            };
            let db = if *trans_b {
                // dB[n, k] = G^T @ A
                kernels::bmm_tn(gd, a.value().data(), batch, n, m, k)
            } else {
                kernels::bmm_tn(a.value().data(), gd, batch, k, m, n)
            };
            vec![
                (a.clone(), Tensor::new(a.shape(), da)?),
                (b.clone(), Tensor::new(b.shape(), db)?),
            ]
        }
        Op::Mean(x) => {
            let n = x.value().numel() as f64;
            vec![(x.clone(), Tensor::full(x.shape(), g.data()[0] / n))]
        }
    })
}
