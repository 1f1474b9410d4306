//! Central finite-difference gradient checking.
//!
//! The scalar probed is `Σ wᵢ·outᵢ` with fixed random weights `w`, so every
//! output element contributes a distinct direction. Error is reported per
//! tensor as `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` over the checked coordinates.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        return 0.0;
    }
    let r = norm(&diff) / scale;
    if r.is_nan() {
        f64::INFINITY
    } else {
        r
    }
}

/// Fixed random projection turning an output tensor into a scalar.
pub struct Projection {
    weights: Tensor,
}

impl Projection {
    pub fn new(shape: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Projection {
            weights: Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng),
        }
    }

    pub fn apply(&self, out: &Var) -> Result<Var> {
        if out.value().numel() == 1 && self.weights.numel() == 1 {
            return Ok(out.scale(self.weights.data()[0]));
        }
        out.mul(&Var::constant(self.weights.clone()))
            .map(|v| v.mean().scale(self.weights.numel() as f64))
    }

    pub fn value(&self, out: &Tensor) -> f64 {
        out.data().iter().zip(self.weights.data()).map(|(a, b)| a * b).sum()
    }
}

fn pick(len: usize, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut v = sample(rng, len, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Checks gradients of `f` with respect to the parameters in `store`
/// (at most `per_tensor` random coordinates of each).
pub fn check_params(
    store: &mut ParamStore,
    f: impl Fn(&Bindings) -> Result<Var>,
    per_tensor: Option<usize>,
    seed: u64,
) -> Result<GradReport> {
    let out_shape = f(&Bindings::inference(store))?.shape().to_vec();
    let proj = Projection::new(&out_shape, seed);
    let grads = {
        let p = Bindings::tracked(store);
        proj.apply(&f(&p)?)?.backward()?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut report = GradReport::default();
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.value(id).numel();
        let idx = pick(n, per_tensor, &mut rng);
        let analytic_full = grads.get(id.index()).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = proj.value(f(&Bindings::inference(store))?.value());
            store.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = proj.value(f(&Bindings::inference(store))?.value());
            store.value_mut(id).data_mut()[i] = orig;
            analytic.push(analytic_full.data()[i]);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        report.tensors.push(TensorCheck {
            name: store.name(id).to_string(),
            checked: idx.len(),
            rel_err: rel_err(&analytic, &numeric),
        });
    }
    Ok(report)
}

/// Checks gradients of `f` with respect to its input tensor.
pub fn check_input(x: &Tensor, f: impl Fn(&Var) -> Result<Var>, per_tensor: Option<usize>, seed: u64) -> Result<GradReport> {
    const KEY: usize = usize::MAX - 1;
    let out_shape = f(&Var::constant(x.clone()))?.shape().to_vec();
    let proj = Projection::new(&out_shape, seed);
    let grads = proj.apply(&f(&Var::leaf(x.clone(), KEY))?)?.backward()?;
    let analytic_full = grads
        .get(KEY)
        .cloned()
        .ok_or_else(|| Error::invalid("input does not influence the output"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ed_270b);
    let idx = pick(x.numel(), per_tensor, &mut rng);
    let mut xm = x.clone();
    let mut analytic = Vec::with_capacity(idx.len());
    let mut numeric = Vec::with_capacity(idx.len());
    for &i in &idx {
        let orig = xm.data()[i];
        xm.data_mut()[i] = orig + FD_STEP;
        let up = proj.value(f(&Var::constant(xm.clone()))?.value());
        xm.data_mut()[i] = orig - FD_STEP;
        let down = proj.value(f(&Var::constant(xm.clone()))?.value());
        xm.data_mut()[i] = orig;
        analytic.push(analytic_full.data()[i]);
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(GradReport {
        tensors: vec![TensorCheck {
            name: "input".into(),
            checked: idx.len(),
            rel_err: rel_err(&analytic, &numeric),
        }],
    })
}

/// Random tensor with entries bounded away from zero by `margin`, for
/// probing functions with a kink at zero.
pub fn away_from_zero<R: Rng + ?Sized>(shape: &[usize], margin: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(margin..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}
