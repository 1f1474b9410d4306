//! Finite-difference gradient checks; each returns the worst relative error
//! over parameters and input.

use super::{randomize, uniform};
use hsanet::attention::{EgaConfig, Epga, Esga};
use hsanet::autograd::Var;
use hsanet::gradcheck::{away_from_zero, check_input, check_params, GradReport};
use hsanet::hic::{Hic, HicConfig, MergeMode};
use hsanet::objectives::{denoise_loss, LossConfig};
use hsanet::params::{Bindings, Init, ParamStore};
use hsanet::swin::{SwinBlock, SwinBlockConfig};
use hsanet::{HsaNet, ModelConfig, Tensor};

/// Worst relative error and the tensor it came from.
#[derive(Debug, Clone)]
pub struct Worst {
    pub err: f64,
    pub at: String,
}

impl Worst {
    fn none() -> Self {
        Worst {
            err: 0.0,
            at: String::new(),
        }
    }

    fn take(mut self, what: &str, r: &GradReport) -> Self {
        let w = r.worst().expect("at least one tensor checked");
        if w.rel_err > self.err {
            self.err = w.rel_err;
            self.at = format!("{what}:{}", w.name);
        }
        self
    }
}

fn build<T>(seed: u64, f: impl FnOnce(&mut Init) -> T) -> (T, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = super::rng(seed);
    let m = f(&mut Init::new(&mut store, &mut rng));
    randomize(&mut store, 0.5, seed + 1);
    (m, store)
}

/// Parameter and input gradients of a module forward.
fn module(
    acc: Worst,
    what: &str,
    store: &mut ParamStore,
    x: &Tensor,
    fwd: impl Fn(&Bindings, &Var) -> hsanet::Result<Var>,
) -> Worst {
    let xv = Var::constant(x.clone());
    let r = check_params(store, |p| fwd(p, &xv), None, 3).unwrap();
    let acc = acc.take(&format!("{what} params"), &r);
    let frozen = store.clone();
    let r = check_input(x, |v| fwd(&Bindings::inference(&frozen), v), None, 4).unwrap();
    acc.take(&format!("{what} input"), &r)
}

fn esga_case(gelu: bool) -> (Esga, ParamStore, Tensor) {
    let (m, store) = build(10, |i| Esga::new(i, "g", EgaConfig::new(4, 2, gelu).unwrap()).unwrap());
    (m, store, uniform(&[2, 4, 4, 4], -1.0, 1.0, 11))
}

pub fn channel_attention() -> Worst {
    [false, true].into_iter().fold(Worst::none(), |acc, gelu| {
        let (m, mut store, x) = esga_case(gelu);
        module(acc, "channel_attention", &mut store, &x, |p, v| m.channel_attention(p, v))
    })
}

pub fn spatial_attention() -> Worst {
    [false, true].into_iter().fold(Worst::none(), |acc, gelu| {
        let (m, mut store, x) = esga_case(gelu);
        module(acc, "spatial_attention", &mut store, &x, |p, v| m.spatial_attention(p, v))
    })
}

pub fn esga() -> Worst {
    [false, true].into_iter().fold(Worst::none(), |acc, gelu| {
        let (m, mut store, x) = esga_case(gelu);
        module(acc, "esga", &mut store, &x, |p, v| m.forward(p, v))
    })
}

pub fn epga() -> Worst {
    let (m, mut store) = build(20, |i| Epga::new(i, "e", 4, 2, false).unwrap());
    let x = uniform(&[2, 8, 4, 4], -1.0, 1.0, 21);
    module(Worst::none(), "epga", &mut store, &x, |p, v| m.forward(p, v))
}

pub fn swin_block() -> Worst {
    [(0, true), (2, true), (2, false)]
        .into_iter()
        .fold(Worst::none(), |acc, (shift, use_esga)| {
            let cfg = SwinBlockConfig {
                dim: 8,
                num_heads: 2,
                window: 4,
                shift,
                ega: EgaConfig::new(8, 2, true).unwrap(),
                use_esga,
            };
            let (m, mut store) = build(30 + shift as u64, |i| SwinBlock::new(i, "b", cfg).unwrap());
            let x = uniform(&[1, 64, 8], -1.0, 1.0, 31);
            module(acc, "swin_block", &mut store, &x, |p, v| m.forward(p, v, 8, 8))
        })
}

pub fn hic_expand() -> Worst {
    [MergeMode::Mean, MergeMode::Sum]
        .into_iter()
        .fold(Worst::none(), |acc, merge| {
            let (m, mut store) = build(40, |i| Hic::new(i, "hic", HicConfig::halving(8, merge)).unwrap());
            let x = uniform(&[2, 12, 8], -1.0, 1.0, 41);
            module(acc, "hic_expand", &mut store, &x, |p, v| m.forward(p, v, 3, 4))
        })
}

pub fn denoise_loss_grad() -> Worst {
    let mut rng = super::rng(50);
    let target = uniform(&[2, 1, 6, 7], 0.0, 1.0, 51);
    // Keep |pred - target| away from the kink of |.|.
    let offset = away_from_zero(target.shape(), 0.05, &mut rng);
    let pred = super::add(&target, &offset);
    [0.0, 0.1, 1.0].into_iter().fold(Worst::none(), |acc, lambda| {
        let cfg = LossConfig::with_lambda(lambda);
        let t = Var::constant(target.clone());
        let r = check_input(&pred, |v| Ok(denoise_loss(v, &t, &cfg)?.total), None, 52).unwrap();
        acc.take("denoise_loss", &r)
    })
}

/// Loss gradients of the tiny network w.r.t. a few coordinates of every
/// parameter tensor, and output gradients w.r.t. the input image.
pub fn tiny_network() -> Worst {
    let cfg = ModelConfig::tiny();
    let (net, mut store) = HsaNet::build(&cfg).unwrap();
    randomize(&mut store, 0.3, 60);
    let x = uniform(&[1, 1, 8, 8], 0.0, 1.0, 61);
    let target = Var::constant(uniform(&[1, 1, 8, 8], 0.0, 1.0, 62));
    let loss_cfg = LossConfig::default();
    let xv = Var::constant(x.clone());
    let r = check_params(
        &mut store,
        |p| Ok(denoise_loss(&net.forward(p, &xv)?, &target, &loss_cfg)?.total),
        Some(6),
        63,
    )
    .unwrap();
    let acc = Worst::none().take("loss/params", &r);
    let frozen = store.clone();
    let r = check_input(&x, |v| net.forward(&Bindings::inference(&frozen), v), None, 64).unwrap();
    acc.take("output/input", &r)
}
