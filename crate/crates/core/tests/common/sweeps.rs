//! Forward operators against the naive oracles, swept over seeds. Each
//! sweep records the worst absolute error per operator.

use std::collections::BTreeMap;

use super::{max_abs_diff, randomize, uniform, P};
use hsanet::attention::{EgaConfig, Epga, Esga};
use hsanet::autograd::Var;
use hsanet::eval;
use hsanet::hic::{Hic, HicConfig, LinearExpand, MergeMode};
use hsanet::layers::{Conv2d, LayerNorm, Linear};
use hsanet::model::Toggles;
use hsanet::objectives::{denoise_loss_value, sobel_maps, LossConfig};
use hsanet::params::{Bindings, Init, ParamStore};
use hsanet::swin::{PatchEmbed, PatchMerging, SwinBlock, SwinBlockConfig};
use hsanet::tensor_ops::{self, ShuffleFactor};
use hsanet::{HsaNet, ModelConfig, Tensor};

pub const SEEDS: u64 = 20;

#[derive(Debug, Default)]
pub struct Sweep {
    /// Operator name to (worst error, seed it occurred at, cases run).
    pub worst: BTreeMap<&'static str, (f64, u64, usize)>,
}

impl Sweep {
    pub fn scalar(&mut self, what: &'static str, seed: u64, got: f64, want: f64) {
        let d = if got == want { 0.0 } else { (got - want).abs() };
        let d = if d.is_nan() { f64::INFINITY } else { d };
        let e = self.worst.entry(what).or_insert((0.0, seed, 0));
        e.2 += 1;
        if d > e.0 {
            e.0 = d;
            e.1 = seed;
        }
    }

    pub fn tensor(&mut self, what: &'static str, seed: u64, got: &Tensor, want: &Tensor) {
        let d = if got.shape() == want.shape() { max_abs_diff(got, want) } else { f64::INFINITY };
        self.scalar(what, seed, d, 0.0);
    }

    pub fn max(&self) -> f64 {
        self.worst.values().map(|w| w.0).fold(0.0, f64::max)
    }

    pub fn assert_below(&self, tol: f64) {
        for (what, (err, seed, n)) in &self.worst {
            assert!(*err < tol, "{what} seed {seed}: max |diff| = {err:e} over {n} cases");
        }
    }
}

fn build<T>(seed: u64, f: impl FnOnce(&mut Init) -> T) -> (T, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = super::rng(seed);
    let m = f(&mut Init::new(&mut store, &mut rng));
    randomize(&mut store, 0.5, seed ^ 0xabcd);
    (m, store)
}

fn run(x: &Tensor, f: impl FnOnce(&Var) -> hsanet::Result<Var>) -> Tensor {
    f(&Var::constant(x.clone())).unwrap().value().clone()
}


pub fn conv2d(s: &mut Sweep) {
    for seed in 0..SEEDS {
        let k = [1, 3, 5][seed as usize % 3];
        let (conv, store) = build(seed, |i| Conv2d::new(i, "c", 3, 4, k).unwrap());
        let x = uniform(&[2, 3, 7, 6], -1.0, 1.0, seed);
        let got = run(&x, |v| conv.forward(&Bindings::inference(&store), v));
        s.tensor("conv2d", seed, &got, &super::conv(&P::root(&store).at("c"), &x));
    }
}

pub fn linear_and_layer_norm(s: &mut Sweep) {
    for seed in 0..SEEDS {
        let ((lin, ln), store) = build(seed, |i| {
            (Linear::new(i, "lin", 5, 7, seed % 2 == 0).unwrap(), LayerNorm::new(i, "ln", 7).unwrap())
        });
        let p = Bindings::inference(&store);
        let x = uniform(&[3, 4, 5], -2.0, 2.0, seed);
        let got = run(&x, |v| ln.forward(&p, &lin.forward(&p, v)?));
        let root = P::root(&store);
        let want = super::layer_norm(&root.at("ln"), &super::linear(&root.at("lin"), &x));
        s.tensor("linear+layer_norm", seed, &got, &want);

        let m = uniform(&[2, 5, 3, 4], -1.0, 1.0, seed + 100);
        let got = run(&m, |v| lin.forward_channels(&p, v));
        s.tensor("linear_channels", seed, &got, &super::linear_channels(&root.at("lin"), &m));
    }
}

pub fn elementwise_and_softmax(s: &mut Sweep) {
    for seed in 0..SEEDS {
        let x = uniform(&[4, 9], -4.0, 4.0, seed);
        s.tensor("gelu", seed, &run(&x, |v| Ok(v.gelu())), &super::map(&x, super::gelu));
        s.tensor("sigmoid", seed, &run(&x, |v| Ok(v.sigmoid())), &super::map(&x, super::sigmoid));
        let mut want = x.clone();
        for row in want.data_mut().chunks_mut(9) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for v in row.iter_mut() {
                *v = v.exp() / z;
            }
        }
        s.tensor("softmax", seed, &run(&x, |v| Ok(v.softmax())), &want);
    }
}

pub fn rearrangements(s: &mut Sweep) {
    for seed in 0..SEEDS {
        let k = 1 + seed as usize % 3;
        let x = uniform(&[2, 2 * k * k, 3, 2], -1.0, 1.0, seed);
        let f = ShuffleFactor::new(k).unwrap();
        s.tensor("pixel_shuffle", seed, &tensor_ops::pixel_shuffle(&x, f).unwrap(), &super::pixel_shuffle(&x, k));
        let y = uniform(&[2, 3, 2 * k, 3 * k], -1.0, 1.0, seed);
        s.tensor("pixel_unshuffle", seed, &tensor_ops::pixel_unshuffle(&y, f).unwrap(), &super::pixel_unshuffle(&y, k));
        s.tensor("nearest2x", seed, &tensor_ops::nearest_upsample2x(&y).unwrap(), &super::nearest2x(&y));
        s.tensor("zero_interleave2x", seed, &tensor_ops::zero_interleave2x(&y).unwrap(), &super::zero_interleave2x(&y));
        let ws = 1 + seed as usize % 3;
        let g = uniform(&[2, 3, 2 * ws, 3 * ws], -1.0, 1.0, seed);
        s.tensor("window_partition", seed, &tensor_ops::window_partition(&g, ws).unwrap(), &super::window_partition(&g, ws));
        let (t, b, l, r) = (seed as usize % 3, 1 + seed as usize % 2, 2, seed as usize % 4);
        let got = run(&g, |v| v.gather(std::rc::Rc::new(tensor_ops::reflect_pad_map(v.shape(), t, b, l, r)?)));
        s.tensor("reflect_pad", seed, &got, &super::reflect_pad(&g, t, b, l, r));
        let tok = tensor_ops::feature_map_to_tokens(&g).unwrap();
        s.tensor("to_tokens", seed, &tok, &super::to_tokens(&g));
    }
}

pub fn gates(s: &mut Sweep) {
    for seed in 0..SEEDS {
        let gelu = seed % 2 == 1;
        let (esga, store) = build(seed, |i| Esga::new(i, "g", EgaConfig::new(8, 2, gelu).unwrap()).unwrap());
        let p = Bindings::inference(&store);
        let root = P::root(&store).at("g");
        let x = uniform(&[2, 8, 4, 6], -1.5, 1.5, seed);
        s.tensor(
            "channel_attention",
            seed,
            &run(&x, |v| esga.channel_attention(&p, v)),
            &super::channel_attention(&root, &x, gelu),
        );
        s.tensor(
            "spatial_attention",
            seed,
            &run(&x, |v| esga.spatial_attention(&p, v)),
            &super::spatial_attention(&root, &x, gelu),
        );
        s.tensor("esga", seed, &run(&x, |v| esga.forward(&p, v)), &super::esga(&root, &x, gelu));

        let (epga, store) = build(seed, |i| Epga::new(i, "e", 4, 2, gelu).unwrap());
        let p = Bindings::inference(&store);
        let xc = uniform(&[2, 8, 4, 4], -1.5, 1.5, seed + 7);
        s.tensor(
            "epga",
            seed,
            &run(&xc, |v| epga.forward(&p, v)),
            &super::epga(&P::root(&store).at("e"), &xc, gelu),
        );
    }
}

pub fn swin_block(s: &mut Sweep) {
    for seed in 0..SEEDS {
        let heads = [1, 2, 4][seed as usize % 3];
        let window = [2, 4][seed as usize % 2];
        let shift = if seed % 4 < 2 { window / 2 } else { 0 };
        let use_esga = seed % 5 != 0;
        let cfg = SwinBlockConfig {
            dim: 8,
            num_heads: heads,
            window,
            shift,
            ega: EgaConfig::new(8, 2, true).unwrap(),
            use_esga,
        };
        let (block, store) = build(seed, |i| SwinBlock::new(i, "b", cfg).unwrap());
        let p = Bindings::inference(&store);
        // Includes grids no larger than the window (single unshifted window).
        let (h, w) = [(8, 8), (4, 8), (8, 12), (2, 2)][seed as usize % 4];
        let h = h.max(window);
        let w = w.max(window);
        let x = uniform(&[2, h * w, 8], -1.0, 1.0, seed);
        let shape = super::BlockShape { heads, window, shift };
        let want = super::swin_block(&P::root(&store).at("b"), &x, h, w, &shape);
        s.tensor("swin_block", seed, &run(&x, |v| block.forward(&p, v, h, w)), &want);
    }
}

pub fn embed_merge_and_expanders(s: &mut Sweep) {
    for seed in 0..SEEDS {
        let patch = 1 + seed as usize % 2;
        let ((embed, merge, hic, lin), store) = build(seed, |i| {
            (
                PatchEmbed::new(i, "embed", 3, 8, patch).unwrap(),
                PatchMerging::new(i, "merge", 8).unwrap(),
                Hic::new(i, "hic", HicConfig::halving(8, MergeMode::Mean)).unwrap(),
                LinearExpand::new(i, "lin", 8).unwrap(),
            )
        });
        let p = Bindings::inference(&store);
        let root = P::root(&store);
        let x = uniform(&[2, 3, 4 * patch, 6 * patch], -1.0, 1.0, seed);
        s.tensor(
            "patch_embed",
            seed,
            &run(&x, |v| embed.forward(&p, v)),
            &super::patch_embed(&root.at("embed"), &x, patch),
        );
        let t = uniform(&[2, 24, 8], -1.0, 1.0, seed + 1);
        s.tensor(
            "patch_merge",
            seed,
            &run(&t, |v| merge.forward(&p, v, 4, 6)),
            &super::patch_merge(&root.at("merge"), &t, 4, 6),
        );
        s.tensor(
            "hic",
            seed,
            &run(&t, |v| hic.forward_grid(&p, v, 4, 6)),
            &super::hic_grid(&root.at("hic"), &t, 4, 6),
        );
        s.tensor(
            "linear_expand",
            seed,
            &run(&t, |v| lin.forward(&p, v, 4, 6)),
            &super::linear_expand(&root.at("lin"), &t, 4, 6),
        );
    }
}

pub fn objective(s: &mut Sweep) {
    for seed in 0..SEEDS {
        let a = uniform(&[2, 1, 5 + seed as usize % 3, 6], 0.0, 1.0, seed);
        let b = uniform(a.shape(), 0.0, 1.0, seed + 50);
        s.tensor("sobel", seed, &sobel_maps(&a).unwrap(), &super::sobel(&a));
        let lambda = [0.0, 0.1, 0.5, 1.0][seed as usize % 4];
        let (t, m, e) = denoise_loss_value(&a, &b, &LossConfig::with_lambda(lambda)).unwrap();
        let (ot, om, oe) = super::denoise_loss(&a, &b, lambda);
        s.scalar("loss_total", seed, t, ot);
        s.scalar("loss_mae", seed, m, om);
        s.scalar("loss_edge", seed, e, oe);
    }
}

pub fn metrics(s: &mut Sweep) {
    for seed in 0..SEEDS {
        let a = uniform(&[16, 16], 0.0, 1.0, seed);
        let b = zip_noise(&a, seed);
        let psnr = eval::psnr(&a, &b, 1.0).unwrap();
        s.scalar("psnr", seed, psnr, super::psnr(&a, &b, 1.0));
        let ssim = eval::ssim(&a, &b, 1.0).unwrap();
        let want = super::ssim_plane(a.data(), b.data(), 16, 16, 1.0);
        s.scalar("ssim", seed, ssim, want);
    }
}

fn zip_noise(a: &Tensor, seed: u64) -> Tensor {
    let n = uniform(a.shape(), -0.1, 0.1, seed + 999);
    super::zip(a, &n, |x, e| (x + e).clamp(0.0, 1.0))
}

fn tiny_variant(seed: u64) -> (ModelConfig, super::ModelShape) {
    let t = Toggles {
        esga: seed % 2 == 0,
        epga: seed % 3 != 0,
        hic: seed % 4 != 1,
        texture_mlp: seed % 5 != 2,
    };
    let cfg = ModelConfig {
        toggles: t,
        seed,
        patch_size: if seed % 7 == 3 { 2 } else { 1 },
        ..ModelConfig::tiny()
    };
    let shape = super::ModelShape {
        stages: cfg.stages(),
        depths: cfg.depths.clone(),
        heads: cfg.heads.clone(),
        window: cfg.window_size,
        patch: cfg.patch_size,
        esga: t.esga,
        epga: t.epga,
        hic: t.hic,
        texture: t.texture_mlp,
    };
    (cfg, shape)
}

pub fn whole_network(s: &mut Sweep) {
    for seed in 0..SEEDS {
        let (cfg, shape) = tiny_variant(seed);
        let (net, mut store) = HsaNet::build(&cfg).unwrap();
        randomize(&mut store, 0.3, seed);
        let (h, w) = [(16, 16), (13, 10), (9, 17)][seed as usize % 3];
        let x = uniform(&[1, 1, h, w], 0.0, 1.0, seed);
        let got = net.denoise(&store, &x).unwrap();
        let want = super::model(&P::root(&store), &x, &shape);
        s.tensor("model", seed, &got, &want);
    }
}
