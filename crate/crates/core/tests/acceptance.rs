//! Acceptance report: one PASS/FAIL line per criterion, exit status 1 if any
//! fails. Runs as a plain binary (`harness = false`).

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::fd;
use common::sweeps::{self, Sweep};
use hsanet::cli::{ablation_grid, cmd_ablate, GlobalArgs, LAMBDA_GRID, TOGGLE_GRID};
use hsanet::data::synthetic::{synthetic_dataset, synthetic_pair, NoiseModel, SyntheticConfig};
use hsanet::data::{PatchBatch, PatchCoord};
use hsanet::eval::{self, evaluate, Averaging, Source};
use hsanet::objectives::{denoise_loss_value, LossConfig};
use hsanet::tensor_ops::{self, ShuffleFactor};
use hsanet::train::{poly_lr, train_loop, BatchSource, TrainConfig, Trainer};
use hsanet::{HsaNet, ModelConfig, Tensor};

// Parameter budget.
const TARGET_PARAMS: f64 = 610_000.0;
const PARAM_REL_TOL: f64 = 0.15;
const PARAM_BUDGET: Duration = Duration::from_secs(5);

// Gradient checks.
const OP_GRAD_TOL: f64 = 1e-4;
const MODEL_GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(300);

// Oracle sweeps.
const ORACLE_TOL: f64 = 1e-6;
const MIN_SEEDS: usize = 20;
const ORACLE_BUDGET: Duration = Duration::from_secs(120);

// Overfit harness.
const OVERFIT_PAIRS: usize = 8;
const OVERFIT_SIZE: usize = 64;
const OVERFIT_STEPS: u64 = 200;
const OVERFIT_SIGMA: f64 = 0.1;
const OVERFIT_RATIO: f64 = 0.5;
const OVERFIT_BUDGET: Duration = Duration::from_secs(180);
/// Steps replayed from scratch to confirm bitwise determinism.
const REPLAY_STEPS: u64 = 10;

// Denoise smoke run.
const SMOKE_SIGMA: f64 = 0.05;
const SMOKE_STEPS: u64 = 400;
const SMOKE_BATCH: usize = 8;
const SMOKE_GAIN_DB: f64 = 2.0;
const SMOKE_BUDGET: Duration = Duration::from_secs(600);

const ABLATION_BUDGET: Duration = Duration::from_secs(300);

// Metrics.
const PSNR_IDENTITY_TOL: f64 = 1e-9;
const SSIM_SELF_TOL: f64 = 1e-12;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, ok: bool, detail: String) {
        if !ok {
            self.failed += 1;
        }
        println!("{} [{id}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

fn parameter_budget(r: &mut Report) {
    let start = Instant::now();
    let (_, store) = HsaNet::build(&ModelConfig::default()).unwrap();
    let report = HsaNet::report(&store);
    let took = start.elapsed();
    let sum: usize = report.modules.iter().map(|m| m.1).sum();
    let dev = (report.total as f64 - TARGET_PARAMS) / TARGET_PARAMS;
    let ok = dev.abs() <= PARAM_REL_TOL && sum == report.total && took < PARAM_BUDGET;
    r.line(
        1,
        "default CT parameter count",
        ok,
        format!(
            "{} params ({:+.1}% of 0.61M, tol ±{:.0}%), module sum {sum}, {took:.2?}",
            report.total,
            100.0 * dev,
            100.0 * PARAM_REL_TOL
        ),
    );
}

fn gradients(r: &mut Report) {
    let start = Instant::now();
    let checks: [(&str, fn() -> fd::Worst, f64); 8] = [
        ("channel_attention", fd::channel_attention, OP_GRAD_TOL),
        ("spatial_attention", fd::spatial_attention, OP_GRAD_TOL),
        ("esga", fd::esga, OP_GRAD_TOL),
        ("epga", fd::epga, OP_GRAD_TOL),
        ("swin_block", fd::swin_block, OP_GRAD_TOL),
        ("hic_expand", fd::hic_expand, OP_GRAD_TOL),
        ("denoise_loss", fd::denoise_loss_grad, OP_GRAD_TOL),
        ("tiny end-to-end", fd::tiny_network, MODEL_GRAD_TOL),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, f, tol) in checks {
        let w = f();
        ok &= w.err < tol;
        parts.push(format!("{name} {:.1e}", w.err));
    }
    let took = start.elapsed();
    ok &= took < GRAD_BUDGET;
    r.line(
        2,
        "finite-difference gradients",
        ok,
        format!("{} (tol {OP_GRAD_TOL:e} / model {MODEL_GRAD_TOL:e}), {took:.1?}", parts.join(", ")),
    );
}

fn exact_invariants(r: &mut Report) {
    let mut fails = Vec::new();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    for seed in 0..MIN_SEEDS as u64 {
        let k = 1 + seed as usize % 3;
        let f = ShuffleFactor::new(k).unwrap();
        let x = common::uniform(&[2, 3 * k * k, 5, 4], -1.0, 1.0, seed);
        let back = tensor_ops::pixel_unshuffle(&tensor_ops::pixel_shuffle(&x, f).unwrap(), f).unwrap();
        if bits(&back) != bits(&x) {
            fails.push(format!("shuffle round-trip seed {seed}"));
        }
        let ws = 1 + seed as usize % 4;
        let g = common::uniform(&[2, 3, 2 * ws, 3 * ws], -1.0, 1.0, seed);
        let win = tensor_ops::window_partition(&g, ws).unwrap();
        if bits(&tensor_ops::window_reverse(&win, ws, 2 * ws, 3 * ws).unwrap()) != bits(&g) {
            fails.push(format!("window round-trip seed {seed}"));
        }
        let zi = tensor_ops::zero_interleave2x(&g).unwrap();
        let [n, c, h, w] = g.dims4().unwrap();
        let rec = Tensor::from_fn(&[n, c, h, w], |i| {
            let (plane, y, xx) = (i / (h * w), i / w % h, i % w);
            zi.data()[(plane * 2 * h + 2 * y) * 2 * w + 2 * xx]
        });
        if bits(&rec) != bits(&g) {
            fails.push(format!("zero-interleave recovery seed {seed}"));
        }
        let a = common::uniform(&[2, 1, 7, 9], 0.0, 1.0, seed);
        let b = common::uniform(&[2, 1, 7, 9], 0.0, 1.0, seed + 1);
        let (total, mae, _) = denoise_loss_value(&a, &b, &LossConfig::with_lambda(0.0)).unwrap();
        if total != mae {
            fails.push(format!("lambda=0 total {total} != mae {mae}"));
        }
    }
    let mut worst_identity = 0.0f64;
    for (cfg, sizes) in [
        (ModelConfig::default(), [(17, 23), (64, 64)]),
        (ModelConfig::tiny(), [(5, 31), (40, 12)]),
    ] {
        let (net, store) = HsaNet::build(&cfg).unwrap();
        for (i, (h, w)) in sizes.into_iter().enumerate() {
            let x = common::uniform(&[1, 1, h, w], 0.0, 1.0, 77 + i as u64);
            let y = net.denoise(&store, &x).unwrap();
            worst_identity = worst_identity.max(common::max_abs_diff(&y, &x));
        }
    }
    if worst_identity != 0.0 {
        fails.push(format!("identity at init deviates by {worst_identity:e}"));
    }
    let (lr0, lr_end) = (poly_lr(0.01, 0, 1000).unwrap(), poly_lr(0.01, 1000, 1000).unwrap());
    if lr0 != 0.01 || lr_end != 0.0 {
        fails.push(format!("poly_lr endpoints {lr0}, {lr_end}"));
    }
    let ok = fails.is_empty();
    r.line(
        3,
        "exact invariants",
        ok,
        if ok {
            format!(
                "round-trips, interleave recovery, λ=0 ⇒ MAE on {MIN_SEEDS} seeds; identity deviation 0; poly_lr(0)={lr0}, poly_lr(M)={lr_end}"
            )
        } else {
            fails.join("; ")
        },
    );
}

fn oracles(r: &mut Report) {
    let start = Instant::now();
    let mut s = Sweep::default();
    for f in [
        sweeps::conv2d,
        sweeps::linear_and_layer_norm,
        sweeps::elementwise_and_softmax,
        sweeps::rearrangements,
        sweeps::gates,
        sweeps::swin_block,
        sweeps::embed_merge_and_expanders,
        sweeps::objective,
        sweeps::metrics,
        sweeps::whole_network,
    ] {
        f(&mut s);
    }
    let min_cases = s.worst.values().map(|w| w.2).min().unwrap_or(0);
    let (name, (err, seed, _)) = s
        .worst
        .iter()
        .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
        .map(|(k, v)| (*k, *v))
        .unwrap();
    let took = start.elapsed();
    let ok = s.max() < ORACLE_TOL && min_cases >= MIN_SEEDS && took < ORACLE_BUDGET;
    r.line(
        4,
        "forward ops vs naive oracles",
        ok,
        format!(
            "{} ops, ≥{min_cases} seeds each, worst {name} {err:.1e} (seed {seed}, tol {ORACLE_TOL:e}), {took:.1?}",
            s.worst.len()
        ),
    );
}

/// All slices of one synthetic pair as a single batch.
fn whole_pair_batch() -> PatchBatch {
    let pair = synthetic_pair(
        "overfit",
        OVERFIT_PAIRS,
        OVERFIT_SIZE,
        NoiseModel::Gaussian { sigma: OVERFIT_SIGMA },
        7,
    )
    .unwrap();
    let shape = [OVERFIT_PAIRS, 1, OVERFIT_SIZE, OVERFIT_SIZE];
    PatchBatch {
        low: pair.low.clone().reshape(&shape).unwrap(),
        full: pair.full.clone().reshape(&shape).unwrap(),
        coords: (0..OVERFIT_PAIRS)
            .map(|slice| PatchCoord { pair: 0, slice, y: 0, x: 0 })
            .collect(),
    }
}

fn overfit(r: &mut Report) {
    let start = Instant::now();
    let batch = whole_pair_batch();
    let cfg = TrainConfig {
        batch: OVERFIT_PAIRS,
        patch: OVERFIT_SIZE,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&ModelConfig::tiny(), &cfg, 0.1, OVERFIT_STEPS).unwrap();
    let mut snapshot = None;
    let log = train_loop(&mut t, &mut BatchSource::Fixed(&batch), |t, _| {
        if t.step == REPLAY_STEPS {
            snapshot = Some(t.checkpoint().to_bytes()?);
        }
        Ok(())
    });
    let log = match log {
        Ok(l) => l,
        Err(e) => return r.line(5, "overfit harness", false, format!("training failed: {e}")),
    };
    let took = start.elapsed();
    let initial = log[0].total;
    let (last, _, _) = t.evaluate_loss(&batch).unwrap();
    let ratio = last / initial;

    let mut replay = Trainer::new(&ModelConfig::tiny(), &cfg, 0.1, OVERFIT_STEPS).unwrap();
    let mut replay_log = Vec::new();
    for _ in 0..REPLAY_STEPS {
        replay_log.push(replay.train_step(&batch).unwrap());
    }
    let deterministic =
        replay_log[..] == log[..REPLAY_STEPS as usize] && snapshot == Some(replay.checkpoint().to_bytes().unwrap());
    let ok = ratio <= OVERFIT_RATIO && deterministic && took < OVERFIT_BUDGET;
    r.line(
        5,
        "overfit harness",
        ok,
        format!(
            "loss {initial:.5} -> {last:.5} (ratio {ratio:.3}, need ≤ {OVERFIT_RATIO}), replay of {REPLAY_STEPS} steps bitwise {}, {took:.1?} (budget {OVERFIT_BUDGET:?})",
            if deterministic { "equal" } else { "DIFFERENT" }
        ),
    );
}

fn smoke(r: &mut Report) {
    let start = Instant::now();
    let syn = SyntheticConfig {
        pairs: 2,
        slices: 8,
        size: 64,
        noise: NoiseModel::Gaussian { sigma: SMOKE_SIGMA },
    };
    let train = synthetic_dataset(&syn, 1).unwrap();
    let held = synthetic_dataset(&SyntheticConfig { pairs: 1, slices: 4, ..syn }, 1_000_001).unwrap();
    let cfg = TrainConfig {
        batch: SMOKE_BATCH,
        patch: syn.size,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&ModelConfig::tiny(), &cfg, 0.1, SMOKE_STEPS).unwrap();
    if let Err(e) = train_loop(&mut t, &mut BatchSource::sampled(&train, 5), |_, _| Ok(())) {
        return r.line(6, "denoise smoke", false, format!("training failed: {e}"));
    }
    let report = evaluate(&t.net, &t.store, &held, "smoke", Averaging::PerSlice).unwrap();
    let mean_psnr = |s: Source| {
        let v: Vec<f64> = report.slices.iter().filter(|x| x.source == s).map(|x| x.psnr).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (den, low) = (mean_psnr(Source::Denoised), mean_psnr(Source::LowDose));
    let took = start.elapsed();
    let ok = den - low >= SMOKE_GAIN_DB && took < SMOKE_BUDGET;
    r.line(
        6,
        "denoise smoke",
        ok,
        format!(
            "held-out PSNR {low:.2} -> {den:.2} dB (gain {:.2}, need ≥ {SMOKE_GAIN_DB}), {took:.1?} (budget {SMOKE_BUDGET:?})",
            den - low
        ),
    );
}

fn ablation(r: &mut Report) {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ablate.toml");
    std::fs::write(
        &cfg,
        "[model]\nshallow_width = 8\nembed_dim = 8\ndepths = [1, 1, 1]\nheads = [1, 1, 1]\n\
         window_size = 4\ncompression_ratio = 2\n\n[train]\nbatch = 2\npatch = 32\n\n\
         [data.synthetic]\npairs = 1\nslices = 2\nsize = 32\n",
    )
    .unwrap();
    let g = GlobalArgs {
        config: Some(cfg),
        synthetic: true,
        steps: Some(1),
        out: Some(dir.path().join("out")),
        ..GlobalArgs::default()
    };
    let rows = cmd_ablate(&g);
    let took = start.elapsed();
    let rows = match rows {
        Ok(rows) => rows,
        Err(e) => return r.line(7, "ablation grid", false, format!("{e}")),
    };
    let expected = TOGGLE_GRID.len() * LAMBDA_GRID.len();
    let all_ran = rows.len() == expected
        && rows.len() == ablation_grid().len()
        && rows.iter().all(|row| row.steps == 1 && row.final_loss.is_finite() && row.psnr.is_finite());
    let ok = all_ran && took < ABLATION_BUDGET;
    r.line(
        7,
        "ablation grid",
        ok,
        format!(
            "{} of {expected} variants ({} toggles x λ {:?}) built and stepped, {took:.1?}",
            rows.len(),
            TOGGLE_GRID.len(),
            LAMBDA_GRID
        ),
    );
}

fn metrics(r: &mut Report) {
    let mut worst_identity = 0.0f64;
    let mut worst_self = 0.0f64;
    for seed in 0..MIN_SEEDS as u64 {
        let a = common::uniform(&[16, 16], 0.0, 1.0, seed);
        let b = common::zip(&a, &common::uniform(&[16, 16], -0.05, 0.05, seed + 500), |x, e| x + e);
        let psnr = eval::psnr(&a, &b, 1.0).unwrap();
        let rmse = eval::rmse(&a, &b, 1.0).unwrap();
        worst_identity = worst_identity.max((psnr - 20.0 * (1.0 / rmse).log10()).abs());
        worst_self = worst_self.max((eval::ssim(&a, &a, 1.0).unwrap() - 1.0).abs());
    }
    let mut s = Sweep::default();
    sweeps::metrics(&mut s);
    let ok = worst_identity < PSNR_IDENTITY_TOL && worst_self < SSIM_SELF_TOL && s.max() < ORACLE_TOL;
    r.line(
        8,
        "metrics",
        ok,
        format!(
            "PSNR/RMSE identity {worst_identity:.1e} (tol {PSNR_IDENTITY_TOL:e}), |SSIM(x,x)-1| {worst_self:.1e}, 16x16 oracle {:.1e}",
            s.max()
        ),
    );
}

fn main() -> ExitCode {
    let mut r = Report { failed: 0 };
    parameter_budget(&mut r);
    gradients(&mut r);
    exact_invariants(&mut r);
    oracles(&mut r);
    overfit(&mut r);
    smoke(&mut r);
    ablation(&mut r);
    metrics(&mut r);
    if r.failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{} criteria failed", r.failed);
        ExitCode::FAILURE
    }
}
