//! Command-line front end.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::synthetic::synthetic_dataset;
use crate::data::{self, Dataset, Modality, Volume};
use crate::error::{Error, Result};
use crate::eval::{self, evaluate, write_rows};
use crate::model::{HsaNet, Toggles};
use crate::train::{train_loop, write_log_csv, BatchSource, LogRow, Trainer};

/// Environment variable naming the root directory for run outputs.
pub const OUT_ROOT_ENV: &str = "HSANET_OUT_ROOT";
/// Seed offset separating held-out synthetic data from training data.
pub const HELD_OUT_SEED_OFFSET: u64 = 1_000_003;

#[derive(Debug, Parser)]
#[command(name = "hsanet", version, about = "Low-dose CT/PET denoising network")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct GlobalArgs {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for initialization, sampling and synthetic data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; relative paths go under $HSANET_OUT_ROOT when set.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Number of training epochs.
    #[arg(long, global = true)]
    pub epochs: Option<u64>,
    /// Total training steps (overrides epochs x steps per epoch).
    #[arg(long, global = true)]
    pub steps: Option<u64>,
    /// Use generated phantoms instead of a dataset manifest.
    #[arg(long, global = true)]
    pub synthetic: bool,
    /// Imaging modality.
    #[arg(long, global = true, value_parser = parse_modality)]
    pub modality: Option<Modality>,
    /// Sobel loss weight.
    #[arg(long = "lambda", global = true)]
    pub lambda: Option<f64>,
    /// Module switch, `esga|epga|hic=on|off`; repeatable.
    #[arg(long = "toggle", global = true, value_parser = parse_toggle)]
    pub toggles: Vec<(String, bool)>,
    /// Parameter budget upper bound, e.g. `0.7M`, `650k` or `700000`.
    #[arg(long, global = true, value_parser = parse_count)]
    pub max: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write checkpoint, log and manifest.
    Train,
    /// Score a checkpoint on a dataset and export metric CSVs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest (`low-path, full-path, modality` per line).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Denoise one volume (raw header or DICOM directory).
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output raw header path; defaults to `<out>/denoised.hdr`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train and score every ablation variant.
    Ablate,
    /// Print per-module parameter counts and check the budget.
    Params,
}

fn parse_modality(s: &str) -> std::result::Result<Modality, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn parse_toggle(s: &str) -> std::result::Result<(String, bool), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected `module=on|off`, got `{s}`"))?;
    let k = k.trim().to_ascii_lowercase();
    if !["esga", "epga", "hic"].contains(&k.as_str()) {
        return Err(format!("unknown toggle `{k}` (expected esga, epga or hic)"));
    }
    let on = match v.trim().to_ascii_lowercase().as_str() {
        "on" | "true" | "1" => true,
        "off" | "false" | "0" => false,
        other => return Err(format!("toggle value must be on or off, got `{other}`")),
    };
    Ok((k, on))
}

pub fn parse_count(s: &str) -> std::result::Result<usize, String> {
    let t = s.trim();
    let (num, mult) = match t.chars().last() {
        Some('M' | 'm') => (&t[..t.len() - 1], 1e6),
        Some('K' | 'k') => (&t[..t.len() - 1], 1e3),
        _ => (t, 1.0),
    };
    let v: f64 = num.parse().map_err(|_| format!("`{s}` is not a count"))?;
    if !(v >= 0.0) || !v.is_finite() {
        return Err(format!("`{s}` is not a count"));
    }
    Ok((v * mult).round() as usize)
}

fn apply_toggles(t: &mut Toggles, toggles: &[(String, bool)]) {
    for (k, on) in toggles {
        match k.as_str() {
            "esga" => t.esga = *on,
            "epga" => t.epga = *on,
            _ => t.hic = *on,
        }
    }
}

/// Loads the config (or defaults) and applies command-line overrides.
pub fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    if let Some(e) = g.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = g.steps {
        cfg.train.total_steps = Some(s);
    }
    if let Some(m) = g.modality {
        cfg.data.modality = m;
    }
    if let Some(l) = g.lambda {
        cfg.train.lambda = Some(l);
    }
    if let Some(m) = g.max {
        cfg.budget.max_params = Some(m);
    }
    apply_toggles(&mut cfg.model.toggles, &g.toggles);
    cfg.validate()?;
    Ok(cfg)
}

/// `--out`, resolved against `$HSANET_OUT_ROOT` when relative; defaults to
/// `<root>/<command>`.
pub fn resolve_out_dir(out: Option<&Path>, command: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from);
    match (out, root) {
        (Some(o), Some(r)) if o.is_relative() => r.join(o),
        (Some(o), _) => o.to_path_buf(),
        (None, Some(r)) => r.join(command),
        (None, None) => PathBuf::from("runs").join(command),
    }
}

/// One line of `runs.jsonl`.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub resolved_config: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub artifacts: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

pub fn append_manifest(out: &Path, command: &str, g: &GlobalArgs, cfg: &RunConfig, artifacts: &[PathBuf]) -> Result<()> {
    let mut hashes = BTreeMap::new();
    for a in artifacts {
        let key = a
            .strip_prefix(out)
            .unwrap_or(a)
            .display()
            .to_string();
        hashes.insert(key, sha256_file(a)?);
    }
    let m = RunManifest {
        command: command.to_string(),
        config_path: g.config.clone(),
        resolved_config: cfg.to_toml(),
        seed: cfg.train.seed,
        out_dir: out.to_path_buf(),
        artifacts: hashes,
    };
    std::fs::create_dir_all(out)?;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("runs.jsonl"))?;
    writeln!(f, "{}", serde_json::to_string(&m)?)?;
    Ok(())
}

fn training_data(g: &GlobalArgs, cfg: &RunConfig) -> Result<Dataset> {
    if g.synthetic {
        return synthetic_dataset(&cfg.data.synthetic, cfg.train.seed);
    }
    let manifest = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| Error::config("data.manifest", "no training manifest given (set it or pass --synthetic)"))?;
    let ds = Dataset::from_manifest(existing("data.manifest", manifest)?)?;
    check_modality(&ds, cfg.data.modality)?;
    Ok(ds)
}

fn existing<'a>(key: &str, path: &'a Path) -> Result<&'a Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::config(key, format!("{} does not exist", path.display())))
    }
}

fn check_modality(ds: &Dataset, want: Modality) -> Result<()> {
    if ds.modality() != want {
        return Err(Error::config(
            "data.modality",
            format!("dataset is {} but {want} was requested", ds.modality()),
        ));
    }
    Ok(())
}

fn held_out_data(g: &GlobalArgs, cfg: &RunConfig, manifest: Option<&Path>) -> Result<Dataset> {
    let given = match manifest {
        Some(m) => Some(("--manifest", m)),
        None => cfg.data.eval_manifest.as_deref().map(|m| ("data.eval_manifest", m)),
    };
    if let Some((key, m)) = given {
        let ds = Dataset::from_manifest(existing(key, m)?)?;
        check_modality(&ds, cfg.data.modality)?;
        return Ok(ds);
    }
    if g.synthetic {
        return synthetic_dataset(&cfg.data.synthetic, cfg.train.seed.wrapping_add(HELD_OUT_SEED_OFFSET));
    }
    Err(Error::config(
        "data.eval_manifest",
        "no evaluation manifest given (pass --manifest, set it, or use --synthetic)",
    ))
}

/// Summary returned by [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub log: Vec<LogRow>,
}

pub fn cmd_train(g: &GlobalArgs) -> Result<TrainSummary> {
    let cfg = resolve_config(g)?;
    let ds = training_data(g, &cfg)?;
    let out = resolve_out_dir(g.out.as_deref(), "train");
    std::fs::create_dir_all(&out)?;
    let lambda = cfg.train.lambda_for(ds.modality());
    let total = cfg.train.total_steps_for(ds.total_slices());
    let mut trainer = Trainer::new(&cfg.model, &cfg.train, lambda, total)?;
    let ckpt_path = out.join("checkpoint.ckpt");
    let mut artifacts = Vec::new();
    let every = cfg.train.checkpoint_every;
    let mut source = BatchSource::sampled(&ds, cfg.train.seed);
    let log = train_loop(&mut trainer, &mut source, |t, row| {
        if every.is_some_and(|e| (row.step + 1) % e == 0) && t.step < t.total_steps {
            let p = out.join(format!("checkpoint_step{:08}.ckpt", t.step));
            t.checkpoint().save(&p)?;
            artifacts.push(p);
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&ckpt_path)?;
    artifacts.push(ckpt_path.clone());
    let log_path = out.join("train_log.csv");
    write_log_csv(&log_path, &log)?;
    artifacts.push(log_path);
    let cfg_path = out.join("config.resolved.toml");
    std::fs::write(&cfg_path, cfg.to_toml())?;
    artifacts.push(cfg_path);
    append_manifest(&out, "train", g, &cfg, &artifacts)?;
    Ok(TrainSummary {
        out_dir: out,
        checkpoint: ckpt_path,
        log,
    })
}

pub fn cmd_eval(g: &GlobalArgs, checkpoint: &Path, manifest: Option<&Path>) -> Result<eval::MetricsReport> {
    let cfg = resolve_config(g)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let (net, store) = ckpt.restore()?;
    let ds = held_out_data(g, &cfg, manifest)?;
    let out = resolve_out_dir(g.out.as_deref(), "eval");
    let run = format!("seed{}", ckpt.model.seed);
    let report = evaluate(&net, &store, &ds, &run, cfg.eval.averaging)?;
    let artifacts = report.write_csvs(&out)?;
    append_manifest(&out, "eval", g, &cfg, &artifacts)?;
    Ok(report)
}

pub fn cmd_denoise(g: &GlobalArgs, checkpoint: &Path, input: &Path, output: Option<&Path>) -> Result<PathBuf> {
    let cfg = resolve_config(g)?;
    let (net, store) = Checkpoint::load(checkpoint)?.restore()?;
    let vol = data::load_volume(input)?;
    let modality = g.modality.or(vol.modality).unwrap_or(cfg.data.modality);
    let [s, h, w] = vol.dims()?;
    let (normed, invert): (_, Box<dyn Fn(&crate::Tensor) -> crate::Tensor>) = match modality {
        Modality::Ct => (
            data::normalize_ct(&vol.data),
            Box::new(|x| data::invert_window(x, data::CT_TRAIN_WINDOW.0, data::CT_TRAIN_WINDOW.1)),
        ),
        Modality::Pet => {
            let (n, b) = data::normalize_pet(&vol.data)?;
            (n, Box::new(move |x| b.invert(x)))
        }
    };
    let mut outv = Vec::with_capacity(s * h * w);
    for k in 0..s {
        let y = net.denoise(&store, &data::VolumePair::slice_of(&normed, k))?;
        if !y.is_finite() {
            return Err(Error::Numerical {
                step: k as u64,
                message: format!("non-finite output on slice {k}"),
            });
        }
        outv.extend(y.into_data());
    }
    let physical = invert(&crate::Tensor::new(&[s, h, w], outv)?);
    let out = resolve_out_dir(g.out.as_deref(), "denoise");
    let path = output.map(Path::to_path_buf).unwrap_or_else(|| out.join("denoised.hdr"));
    let pixel = match modality {
        Modality::Ct => data::raw::PixelType::I16,
        Modality::Pet => data::raw::PixelType::U16,
    };
    data::raw::write_volume(
        &path,
        &Volume {
            data: physical,
            spacing: vol.spacing,
            modality: Some(modality),
        },
        pixel,
    )?;
    append_manifest(&out, "denoise", g, &cfg, &[path.clone()])?;
    Ok(path)
}

/// One ablation variant: a module switch pattern and a Sobel weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variant {
    pub esga: bool,
    pub epga: bool,
    pub hic: bool,
    pub lambda: f64,
}

/// The module patterns compared in the ablation table, as (ESGA, EPGA, HIC).
pub const TOGGLE_GRID: [(bool, bool, bool); 5] = [
    (false, false, false),
    (true, true, false),
    (true, false, true),
    (false, true, true),
    (true, true, true),
];
/// Sobel weights compared in the λ sweep.
pub const LAMBDA_GRID: [f64; 4] = [0.0, 0.1, 0.5, 1.0];

impl Variant {
    /// Check/cross pattern in ESGA, EPGA, HIC order plus λ, e.g. `✓✗✓ λ=0.1`.
    pub fn name(&self) -> String {
        let m = |b: bool| if b { '✓' } else { '✗' };
        format!("{}{}{} λ={}", m(self.esga), m(self.epga), m(self.hic), self.lambda)
    }
}

pub fn ablation_grid() -> Vec<Variant> {
    TOGGLE_GRID
        .iter()
        .flat_map(|&(esga, epga, hic)| {
            LAMBDA_GRID.iter().map(move |&lambda| Variant { esga, epga, hic, lambda })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub esga: bool,
    pub epga: bool,
    pub hic: bool,
    pub lambda: f64,
    pub params: usize,
    pub steps: u64,
    pub final_loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
}

/// Trains each variant for the configured step count (default 1) and scores
/// it on held-out data. `--lambda` restricts the λ sweep to one value;
/// `--toggle` is ignored since the grid fixes the switches.
pub fn cmd_ablate(g: &GlobalArgs) -> Result<Vec<AblationRow>> {
    let base = resolve_config(g)?;
    let ds = training_data(g, &base)?;
    let held = held_out_data(g, &base, None)?;
    let out = resolve_out_dir(g.out.as_deref(), "ablate");
    let steps = base.train.total_steps.unwrap_or(1);
    let grid: Vec<Variant> = ablation_grid()
        .into_iter()
        .filter(|v| g.lambda.is_none_or(|l| v.lambda == l))
        .collect();
    let mut rows = Vec::with_capacity(grid.len());
    for v in grid {
        let mut cfg = base.clone();
        cfg.model.toggles.esga = v.esga;
        cfg.model.toggles.epga = v.epga;
        cfg.model.toggles.hic = v.hic;
        cfg.train.lambda = Some(v.lambda);
        cfg.validate()?;
        let mut trainer = Trainer::new(&cfg.model, &cfg.train, v.lambda, steps)?;
        let mut source = BatchSource::sampled(&ds, cfg.train.seed);
        let log = train_loop(&mut trainer, &mut source, |_, _| Ok(()))?;
        let report = evaluate(&trainer.net, &trainer.store, &held, &v.name(), cfg.eval.averaging)?;
        let agg = report.aggregate()?;
        let get = |metric: &str| {
            agg.iter()
                .find(|r| r.source == eval::Source::Denoised && r.metric == metric)
                .map_or(f64::NAN, |r| r.mean)
        };
        rows.push(AblationRow {
            variant: v.name(),
            esga: v.esga,
            epga: v.epga,
            hic: v.hic,
            lambda: v.lambda,
            params: trainer.store.param_count(),
            steps,
            final_loss: log.last().map_or(f64::NAN, |r| r.total),
            psnr: get("psnr"),
            ssim: get("ssim"),
            rmse: get("rmse"),
        });
    }
    std::fs::create_dir_all(&out)?;
    let path = out.join("ablation.csv");
    write_rows(&path, &rows)?;
    append_manifest(&out, "ablate", g, &base, &[path])?;
    Ok(rows)
}

pub fn cmd_params(g: &GlobalArgs) -> Result<crate::model::BuildReport> {
    let cfg = resolve_config(g)?;
    let (_, store) = HsaNet::build(&cfg.model)?;
    let report = HsaNet::report(&store);
    println!("{report}");
    cfg.budget.check(report.total)?;
    Ok(report)
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let g = &cli.global;
    let result = match &cli.command {
        Command::Train => cmd_train(g).map(|s| {
            let last = s.log.last().map_or(String::from("no steps"), |r| format!("final loss {:.6}", r.total));
            println!("trained {} steps ({last}); checkpoint {}", s.log.len(), s.checkpoint.display());
        }),
        Command::Eval { checkpoint, manifest } => cmd_eval(g, checkpoint, manifest.as_deref()).and_then(|r| {
            for a in r.aggregate()? {
                println!("{:?} {:<12} {:>12.6} ± {:.6} (n={})", a.source, a.metric, a.mean, a.std, a.n);
            }
            Ok(())
        }),
        Command::Denoise {
            checkpoint,
            input,
            output,
        } => cmd_denoise(g, checkpoint, input, output.as_deref()).map(|p| println!("wrote {}", p.display())),
        Command::Ablate => cmd_ablate(g).map(|rows| {
            for r in rows {
                println!(
                    "{:<16} params {:>8} loss {:>10.6} psnr {:>8.3} ssim {:.4}",
                    r.variant, r.params, r.final_loss, r.psnr, r.ssim
                );
            }
        }),
        Command::Params => cmd_params(g).map(|_| ()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
