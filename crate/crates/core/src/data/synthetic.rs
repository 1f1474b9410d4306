//! Synthetic, non-clinical phantoms for tests and smoke runs.
//!
//! Each slice is a piecewise-constant image in `[0, 1]`: a body ellipse on
//! an empty background with a handful of ellipses and rectangles inside.
//! Low-dose counterparts add Gaussian or Poisson noise and clamp to `[0, 1]`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::raw::{self, PixelType};
use crate::data::{Dataset, Modality, Volume, VolumePair, CT_DISPLAY_WINDOW};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseModel {
    Gaussian { sigma: f64 },
    /// Counts-domain noise; `peak` expected counts at intensity 1.
    Poisson { peak: f64 },
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::Gaussian { sigma: 0.05 }
    }
}

impl NoiseModel {
    pub fn apply<R: Rng + ?Sized>(&self, clean: &Tensor, rng: &mut R) -> Result<Tensor> {
        let noisy: Vec<f64> = match *self {
            NoiseModel::Gaussian { sigma } => {
                let n = Normal::new(0.0, sigma).map_err(|e| Error::config("noise.sigma", e.to_string()))?;
                clean.data().iter().map(|&v| v + n.sample(rng)).collect()
            }
            NoiseModel::Poisson { peak } => {
                if !(peak > 0.0) {
                    return Err(Error::config("noise.peak", "must be positive"));
                }
                clean
                    .data()
                    .iter()
                    .map(|&v| {
                        let lambda = v * peak;
                        if lambda <= 0.0 {
                            0.0
                        } else {
                            Poisson::new(lambda).expect("positive rate").sample(rng) / peak
                        }
                    })
                    .collect()
            }
        };
        Tensor::new(clean.shape(), noisy.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }
}

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
        }
    }
}

/// One `h x w` phantom slice in `[0, 1]`.
pub fn phantom_slice<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Tensor {
    // Coordinates normalised to [-1, 1].
    let body = Shape::Ellipse {
        cy: rng.gen_range(-0.05..0.05),
        cx: rng.gen_range(-0.05..0.05),
        ry: rng.gen_range(0.75..0.92),
        rx: rng.gen_range(0.7..0.92),
    };
    let body_level = rng.gen_range(0.35..0.5);
    let n_inner = rng.gen_range(3..=6);
    let inner: Vec<(Shape, f64)> = (0..n_inner)
        .map(|_| {
            let cy = rng.gen_range(-0.5..0.5);
            let cx = rng.gen_range(-0.5..0.5);
            let a = rng.gen_range(0.08..0.3);
            let b = rng.gen_range(0.08..0.3);
            let shape = if rng.gen_bool(0.6) {
                Shape::Ellipse { cy, cx, ry: a, rx: b }
            } else {
                Shape::Rect {
                    y0: cy - a,
                    x0: cx - b,
                    y1: cy + a,
                    x1: cx + b,
                }
            };
            (shape, rng.gen_range(0.1..0.95))
        })
        .collect();
    Tensor::from_fn(&[h, w], |i| {
        let y = 2.0 * ((i / w) as f64 + 0.5) / h as f64 - 1.0;
        let x = 2.0 * ((i % w) as f64 + 0.5) / w as f64 - 1.0;
        if !body.contains(y, x) {
            return 0.0;
        }
        inner
            .iter()
            .rev()
            .find(|(s, _)| s.contains(y, x))
            .map_or(body_level, |&(_, v)| v)
    })
}

/// `[S, H, W]` stack of independent phantoms.
pub fn phantom_volume<R: Rng + ?Sized>(slices: usize, h: usize, w: usize, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(slices * h * w);
    for _ in 0..slices {
        data.extend(phantom_slice(h, w, rng).into_data());
    }
    Tensor::new(&[slices, h, w], data).expect("stack shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub pairs: usize,
    pub slices: usize,
    pub size: usize,
    pub noise: NoiseModel,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            pairs: 2,
            slices: 4,
            size: 64,
            noise: NoiseModel::default(),
        }
    }
}

/// A pair whose full-dose volume is a clean phantom.
pub fn synthetic_pair(name: &str, slices: usize, size: usize, noise: NoiseModel, seed: u64) -> Result<VolumePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full = phantom_volume(slices, size, size, &mut rng);
    let low = noise.apply(&full, &mut rng)?;
    VolumePair::normalized(name, low, full, Modality::Ct)
}

/// `cfg.pairs` independent pairs; pair `k` uses seed `seed + k`.
pub fn synthetic_dataset(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    if cfg.pairs == 0 || cfg.slices == 0 || cfg.size == 0 {
        return Err(Error::config("synthetic", "pairs, slices and size must be positive"));
    }
    Dataset::new(
        (0..cfg.pairs)
            .map(|k| synthetic_pair(&format!("phantom{k:02}"), cfg.slices, cfg.size, cfg.noise, seed.wrapping_add(k as u64)))
            .collect::<Result<_>>()?,
    )
}

/// Writes a synthetic dataset as CT raw volumes plus a manifest. Intensities
/// map onto HU through the display window, so windowed metrics see the
/// phantom values again.
pub fn write_corpus(dir: &Path, cfg: &SyntheticConfig, seed: u64) -> Result<std::path::PathBuf> {
    let ds = synthetic_dataset(cfg, seed)?;
    std::fs::create_dir_all(dir)?;
    let (lo, hi) = CT_DISPLAY_WINDOW;
    let mut manifest = String::from("# low-path, full-path, modality\n");
    for pair in &ds.pairs {
        for (tag, vol) in [("low", &pair.low), ("full", &pair.full)] {
            let hu = Volume {
                data: vol.map(|v| (lo + v * (hi - lo)).round()),
                spacing: pair.spacing,
                modality: Some(Modality::Ct),
            };
            raw::write_volume(&dir.join(format!("{}_{tag}.hdr", pair.name)), &hu, PixelType::I16)?;
        }
        manifest.push_str(&format!("{0}_low.hdr, {0}_full.hdr, ct\n", pair.name));
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest)?;
    Ok(path)
}
