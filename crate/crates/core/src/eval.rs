//! Image-quality metrics, aggregation and CSV export.
//!
//! SSIM uses an 11x11 Gaussian window (σ = 1.5), `K1 = 0.01`, `K2 = 0.03`,
//! population (not sample) local statistics, and averages the SSIM map over
//! the positions where the window fits entirely inside the image.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Modality, VolumePair, CT_DISPLAY_WINDOW};
use crate::error::{Error, Result};
use crate::model::HsaNet;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// HU width of the CT display window; RMSE times this is in display HU.
pub const DISPLAY_SCALE: f64 = CT_DISPLAY_WINDOW.1 - CT_DISPLAY_WINDOW.0;

fn check_pair(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.numel() == 0 {
        return Err(Error::invalid("metric inputs are empty"));
    }
    Ok(())
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair(pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.numel() as f64)
}

/// `10 log10(range² / MSE)` in dB; `+inf` when the inputs are identical.
pub fn psnr(pred: &Tensor, target: &Tensor, data_range: f64) -> Result<f64> {
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

/// `sqrt(MSE) * scale`.
pub fn rmse(pred: &Tensor, target: &Tensor, scale: f64) -> Result<f64> {
    Ok(mse(pred, target)?.sqrt() * scale)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = taps.iter().enumerate().map(|(t, g)| g * x[y * w + xo + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = taps.iter().enumerate().map(|(t, g)| g * rows[(yo + t) * wo + xo]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, data_range: f64) -> f64 {
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, &taps);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, &taps);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, &taps);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let n = mu_a.len() as f64;
    (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n
}

/// Mean local SSIM over the last two axes, averaged over any leading planes.
pub fn ssim(pred: &Tensor, target: &Tensor, data_range: f64) -> Result<f64> {
    check_pair(pred, target)?;
    if pred.ndim() < 2 {
        return Err(Error::invalid("ssim needs at least a 2-D image"));
    }
    let nd = pred.ndim();
    let (h, w) = (pred.shape()[nd - 2], pred.shape()[nd - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let plane = h * w;
    let planes = pred.numel() / plane;
    let total: f64 = (0..planes)
        .map(|p| {
            let r = p * plane..(p + 1) * plane;
            ssim_plane(&pred.data()[r.clone()], &target.data()[r], h, w, data_range)
        })
        .sum();
    Ok(total / planes as f64)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::invalid("cannot aggregate zero values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(Summary {
        mean,
        std: var.sqrt(),
        n: values.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Denoised,
    LowDose,
}

/// Metric triplet for one image or volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    /// RMSE in display units: times [`DISPLAY_SCALE`] for CT, unscaled otherwise.
    pub rmse_display: f64,
}

impl Metrics {
    pub fn compute(pred: &Tensor, target: &Tensor, modality: Modality) -> Result<Self> {
        let r = rmse(pred, target, 1.0)?;
        Ok(Metrics {
            psnr: psnr(pred, target, 1.0)?,
            ssim: ssim(pred, target, 1.0)?,
            rmse: r,
            rmse_display: r * display_scale(modality),
        })
    }

    fn field(&self, metric: &str) -> f64 {
        match metric {
            "psnr" => self.psnr,
            "ssim" => self.ssim,
            "rmse" => self.rmse,
            _ => self.rmse_display,
        }
    }
}

pub fn display_scale(modality: Modality) -> f64 {
    match modality {
        Modality::Ct => DISPLAY_SCALE,
        Modality::Pet => 1.0,
    }
}

pub const METRIC_NAMES: [&str; 4] = ["psnr", "ssim", "rmse", "rmse_display"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRow {
    pub run: String,
    pub patient: String,
    pub slice: usize,
    pub source: Source,
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub rmse_display: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRow {
    pub run: String,
    pub patient: String,
    pub source: Source,
    pub slices: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub rmse_display: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolinRow {
    pub run: String,
    pub patient: String,
    pub source: Source,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub source: Source,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Per-slice metrics averaged per patient.
    #[default]
    PerSlice,
    /// Metrics computed once on each whole volume.
    PerVolume,
}

/// Full evaluation output of one or more runs.
#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub slices: Vec<SliceRow>,
    pub patients: Vec<PatientRow>,
}

impl MetricsReport {
    pub fn merge(&mut self, other: MetricsReport) {
        self.slices.extend(other.slices);
        self.patients.extend(other.patients);
    }

    pub fn violin(&self) -> Vec<ViolinRow> {
        let mut out = Vec::with_capacity(self.patients.len() * 4);
        for p in &self.patients {
            let m = Metrics {
                psnr: p.psnr,
                ssim: p.ssim,
                rmse: p.rmse,
                rmse_display: p.rmse_display,
            };
            for name in METRIC_NAMES {
                out.push(ViolinRow {
                    run: p.run.clone(),
                    patient: p.patient.clone(),
                    source: p.source,
                    metric: name.to_string(),
                    value: m.field(name),
                });
            }
        }
        out
    }

    /// Mean ± population std over patient rows, per source and metric.
    pub fn aggregate(&self) -> Result<Vec<AggregateRow>> {
        aggregate(&self.violin())
    }

    /// Writes `slices.csv`, `patients.csv`, `violin.csv` and `aggregate.csv`.
    pub fn write_csvs(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let paths = [
            dir.join("slices.csv"),
            dir.join("patients.csv"),
            dir.join("violin.csv"),
            dir.join("aggregate.csv"),
        ];
        write_rows(&paths[0], &self.slices)?;
        write_rows(&paths[1], &self.patients)?;
        write_rows(&paths[2], &self.violin())?;
        write_rows(&paths[3], &self.aggregate()?)?;
        Ok(paths.to_vec())
    }
}

/// Mean ± population std of violin rows grouped by `(source, metric)`, in
/// first-seen order.
pub fn aggregate(rows: &[ViolinRow]) -> Result<Vec<AggregateRow>> {
    if rows.is_empty() {
        return Err(Error::invalid("no reports to aggregate"));
    }
    let mut keys: Vec<(Source, String)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(s, m)| *s == r.source && *m == r.metric) {
            keys.push((r.source, r.metric.clone()));
        }
    }
    keys.into_iter()
        .map(|(source, metric)| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.source == source && r.metric == metric)
                .map(|r| r.value)
                .collect();
            let s = summarize(&vals)?;
            Ok(AggregateRow {
                source,
                metric,
                mean: s.mean,
                std: s.std,
                n: s.n,
            })
        })
        .collect()
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Denoises every slice of every pair and scores both the network output
/// and the low-dose input against the full-dose target.
pub fn evaluate(
    net: &HsaNet,
    store: &ParamStore,
    dataset: &Dataset,
    run: &str,
    averaging: Averaging,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for pair in &dataset.pairs {
        report.merge(evaluate_pair(net, store, pair, run, averaging)?);
    }
    Ok(report)
}

fn denoise_volume(net: &HsaNet, store: &ParamStore, pair: &VolumePair) -> Result<Tensor> {
    let [s, h, w] = pair.dims();
    let mut out = Vec::with_capacity(s * h * w);
    for k in 0..s {
        let y = net.denoise(store, &VolumePair::slice_of(&pair.low, k))?;
        if !y.is_finite() {
            return Err(Error::Numerical {
                step: k as u64,
                message: format!("non-finite output on slice {k} of `{}`", pair.name),
            });
        }
        out.extend(y.into_data());
    }
    Tensor::new(&[s, h, w], out)
}

pub fn evaluate_pair(
    net: &HsaNet,
    store: &ParamStore,
    pair: &VolumePair,
    run: &str,
    averaging: Averaging,
) -> Result<MetricsReport> {
    let denoised = denoise_volume(net, store, pair)?;
    let target = pair.metric_view(&pair.full);
    let mut report = MetricsReport::default();
    for (source, vol) in [(Source::Denoised, &denoised), (Source::LowDose, &pair.low)] {
        let view = pair.metric_view(vol);
        let per_slice: Vec<Metrics> = (0..pair.slices())
            .into_par_iter()
            .map(|k| {
                Metrics::compute(
                    &VolumePair::slice_of(&view, k),
                    &VolumePair::slice_of(&target, k),
                    pair.modality,
                )
            })
            .collect::<Result<_>>()?;
        for (k, m) in per_slice.iter().enumerate() {
            report.slices.push(SliceRow {
                run: run.to_string(),
                patient: pair.name.clone(),
                slice: k,
                source,
                psnr: m.psnr,
                ssim: m.ssim,
                rmse: m.rmse,
                rmse_display: m.rmse_display,
            });
        }
        let m = match averaging {
            Averaging::PerSlice => {
                let mean = |f: fn(&Metrics) -> f64| per_slice.iter().map(f).sum::<f64>() / per_slice.len() as f64;
                Metrics {
                    psnr: mean(|m| m.psnr),
                    ssim: mean(|m| m.ssim),
                    rmse: mean(|m| m.rmse),
                    rmse_display: mean(|m| m.rmse_display),
                }
            }
            Averaging::PerVolume => Metrics::compute(&view, &target, pair.modality)?,
        };
        report.patients.push(PatientRow {
            run: run.to_string(),
            patient: pair.name.clone(),
            source,
            slices: pair.slices(),
            psnr: m.psnr,
            ssim: m.ssim,
            rmse: m.rmse,
            rmse_display: m.rmse_display,
        });
    }
    Ok(report)
}
