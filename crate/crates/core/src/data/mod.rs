//! Paired low/full-dose volume ingestion, intensity normalization and
//! patch sampling.

pub mod dicom;
pub mod raw;
pub mod synthetic;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// HU window used to bring CT volumes into `[0, 1]` for training.
pub const CT_TRAIN_WINDOW: (f64, f64) = (-1024.0, 3072.0);
/// HU window applied before computing CT metrics.
pub const CT_DISPLAY_WINDOW: (f64, f64) = (-160.0, 240.0);
/// Training patch side.
pub const PATCH_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ct,
    Pet,
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ct" => Ok(Modality::Ct),
            "pet" | "pt" => Ok(Modality::Pet),
            other => Err(Error::invalid(format!("unknown modality `{other}` (expected ct or pet)"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Ct => "ct",
            Modality::Pet => "pet",
        })
    }
}

/// A volume in physical units (HU or SUV), shape `[S, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Tensor,
    /// Row, column and slice spacing in mm.
    pub spacing: [f64; 3],
    pub modality: Option<Modality>,
}

impl Volume {
    pub fn dims(&self) -> Result<[usize; 3]> {
        self.data.dims3()
    }
}

/// `HU = slope * p + intercept`, elementwise.
pub fn dicom_to_hu(raw: &Tensor, slope: f64, intercept: f64) -> Tensor {
    raw.map(|p| slope * p + intercept)
}

/// Per-slice rescale of a `[S, H, W]` stack.
pub fn dicom_to_hu_per_slice(raw: &Tensor, slopes: &[f64], intercepts: &[f64]) -> Result<Tensor> {
    let [s, h, w] = raw.dims3()?;
    if slopes.len() != s || intercepts.len() != s {
        return Err(Error::invalid(format!(
            "{s} slices but {} slopes and {} intercepts",
            slopes.len(),
            intercepts.len()
        )));
    }
    let plane = h * w;
    Ok(Tensor::from_fn(raw.shape(), |i| {
        let k = i / plane;
        slopes[k] * raw.data()[i] + intercepts[k]
    }))
}

/// Clamps to `[lo, hi]` and maps linearly onto `[0, 1]`.
pub fn apply_window(x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::config("window", format!("need finite lo < hi, got [{lo}, {hi}]")));
    }
    let width = hi - lo;
    Ok(x.map(|v| (v.clamp(lo, hi) - lo) / width))
}

/// Inverse of [`apply_window`] on the unclamped range.
pub fn invert_window(x: &Tensor, lo: f64, hi: f64) -> Tensor {
    x.map(|v| v * (hi - lo) + lo)
}

pub fn normalize_ct(hu: &Tensor) -> Tensor {
    apply_window(hu, CT_TRAIN_WINDOW.0, CT_TRAIN_WINDOW.1).expect("constant window is valid")
}

pub fn display_window_ct(hu: &Tensor) -> Tensor {
    apply_window(hu, CT_DISPLAY_WINDOW.0, CT_DISPLAY_WINDOW.1).expect("constant window is valid")
}

/// Bounds recorded by PET min-max scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn invert(&self, x: &Tensor) -> Tensor {
        x.map(|v| v * (self.max - self.min) + self.min)
    }
}

/// Per-volume min-max scaling onto `[0, 1]`.
pub fn normalize_pet(suv: &Tensor) -> Result<(Tensor, MinMax)> {
    let (min, max) = suv
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(max > min) || !min.is_finite() || !max.is_finite() {
        return Err(Error::DegenerateInput(format!(
            "min-max scaling needs a non-constant finite volume (min {min}, max {max})"
        )));
    }
    let range = max - min;
    Ok((suv.map(|v| (v - min) / range), MinMax { min, max }))
}

/// How a pair was brought into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Normalization {
    /// Already in `[0, 1]` (synthetic data).
    Identity,
    CtWindow { lo: f64, hi: f64 },
    PetMinMax { low: MinMax, full: MinMax },
}

/// Co-registered low/full-dose volumes, normalized to `[0, 1]`, `[S, H, W]`.
#[derive(Debug, Clone)]
pub struct VolumePair {
    pub name: String,
    pub low: Tensor,
    pub full: Tensor,
    pub modality: Modality,
    pub spacing: [f64; 3],
    pub norm: Normalization,
}

impl VolumePair {
    /// Normalizes physical volumes per their modality.
    pub fn from_physical(name: impl Into<String>, low: Volume, full: Volume, modality: Modality) -> Result<Self> {
        let name = name.into();
        if low.data.shape() != full.data.shape() {
            return Err(Error::invalid(format!(
                "pair `{name}`: low {:?} and full {:?} differ in shape",
                low.data.shape(),
                full.data.shape()
            )));
        }
        low.dims()?;
        let (l, f, norm) = match modality {
            Modality::Ct => (
                normalize_ct(&low.data),
                normalize_ct(&full.data),
                Normalization::CtWindow {
                    lo: CT_TRAIN_WINDOW.0,
                    hi: CT_TRAIN_WINDOW.1,
                },
            ),
            Modality::Pet => {
                let (l, lb) = normalize_pet(&low.data)?;
                let (f, fb) = normalize_pet(&full.data)?;
                (l, f, Normalization::PetMinMax { low: lb, full: fb })
            }
        };
        Ok(VolumePair {
            name,
            low: l,
            full: f,
            modality,
            spacing: full.spacing,
            norm,
        })
    }

    /// Wraps arrays already in `[0, 1]`.
    pub fn normalized(name: impl Into<String>, low: Tensor, full: Tensor, modality: Modality) -> Result<Self> {
        if low.shape() != full.shape() {
            return Err(Error::invalid("low and full volumes differ in shape"));
        }
        low.dims3()?;
        Ok(VolumePair {
            name: name.into(),
            low,
            full,
            modality,
            spacing: [1.0; 3],
            norm: Normalization::Identity,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.full.dims3().expect("pair volumes are 3-D")
    }

    pub fn slices(&self) -> usize {
        self.dims()[0]
    }

    /// Slice `s` of `vol` as a `[1, 1, H, W]` map.
    pub fn slice_of(vol: &Tensor, s: usize) -> Tensor {
        let [_, h, w] = vol.dims3().expect("3-D volume");
        let plane = h * w;
        Tensor::new(&[1, 1, h, w], vol.data()[s * plane..(s + 1) * plane].to_vec()).expect("slice shape")
    }

    /// Maps a normalized full-dose-scale image back to physical units.
    pub fn to_physical(&self, x: &Tensor) -> Tensor {
        match self.norm {
            Normalization::Identity => x.clone(),
            Normalization::CtWindow { lo, hi } => invert_window(x, lo, hi),
            Normalization::PetMinMax { full, .. } => full.invert(x),
        }
    }

    /// The image as scored by the metrics: CT goes through the display
    /// window, everything else stays on its normalized scale.
    pub fn metric_view(&self, x: &Tensor) -> Tensor {
        match (self.norm, self.modality) {
            (Normalization::CtWindow { .. }, Modality::Ct) => display_window_ct(&self.to_physical(x)),
            _ => x.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchCoord {
    pub pair: usize,
    pub slice: usize,
    pub y: usize,
    pub x: usize,
}

/// Aligned training patches, `[B, 1, p, p]` each.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    pub low: Tensor,
    pub full: Tensor,
    pub coords: Vec<PatchCoord>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

fn crop_patch(vol: &Tensor, s: usize, y: usize, x: usize, p: usize, out: &mut Vec<f64>) {
    let [_, h, w] = vol.dims3().expect("3-D volume");
    let base = s * h * w;
    for r in y..y + p {
        out.extend_from_slice(&vol.data()[base + r * w + x..base + r * w + x + p]);
    }
}

fn check_patch_fits(pair: &VolumePair, p: usize) -> Result<()> {
    let [s, h, w] = pair.dims();
    if p == 0 || h < p || w < p || s == 0 {
        return Err(Error::invalid(format!(
            "pair `{}` ({s}x{h}x{w}) cannot supply {p}x{p} patches",
            pair.name
        )));
    }
    Ok(())
}

/// Draws one top-left coordinate uniformly over slices and valid offsets.
pub fn sample_coord<R: Rng + ?Sized>(rng: &mut R, dims: [usize; 3], p: usize) -> (usize, usize, usize) {
    let [s, h, w] = dims;
    (rng.gen_range(0..s), rng.gen_range(0..=h - p), rng.gen_range(0..=w - p))
}

fn batch_from_coords(pairs: &[VolumePair], coords: Vec<PatchCoord>, p: usize) -> Result<PatchBatch> {
    let mut low = Vec::with_capacity(coords.len() * p * p);
    let mut full = Vec::with_capacity(coords.len() * p * p);
    for c in &coords {
        crop_patch(&pairs[c.pair].low, c.slice, c.y, c.x, p, &mut low);
        crop_patch(&pairs[c.pair].full, c.slice, c.y, c.x, p, &mut full);
    }
    let shape = [coords.len(), 1, p, p];
    Ok(PatchBatch {
        low: Tensor::new(&shape, low)?,
        full: Tensor::new(&shape, full)?,
        coords,
    })
}

/// `n` co-located patch pairs from one volume pair, deterministic in `seed`.
pub fn extract_patches(pair: &VolumePair, p: usize, n: usize, seed: u64) -> Result<PatchBatch> {
    check_patch_fits(pair, p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = pair.dims();
    let coords = (0..n)
        .map(|_| {
            let (slice, y, x) = sample_coord(&mut rng, dims, p);
            PatchCoord { pair: 0, slice, y, x }
        })
        .collect();
    batch_from_coords(std::slice::from_ref(pair), coords, p)
}

/// One manifest line: `low-path, full-path, modality`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub low: PathBuf,
    pub full: PathBuf,
    pub modality: Modality,
}

/// Parses manifest text. Blank lines and `#` comments are skipped; relative
/// paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path, origin: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::ingestion(
                origin,
                format!("line {}: expected `low-path, full-path, modality`", lineno + 1),
            ));
        }
        let modality = fields[2]
            .parse()
            .map_err(|e: Error| Error::ingestion(origin, format!("line {}: {e}", lineno + 1)))?;
        out.push(ManifestEntry {
            low: base.join(fields[0]),
            full: base.join(fields[1]),
            modality,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base, path)
}

/// Reads a DICOM series directory or a raw-format header file.
pub fn load_volume(path: &Path) -> Result<Volume> {
    if path.is_dir() {
        dicom::read_series(path)
    } else if path.is_file() {
        raw::read_volume(path)
    } else {
        Err(Error::ingestion(path, "no such file or directory"))
    }
}

pub fn load_pair(entry: &ManifestEntry) -> Result<VolumePair> {
    let low = load_volume(&entry.low)?;
    let full = load_volume(&entry.full)?;
    for (v, p) in [(&low, &entry.low), (&full, &entry.full)] {
        if let Some(m) = v.modality {
            if m != entry.modality {
                return Err(Error::ingestion(
                    p,
                    format!("volume modality {m} does not match manifest modality {}", entry.modality),
                ));
            }
        }
    }
    let name = entry
        .full
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| entry.full.display().to_string());
    VolumePair::from_physical(name, low, full, entry.modality)
}

/// A collection of pairs sharing one modality.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<VolumePair>,
}

impl Dataset {
    pub fn new(pairs: Vec<VolumePair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::DegenerateInput("dataset has no volume pairs".into()));
        }
        let m = pairs[0].modality;
        if let Some(p) = pairs.iter().find(|p| p.modality != m) {
            return Err(Error::invalid(format!(
                "pair `{}` is {} but the dataset is {m}",
                p.name, p.modality
            )));
        }
        Ok(Dataset { pairs })
    }

    pub fn from_manifest(path: &Path) -> Result<Self> {
        let entries = read_manifest(path)?;
        if entries.is_empty() {
            return Err(Error::ingestion(path, "manifest lists no pairs"));
        }
        Dataset::new(entries.iter().map(load_pair).collect::<Result<_>>()?)
    }

    pub fn modality(&self) -> Modality {
        self.pairs[0].modality
    }

    pub fn total_slices(&self) -> usize {
        self.pairs.iter().map(VolumePair::slices).sum()
    }

    /// A batch of patches whose slices are drawn uniformly over all slices
    /// in the dataset.
    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize, p: usize) -> Result<PatchBatch> {
        for pair in &self.pairs {
            check_patch_fits(pair, p)?;
        }
        let total = self.total_slices();
        let coords = (0..batch)
            .map(|_| {
                let mut k = rng.gen_range(0..total);
                let mut idx = 0;
                while k >= self.pairs[idx].slices() {
                    k -= self.pairs[idx].slices();
                    idx += 1;
                }
                let [_, h, w] = self.pairs[idx].dims();
                PatchCoord {
                    pair: idx,
                    slice: k,
                    y: rng.gen_range(0..=h - p),
                    x: rng.gen_range(0..=w - p),
                }
            })
            .collect();
        batch_from_coords(&self.pairs, coords, p)
    }
}
