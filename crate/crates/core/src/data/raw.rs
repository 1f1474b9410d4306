//! Raw volume format: a text header plus one file of 16-bit little-endian
//! pixels per slice.
//!
//! Header (`key = value` lines, `#` comments allowed, unknown keys rejected):
//!
//! ```text
//! format = hsanet-raw-v1
//! modality = ct                 # ct | pet, optional
//! rows = 512
//! cols = 512
//! slices = 3
//! spacing = 0.7, 0.7, 1.0       # row, column, slice spacing in mm (optional)
//! pixel = i16                   # i16 | u16
//! rescale_slope = 1             # one value, or one per slice, comma-separated
//! rescale_intercept = -1024     # same
//! slice_prefix = slice_         # optional, default `slice_`
//! ```
//!
//! Slice `k` lives next to the header in `<slice_prefix><k:04>.raw`:
//! `rows * cols` pixels, row-major, two bytes each, little-endian. Physical
//! value = `rescale_slope[k] * pixel + rescale_intercept[k]`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{dicom_to_hu_per_slice, Modality, Volume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_TAG: &str = "hsanet-raw-v1";
const DEFAULT_PREFIX: &str = "slice_";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelType {
    I16,
    U16,
}

impl PixelType {
    fn range(self) -> (f64, f64) {
        match self {
            PixelType::I16 => (i16::MIN as f64, i16::MAX as f64),
            PixelType::U16 => (0.0, u16::MAX as f64),
        }
    }

    fn decode(self, b: [u8; 2]) -> f64 {
        match self {
            PixelType::I16 => i16::from_le_bytes(b) as f64,
            PixelType::U16 => u16::from_le_bytes(b) as f64,
        }
    }

    fn encode(self, v: f64) -> [u8; 2] {
        match self {
            PixelType::I16 => (v as i16).to_le_bytes(),
            PixelType::U16 => (v as u16).to_le_bytes(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            PixelType::I16 => "i16",
            PixelType::U16 => "u16",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawHeader {
    pub modality: Option<Modality>,
    pub rows: usize,
    pub cols: usize,
    pub slices: usize,
    pub spacing: [f64; 3],
    pub pixel: PixelType,
    pub slope: Vec<f64>,
    pub intercept: Vec<f64>,
    pub slice_prefix: String,
}

fn parse_list(path: &Path, key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::ingestion(path, format!("`{key}`: `{}` is not a number", t.trim())))
        })
        .collect()
}

fn parse_count(path: &Path, key: &str, v: &str) -> Result<usize> {
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(Error::ingestion(path, format!("`{key}` must be a positive integer, got `{v}`"))),
    }
}

impl RawHeader {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::ingestion(path, format!("line {}: expected `key = value`", i + 1)))?;
            if kv.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::ingestion(path, format!("duplicate key `{}`", k.trim())));
            }
        }
        const KNOWN: [&str; 10] = [
            "format",
            "modality",
            "rows",
            "cols",
            "slices",
            "spacing",
            "pixel",
            "rescale_slope",
            "rescale_intercept",
            "slice_prefix",
        ];
        if let Some(k) = kv.keys().find(|k| !KNOWN.contains(&k.as_str())) {
            return Err(Error::ingestion(path, format!("unknown header key `{k}`")));
        }
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::ingestion(path, format!("missing header key `{k}`")))
        };
        if get("format")? != FORMAT_TAG {
            return Err(Error::ingestion(path, format!("format must be `{FORMAT_TAG}`")));
        }
        let modality = match kv.get("modality") {
            Some(m) => Some(m.parse().map_err(|e: Error| Error::ingestion(path, e.to_string()))?),
            None => None,
        };
        let rows = parse_count(path, "rows", get("rows")?)?;
        let cols = parse_count(path, "cols", get("cols")?)?;
        let slices = parse_count(path, "slices", get("slices")?)?;
        let spacing = match kv.get("spacing") {
            Some(s) => {
                let v = parse_list(path, "spacing", s)?;
                if v.len() != 3 {
                    return Err(Error::ingestion(path, "`spacing` needs three values"));
                }
                [v[0], v[1], v[2]]
            }
            None => [1.0; 3],
        };
        let pixel = match get("pixel")? {
            "i16" => PixelType::I16,
            "u16" => PixelType::U16,
            other => return Err(Error::ingestion(path, format!("unsupported pixel type `{other}`"))),
        };
        let per_slice = |key: &str| -> Result<Vec<f64>> {
            let v = parse_list(path, key, get(key)?)?;
            match v.len() {
                1 => Ok(vec![v[0]; slices]),
                n if n == slices => Ok(v),
                n => Err(Error::ingestion(path, format!("`{key}` has {n} values for {slices} slices"))),
            }
        };
        let slope = per_slice("rescale_slope")?;
        let intercept = per_slice("rescale_intercept")?;
        let slice_prefix = kv
            .get("slice_prefix")
            .cloned()
            .unwrap_or_else(|| DEFAULT_PREFIX.to_string());
        Ok(RawHeader {
            modality,
            rows,
            cols,
            slices,
            spacing,
            pixel,
            slope,
            intercept,
            slice_prefix,
        })
    }

    pub fn render(&self) -> String {
        let join = |v: &[f64]| {
            if v.iter().all(|&x| x == v[0]) {
                format!("{}", v[0])
            } else {
                v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
            }
        };
        let mut s = String::new();
        writeln!(s, "format = {FORMAT_TAG}").unwrap();
        if let Some(m) = self.modality {
            writeln!(s, "modality = {m}").unwrap();
        }
        writeln!(s, "rows = {}", self.rows).unwrap();
        writeln!(s, "cols = {}", self.cols).unwrap();
        writeln!(s, "slices = {}", self.slices).unwrap();
        writeln!(s, "spacing = {}, {}, {}", self.spacing[0], self.spacing[1], self.spacing[2]).unwrap();
        writeln!(s, "pixel = {}", self.pixel.name()).unwrap();
        writeln!(s, "rescale_slope = {}", join(&self.slope)).unwrap();
        writeln!(s, "rescale_intercept = {}", join(&self.intercept)).unwrap();
        writeln!(s, "slice_prefix = {}", self.slice_prefix).unwrap();
        s
    }

    pub fn slice_path(&self, header_path: &Path, k: usize) -> PathBuf {
        let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
        dir.join(format!("{}{k:04}.raw", self.slice_prefix))
    }
}

/// Stored pixel values `[S, H, W]` without rescaling.
pub fn read_pixels(path: &Path) -> Result<(RawHeader, Tensor)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    let header = RawHeader::parse(&text, path)?;
    let plane = header.rows * header.cols;
    let mut data = Vec::with_capacity(plane * header.slices);
    for k in 0..header.slices {
        let sp = header.slice_path(path, k);
        let bytes = std::fs::read(&sp).map_err(|e| Error::ingestion(&sp, e.to_string()))?;
        if bytes.len() != plane * 2 {
            return Err(Error::ingestion(
                &sp,
                format!("expected {} bytes for {}x{} pixels, found {}", plane * 2, header.rows, header.cols, bytes.len()),
            ));
        }
        data.extend(bytes.chunks_exact(2).map(|b| header.pixel.decode([b[0], b[1]])));
    }
    let t = Tensor::new(&[header.slices, header.rows, header.cols], data)?;
    Ok((header, t))
}

/// Reads a volume in physical units.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let (h, pixels) = read_pixels(path)?;
    Ok(Volume {
        data: dicom_to_hu_per_slice(&pixels, &h.slope, &h.intercept)?,
        spacing: h.spacing,
        modality: h.modality,
    })
}

/// Writes `vol` (physical units) with the given storage type, choosing one
/// slope/intercept for the whole volume so the value range fits the pixel
/// type. Integer-valued volumes that fit are stored exactly.
pub fn write_volume(path: &Path, vol: &Volume, pixel: PixelType) -> Result<RawHeader> {
    let [s, h, w] = vol.dims()?;
    if !vol.data.is_finite() {
        return Err(Error::invalid("cannot store non-finite values"));
    }
    let (lo, hi) = vol
        .data
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (pmin, pmax) = pixel.range();
    let integral = vol.data.data().iter().all(|v| v.fract() == 0.0);
    let (slope, intercept) = if integral && lo >= pmin && hi <= pmax {
        (1.0, 0.0)
    } else if hi > lo {
        let slope = (hi - lo) / (pmax - pmin);
        (slope, lo - slope * pmin)
    } else {
        (1.0, lo - pmin)
    };
    let header = RawHeader {
        modality: vol.modality,
        rows: h,
        cols: w,
        slices: s,
        spacing: vol.spacing,
        pixel,
        slope: vec![slope; s],
        intercept: vec![intercept; s],
        slice_prefix: path
            .file_stem()
            .map(|st| format!("{}_", st.to_string_lossy()))
            .unwrap_or_else(|| DEFAULT_PREFIX.to_string()),
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let plane = h * w;
    for k in 0..s {
        let bytes: Vec<u8> = vol.data.data()[k * plane..(k + 1) * plane]
            .iter()
            .flat_map(|&v| pixel.encode(((v - intercept) / slope).round().clamp(pmin, pmax)))
            .collect();
        std::fs::write(header.slice_path(path, k), bytes)?;
    }
    std::fs::write(path, header.render())?;
    Ok(header)
}
