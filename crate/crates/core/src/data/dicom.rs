//! Read-only DICOM series ingestion (uncompressed 16-bit monochrome).

use std::path::{Path, PathBuf};

use dicom_dictionary_std::tags;
use dicom_object::{open_file, DefaultDicomObject, Tag};

use crate::data::{dicom_to_hu_per_slice, Modality, Volume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const NATIVE_SYNTAXES: [&str; 2] = [
    "1.2.840.10008.1.2",   // implicit VR little endian
    "1.2.840.10008.1.2.1", // explicit VR little endian
];

struct Slice {
    order: (f64, String),
    rows: usize,
    cols: usize,
    pixels: Vec<f64>,
    slope: f64,
    intercept: f64,
    spacing: [f64; 2],
    thickness: Option<f64>,
    modality: Option<Modality>,
}

fn required_int(obj: &DefaultDicomObject, tag: Tag, name: &str, path: &Path) -> Result<i64> {
    obj.element(tag)
        .map_err(|_| Error::ingestion(path, format!("missing {name} tag")))?
        .to_int::<i64>()
        .map_err(|e| Error::ingestion(path, format!("{name}: {e}")))
}

fn required_float(obj: &DefaultDicomObject, tag: Tag, name: &str, path: &Path) -> Result<f64> {
    obj.element(tag)
        .map_err(|_| Error::ingestion(path, format!("missing {name} tag")))?
        .to_float64()
        .map_err(|e| Error::ingestion(path, format!("{name}: {e}")))
}

fn optional_floats(obj: &DefaultDicomObject, tag: Tag) -> Option<Vec<f64>> {
    obj.element_opt(tag).ok().flatten()?.to_multi_float64().ok()
}

fn read_slice(path: &Path) -> Result<Slice> {
    let obj = open_file(path).map_err(|e| Error::ingestion(path, format!("not a readable DICOM file: {e}")))?;
    let ts = obj.meta().transfer_syntax().trim_end_matches('\0');
    if !NATIVE_SYNTAXES.contains(&ts) {
        return Err(Error::ingestion(path, format!("transfer syntax {ts} is not supported (native little endian only)")));
    }
    let rows = required_int(&obj, tags::ROWS, "Rows", path)? as usize;
    let cols = required_int(&obj, tags::COLUMNS, "Columns", path)? as usize;
    let bits = required_int(&obj, tags::BITS_ALLOCATED, "BitsAllocated", path)?;
    if bits != 16 {
        return Err(Error::ingestion(path, format!("BitsAllocated = {bits}, only 16 is supported")));
    }
    let spp = obj
        .element_opt(tags::SAMPLES_PER_PIXEL)
        .ok()
        .flatten()
        .and_then(|e| e.to_int::<i64>().ok())
        .unwrap_or(1);
    if spp != 1 {
        return Err(Error::ingestion(path, "only single-sample (monochrome) images are supported"));
    }
    let signed = required_int(&obj, tags::PIXEL_REPRESENTATION, "PixelRepresentation", path)? == 1;
    let slope = required_float(&obj, tags::RESCALE_SLOPE, "RescaleSlope", path)?;
    let intercept = required_float(&obj, tags::RESCALE_INTERCEPT, "RescaleIntercept", path)?;

    let bytes = obj
        .element(tags::PIXEL_DATA)
        .map_err(|_| Error::ingestion(path, "missing PixelData"))?
        .to_bytes()
        .map_err(|e| Error::ingestion(path, format!("PixelData: {e}")))?;
    if bytes.len() < rows * cols * 2 {
        return Err(Error::ingestion(
            path,
            format!("PixelData holds {} bytes, need {}", bytes.len(), rows * cols * 2),
        ));
    }
    let pixels = bytes[..rows * cols * 2]
        .chunks_exact(2)
        .map(|b| {
            if signed {
                i16::from_le_bytes([b[0], b[1]]) as f64
            } else {
                u16::from_le_bytes([b[0], b[1]]) as f64
            }
        })
        .collect();

    let z = optional_floats(&obj, tags::IMAGE_POSITION_PATIENT)
        .and_then(|v| v.get(2).copied())
        .or_else(|| {
            obj.element_opt(tags::INSTANCE_NUMBER)
                .ok()
                .flatten()
                .and_then(|e| e.to_float64().ok())
        })
        .unwrap_or(0.0);
    let spacing = optional_floats(&obj, tags::PIXEL_SPACING)
        .filter(|v| v.len() == 2)
        .map(|v| [v[0], v[1]])
        .unwrap_or([1.0, 1.0]);
    let thickness = optional_floats(&obj, tags::SLICE_THICKNESS).and_then(|v| v.first().copied());
    let modality = obj
        .element_opt(tags::MODALITY)
        .ok()
        .flatten()
        .and_then(|e| e.to_str().ok().map(|s| s.trim().to_string()))
        .and_then(|s| s.parse().ok());
    Ok(Slice {
        order: (z, path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()),
        rows,
        cols,
        pixels,
        slope,
        intercept,
        spacing,
        thickness,
        modality,
    })
}

/// Reads every regular file in `dir` as one slice, ordered by patient
/// z-position (instance number when absent, file name on ties), and applies
/// each slice's rescale.
pub fn read_series(dir: &Path) -> Result<Volume> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::ingestion(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != "DICOMDIR"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::ingestion(dir, "no DICOM files in directory"));
    }
    let mut slices = files.iter().map(|p| read_slice(p)).collect::<Result<Vec<_>>>()?;
    slices.sort_by(|a, b| a.order.0.total_cmp(&b.order.0).then_with(|| a.order.1.cmp(&b.order.1)));
    let (rows, cols) = (slices[0].rows, slices[0].cols);
    if slices.iter().any(|s| s.rows != rows || s.cols != cols) {
        return Err(Error::ingestion(dir, "slices differ in size"));
    }
    let modality = slices[0].modality;
    let mut data = Vec::with_capacity(slices.len() * rows * cols);
    for s in &slices {
        data.extend_from_slice(&s.pixels);
    }
    let raw = Tensor::new(&[slices.len(), rows, cols], data)?;
    let slopes: Vec<f64> = slices.iter().map(|s| s.slope).collect();
    let intercepts: Vec<f64> = slices.iter().map(|s| s.intercept).collect();
    let dz = if slices.len() > 1 {
        (slices[1].order.0 - slices[0].order.0).abs()
    } else {
        0.0
    };
    let slice_spacing = slices[0].thickness.filter(|_| dz == 0.0).unwrap_or(if dz > 0.0 { dz } else { 1.0 });
    Ok(Volume {
        data: dicom_to_hu_per_slice(&raw, &slopes, &intercepts)?,
        spacing: [slices[0].spacing[0], slices[0].spacing[1], slice_spacing],
        modality,
    })
}
