//! Denoising objective: per-pixel MAE plus a weighted Sobel edge term.
//!
//! The four fixed 3x3 kernels (cross-correlation, reflect-padded input):
//!
//! ```text
//! horizontal      vertical        diag ↘          diag ↗
//! -1  0  1        -1 -2 -1         0  1  2        -2 -1  0
//! -2  0  2         0  0  0        -1  0  1        -1  0  1
//! -1  0  1         1  2  1        -2 -1  0         0  1  2
//! ```

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Tensor};
use crate::tensor_ops;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SobelDirection {
    Horizontal,
    Vertical,
    DiagDown,
    DiagUp,
}

impl SobelDirection {
    pub const ALL: [SobelDirection; 4] = [
        SobelDirection::Horizontal,
        SobelDirection::Vertical,
        SobelDirection::DiagDown,
        SobelDirection::DiagUp,
    ];

    pub fn kernel(self) -> [[f64; 3]; 3] {
        match self {
            SobelDirection::Horizontal => [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]],
            SobelDirection::Vertical => [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]],
            SobelDirection::DiagDown => [[0.0, 1.0, 2.0], [-1.0, 0.0, 1.0], [-2.0, -1.0, 0.0]],
            SobelDirection::DiagUp => [[-2.0, -1.0, 0.0], [-1.0, 0.0, 1.0], [0.0, 1.0, 2.0]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    pub directions: Vec<SobelDirection>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            directions: SobelDirection::ALL.to_vec(),
        }
    }
}

impl LossConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        LossConfig {
            lambda,
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", format!("must be finite and >= 0, got {}", self.lambda)));
        }
        if self.directions.is_empty() {
            return Err(Error::config("directions", "at least one Sobel direction is required"));
        }
        Ok(())
    }

    fn kernel_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.directions.len() * 9);
        for d in &self.directions {
            data.extend(d.kernel().iter().flatten());
        }
        Tensor::new(&[self.directions.len(), 1, 3, 3], data).expect("kernel shape")
    }
}

fn sobel_var(x: &Var, kernels: Tensor) -> Result<Var> {
    let [_, c, h, w] = x.value().dims4()?;
    if c != 1 {
        return Err(Error::invalid(format!("sobel maps need a single-channel input, got {c} channels")));
    }
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("sobel maps need at least 2x2 pixels, got {h}x{w}")));
    }
    let padded = x.gather(Rc::new(tensor_ops::reflect_pad_map(x.shape(), 1, 1, 1, 1)?))?;
    padded.conv2d(&Var::constant(kernels), None, 0)
}

/// Directional gradient maps `[N, 4, H, W]` of a single-channel image batch.
pub fn sobel_maps(x: &FeatureMap) -> Result<FeatureMap> {
    let cfg = LossConfig::default();
    Ok(sobel_var(&Var::constant(x.clone()), cfg.kernel_tensor())?.value().clone())
}

/// Loss value with its two components.
#[derive(Debug, Clone)]
pub struct DenoiseLoss {
    pub total: Var,
    pub mae: f64,
    pub sobel: f64,
}

impl DenoiseLoss {
    pub fn total_value(&self) -> f64 {
        self.total.value().data()[0]
    }
}

/// `mae + λ·sobel`, where both terms are per-image means averaged over the
/// batch (all images share a size, so that is the global mean).
pub fn denoise_loss(pred: &Var, target: &Var, cfg: &LossConfig) -> Result<DenoiseLoss> {
    cfg.validate()?;
    if pred.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "loss: prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        )));
    }
    let diff = pred.sub(target)?;
    let mae = diff.abs().mean();
    // The Sobel operator is linear, so φ(a) - φ(b) = φ(a - b).
    let sobel = sobel_var(&diff, cfg.kernel_tensor())?.square().mean();
    let (mae_v, sobel_v) = (mae.value().data()[0], sobel.value().data()[0]);
    let total = if cfg.lambda == 0.0 {
        mae
    } else {
        mae.add(&sobel.scale(cfg.lambda))?
    };
    Ok(DenoiseLoss {
        total,
        mae: mae_v,
        sobel: sobel_v,
    })
}

/// Plain-tensor form of [`denoise_loss`], returning `(total, mae, sobel)`.
pub fn denoise_loss_value(pred: &FeatureMap, target: &FeatureMap, cfg: &LossConfig) -> Result<(f64, f64, f64)> {
    let l = denoise_loss(&Var::constant(pred.clone()), &Var::constant(target.clone()), cfg)?;
    Ok((l.total_value(), l.mae, l.sobel))
}
