//! Hybrid Swin-attention denoising network for low-dose CT and PET.
//!
//! The crate carries its own reverse-mode autodiff over `f64` tensors
//! ([`autograd`]), the network modules built on it ([`attention`], [`swin`],
//! [`hic`], [`model`]), the training objective and runtime ([`objectives`],
//! [`train`]), data ingestion ([`data`]) and metrics ([`eval`]).

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hic;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod params;
pub mod swin;
pub mod tensor;
pub mod tensor_ops;
pub mod train;

pub use error::{Error, Result};
pub use model::{HsaNet, ModelConfig};
pub use tensor::{FeatureMap, Tensor};
