//! Text (TOML) run configuration.
//!
//! ```toml
//! [model]            # architecture, see ModelConfig
//! embed_dim = 32
//! depths = [2, 2, 1, 2, 2]
//! [model.toggles]
//! esga = true
//!
//! [train]            # optimizer and schedule, see TrainConfig
//! epochs = 3000
//! lambda = 0.1
//!
//! [data]
//! manifest = "train.txt"        # relative to this file
//! eval_manifest = "test.txt"
//! modality = "ct"
//! [data.synthetic]              # used with --synthetic
//! pairs = 2
//!
//! [eval]
//! averaging = "per_slice"       # or "per_volume"
//!
//! [budget]
//! max_params = 700000
//! ```
//!
//! Every section and key is optional; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synthetic::SyntheticConfig;
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::eval::Averaging;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub modality: Modality,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            eval_manifest: None,
            modality: Modality::Ct,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub averaging: Averaging,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budget {
    pub min_params: Option<usize>,
    pub max_params: Option<usize>,
}

impl Budget {
    pub fn check(&self, total: usize) -> Result<()> {
        if let Some(max) = self.max_params {
            if total > max {
                return Err(Error::config("budget.max_params", format!("{total} parameters exceed {max}")));
            }
        }
        if let Some(min) = self.min_params {
            if total < min {
                return Err(Error::config("budget.min_params", format!("{total} parameters are below {min}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub budget: Budget,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            Error::config(origin.display().to_string(), e.message().to_string())
        })?;
        let base = origin.parent().unwrap_or_else(|| Path::new("."));
        for p in [&mut cfg.data.manifest, &mut cfg.data.eval_manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// The resolved configuration with every default materialized.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }
}
