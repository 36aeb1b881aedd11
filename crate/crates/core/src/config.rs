//! Run configuration shared by every command.
//!
//! ```toml
//! trials = 10
//!
//! [data.synthetic]          # or: [data] manifest = "path/to/manifest.toml"
//! n = 2000
//! v = 2
//! m = 3
//! dim_common = 4
//! dim_unique = 4
//! noise_std = 0.1
//! label_mix = [1.0, 0.85, 0.85]
//! label_scale = 10.0
//! seed = 0
//!
//! [train]
//! dim_common = 2
//! dim_unique = 1
//! epochs = 100
//!
//! [train.hyper]
//! beta1 = 1e-4
//!
//! [sweep]
//! kind = "beta12"
//! beta1 = [1e-6, 1e-4, 1e-2]
//! beta2 = [1e-6, 1e-4, 1e-2]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic, load_dataset, MatrixFormat, MultiViewDataset, OracleInfo, SyntheticSpec};
use crate::error::{CimlError, Result};
use crate::evaluation::{ProbeConfig, SweepGrid};
use crate::info::MineProbeConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub trials: usize,
    /// Relative paths are resolved against the output root.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Matrix format for written datasets and embeddings.
    pub format: MatrixFormat,
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
    pub audit: MineProbeConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            trials: 10,
            output_dir: None,
            format: MatrixFormat::Text,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            sweep: None,
            audit: MineProbeConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CimlError::Config(e.to_string()))
    }

    /// Read a config file; a relative manifest path is taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CimlError::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        if let Some(m) = &config.data.manifest {
            if m.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                config.data.manifest = Some(base.join(m));
            }
        }
        Ok(config)
    }

    /// Every field, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CimlError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.manifest, &self.data.synthetic) {
            (Some(_), None) => {}
            (None, Some(spec)) => spec.validate()?,
            _ => {
                return Err(CimlError::Config(
                    "exactly one of data.manifest and data.synthetic must be set".into(),
                ))
            }
        }
        if self.trials == 0 {
            return Err(CimlError::Config("trials must be >= 1".into()));
        }
        self.train.validate()
    }

    /// Load or generate the dataset; the oracle is present for synthetic data.
    pub fn dataset(&self) -> Result<(MultiViewDataset, Option<OracleInfo>)> {
        self.validate()?;
        match (&self.data.manifest, &self.data.synthetic) {
            (Some(path), _) => Ok((load_dataset(path)?, None)),
            (_, Some(spec)) => {
                let (ds, oracle) = generate_synthetic(spec)?;
                Ok((ds, Some(oracle)))
            }
            _ => unreachable!("validated above"),
        }
    }

    /// `root/output_dir`, falling back to `root/fallback`.
    pub fn output_dir(&self, root: &Path, fallback: &str) -> PathBuf {
        match &self.output_dir {
            Some(d) => root.join(d),
            None => root.join(fallback),
        }
    }
}
