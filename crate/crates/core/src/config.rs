//! Run configuration files: a `[network]` table, an optional `[train]` table
//! and optional evaluation settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{NetworkConfig, StageSpec};
use crate::train::{Layout, LossKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Landmark pair whose distance normalizes NME; defaults by landmark count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_indices: Option<(usize, usize)>,
}

impl RunConfig {
    pub const PRESETS: [&'static str; 4] = ["plus-L", "plus-S", "toy", "toy-train"];

    pub fn preset(name: &str) -> Result<Self> {
        if name == "toy-train" {
            return Ok(Self::toy_train());
        }
        let network = NetworkConfig::preset(name).map_err(|_| {
            Error::config(format!(
                "unknown preset `{name}` (known: {})",
                Self::PRESETS.join(", ")
            ))
        })?;
        Ok(RunConfig {
            network,
            train: TrainConfig::default(),
            norm_indices: None,
        })
    }

    /// Small network and recipe for the 5-landmark synthetic task at 96×96.
    pub fn toy_train() -> Self {
        let network = NetworkConfig {
            input_size: 96,
            stem_width: 8,
            branch_widths: vec![16, 32],
            stages: vec![StageSpec {
                modules: 2,
                ccw_per_module: 1,
            }],
            dtype: crate::DType::F32,
            ..NetworkConfig::preset("toy").expect("toy preset exists")
        };
        let train = TrainConfig {
            batch_size: 8,
            epochs: 50,
            lr: 0.01,
            milestones: vec![40, 46],
            loss: LossKind::Bce,
            scale_range: 0.1,
            rotation_deg: 15.0,
            gaussian_sigma: 1.5,
            ..TrainConfig::default()
        };
        RunConfig {
            network,
            train,
            norm_indices: None,
        }
    }

    /// A preset name or a path to a TOML file.
    pub fn resolve(spec: &str) -> Result<Self> {
        let path = Path::new(spec);
        if path.exists() || spec.ends_with(".toml") {
            Self::load(path)
        } else {
            Self::preset(spec)
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let prefixed = |section: &str, e: Error| match e {
            Error::Config(m) => Error::config(format!("{section}.{m}")),
            other => other,
        };
        self.network.validate().map_err(|e| prefixed("network", e))?;
        self.train.validate()?;
        let l = self.network.landmarks;
        if let Some((i, j)) = self.norm_indices {
            if i >= l || j >= l || i == j {
                return Err(Error::config(format!(
                    "norm_indices: ({i}, {j}) is not a pair of distinct landmarks below {l}"
                )));
            }
        }
        Ok(())
    }

    /// Normalization pair for NME, from the file or the landmark layout.
    pub fn norm(&self) -> Result<(usize, usize)> {
        if let Some(n) = self.norm_indices {
            return Ok(n);
        }
        Layout::for_landmarks(self.network.landmarks)
            .map(Layout::norm_indices)
            .ok_or_else(|| {
                Error::config(format!(
                    "norm_indices: no default for {} landmarks, set it explicitly",
                    self.network.landmarks
                ))
            })
    }
}
