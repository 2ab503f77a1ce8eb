//! Run configuration: one TOML file describes a whole experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{DatasetKind, FovParams, SplitOverride};
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::nets::ModelSpec;
use crate::sampler::{AugmentConfig, SamplerConfig};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub root: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitOverride>,
    #[serde(default)]
    pub fov: FovParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    #[serde(default = "ModelSpec::vlight")]
    pub model: ModelSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn new(kind: DatasetKind, root: impl Into<PathBuf>) -> Self {
        RunConfig {
            dataset: DatasetSection {
                kind,
                root: root.into(),
                split: None,
                fov: FovParams::default(),
            },
            model: ModelSpec::vlight(),
            sampler: SamplerConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            output_dir: default_output_dir(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampler.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        self.inference.validate(self.model.downsample_factor())?;
        if !self
            .sampler
            .patch_size
            .is_multiple_of(self.model.downsample_factor())
        {
            return Err(Error::Config(format!(
                "sampler.patch_size {} must be a multiple of {}",
                self.sampler.patch_size,
                self.model.downsample_factor()
            )));
        }
        // TOML integers are signed 64-bit.
        if self.train.seed > i64::MAX as u64 {
            return Err(Error::Config(
                "train.seed must fit in a signed 64-bit integer".into(),
            ));
        }
        Ok(())
    }

    /// Hash of everything that affects results. Paths are excluded, so the
    /// same experiment on a moved dataset keeps its identity.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
            if let Some(ds) = obj.get_mut("dataset").and_then(|d| d.as_object_mut()) {
                ds.remove("root");
            }
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        hex::encode(&digest[..8])
    }

    /// `<output_dir>/<kind>-<fingerprint>`
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir
            .join(format!("{}-{}", self.dataset.kind, self.fingerprint()))
    }
}
