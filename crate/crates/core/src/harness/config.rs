//! Experiment configuration files.
//!
//! One TOML file per experiment. Unknown keys anywhere are errors, and every
//! error carries the dotted path of the offending field.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DataError, DataKind, DatasetSpec};
use crate::decoder::{Decoder, DecoderConfig};
use crate::error::ModelError;
use crate::generator::Generator;
use crate::imle::{ImleConfig, TrainError};
use crate::mapper::MapperConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config value at `{path}`: {reason}")]
    Invalid { path: String, reason: String },
}

impl ConfigError {
    /// Dotted path of the offending field.
    pub fn path(&self) -> &str {
        match self {
            Self::Parse { path, .. } | Self::Invalid { path, .. } => path,
        }
    }

    fn invalid(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Invalid {
            path: path.into(),
            reason: reason.into(),
        }
    }

    fn model(section: &str, e: ModelError) -> Self {
        match e {
            ModelError::Config { field, reason } => Self::invalid(format!("{section}.{field}"), reason),
            other => Self::invalid(section, other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussianRing,
    TwoMoons,
    GridMixture,
    MicroPatterns,
}

/// Flat dataset section. Parameters that do not apply to `kind` must be
/// left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n: usize,
    /// Seed of the data stream; independent of the training seed so that
    /// seed sweeps see the same data.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
}

impl DatasetConfig {
    /// The frozen 8-mode ring.
    pub fn ring8(n: usize) -> Self {
        Self {
            kind: DatasetKind::GaussianRing,
            n,
            seed: 0,
            modes: Some(8),
            radius: Some(1.0),
            std: Some(0.05),
            noise: None,
            grid: None,
            spacing: None,
            jitter: None,
        }
    }

    pub fn to_spec(&self) -> Result<DatasetSpec, ConfigError> {
        let allowed: &[&str] = match self.kind {
            DatasetKind::GaussianRing => &["modes", "radius", "std"],
            DatasetKind::TwoMoons => &["noise"],
            DatasetKind::GridMixture => &["grid", "spacing", "std"],
            DatasetKind::MicroPatterns => &["jitter"],
        };
        let present = [
            ("modes", self.modes.is_some()),
            ("radius", self.radius.is_some()),
            ("std", self.std.is_some()),
            ("noise", self.noise.is_some()),
            ("grid", self.grid.is_some()),
            ("spacing", self.spacing.is_some()),
            ("jitter", self.jitter.is_some()),
        ];
        if let Some((name, _)) = present.iter().find(|(name, set)| *set && !allowed.contains(name)) {
            return Err(ConfigError::invalid(
                format!("dataset.{name}"),
                format!("does not apply to {:?} datasets", self.kind),
            ));
        }
        let kind = match self.kind {
            DatasetKind::GaussianRing => DataKind::GaussianRing {
                modes: self.modes.unwrap_or(8),
                radius: self.radius.unwrap_or(1.0),
                std: self.std.unwrap_or(0.05),
            },
            DatasetKind::TwoMoons => DataKind::TwoMoons {
                noise: self.noise.unwrap_or(0.05),
            },
            DatasetKind::GridMixture => DataKind::GridMixture {
                grid: self.grid.unwrap_or(5),
                spacing: self.spacing.unwrap_or(1.0),
                std: self.std.unwrap_or(0.05),
            },
            DatasetKind::MicroPatterns => DataKind::MicroPatterns {
                jitter: self.jitter.unwrap_or(0.1),
            },
        };
        let spec = DatasetSpec {
            kind,
            n: self.n,
            seed: self.seed,
        };
        spec.validate().map_err(|e| match e {
            DataError::Invalid { field, reason } => ConfigError::invalid(format!("dataset.{field}"), reason),
            other => ConfigError::invalid("dataset", other.to_string()),
        })?;
        Ok(spec)
    }
}

fn default_k() -> usize {
    3
}
fn default_n_fake() -> usize {
    1024
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    /// Generated samples per evaluation.
    #[serde(default = "default_n_fake")]
    pub n_fake: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            n_fake: default_n_fake(),
        }
    }
}

/// Mapper variants compared by the depth ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub mappers: Vec<MapperConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub mapper: MapperConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    pub imle: ImleConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablate: Option<AblateConfig>,
}

/// The parts of a config that determine what a checkpoint means.
#[derive(Serialize)]
struct DigestView<'a> {
    seed: u64,
    dataset: &'a DatasetConfig,
    mapper: &'a MapperConfig,
    decoder: &'a DecoderConfig,
    imle: ImleConfig,
}

impl ExperimentConfig {
    /// Parses and validates a config file's text.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Parse {
            path: String::new(),
            message: e.to_string(),
        })?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let spec = self.dataset.to_spec()?;
        self.mapper.validate().map_err(|e| ConfigError::model("mapper", e))?;
        Decoder::new(self.decoder.clone(), self.mapper.d(), spec.dim()).map_err(|e| ConfigError::model("decoder", e))?;
        self.imle.validate().map_err(|e| match e {
            TrainError::Invalid { field, reason } => ConfigError::invalid(format!("imle.{field}"), reason),
            other => ConfigError::invalid("imle", other.to_string()),
        })?;
        if self.metrics.k == 0 {
            return Err(ConfigError::invalid("metrics.k", "must be at least 1"));
        }
        if self.metrics.n_fake <= self.metrics.k {
            return Err(ConfigError::invalid("metrics.n_fake", "must exceed metrics.k"));
        }
        if let Some(a) = &self.ablate {
            if a.mappers.is_empty() {
                return Err(ConfigError::invalid("ablate.mappers", "must list at least one mapper"));
            }
            for (i, m) in a.mappers.iter().enumerate() {
                m.validate().map_err(|e| ConfigError::model(&format!("ablate.mappers[{i}]"), e))?;
                if m.d() != self.mapper.d() {
                    return Err(ConfigError::invalid(
                        format!("ablate.mappers[{i}].d"),
                        "ablation variants must share the main mapper's width",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec, ConfigError> {
        self.dataset.to_spec()
    }

    pub fn generator(&self) -> Result<Generator, ConfigError> {
        let spec = self.dataset.to_spec()?;
        Generator::new(self.mapper.clone(), self.decoder.clone(), spec.dim()).map_err(|e| ConfigError::model("mapper", e))
    }

    /// SHA-256 over the canonical TOML of everything that fixes the meaning
    /// of a checkpoint. The step budget, metric settings and ablation list
    /// are left out so a run can be extended or re-evaluated.
    pub fn digest(&self) -> [u8; 32] {
        let mut imle = self.imle.clone();
        imle.steps = 0;
        let view = DigestView {
            seed: self.seed,
            dataset: &self.dataset,
            mapper: &self.mapper,
            decoder: &self.decoder,
            imle,
        };
        let text = toml::to_string(&view).expect("config serialises");
        Sha256::digest(text.as_bytes()).into()
    }

    /// First 12 hex digits of [`Self::digest`].
    pub fn short_digest(&self) -> String {
        hex12(&self.digest())
    }

    /// Same experiment with a different mapper.
    pub fn with_mapper(&self, mapper: MapperConfig) -> Self {
        Self {
            mapper,
            ablate: None,
            ..self.clone()
        }
    }
}

pub(crate) fn hex12(d: &[u8; 32]) -> String {
    d[..6].iter().map(|b| format!("{b:02x}")).collect()
}
