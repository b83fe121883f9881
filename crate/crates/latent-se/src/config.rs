//! Versioned JSON run configuration. Unknown keys are rejected; the
//! version field must match. Run directories are content-addressed by the
//! hash of the canonical config serialization.

use crate::codec::{CodecConfig, CodecPretrainConfig};
use crate::conformer::ConformerConfig;
use crate::dataset::{MixtureSpec, NoiseKind};
use crate::error::{Error, Result};
use crate::models::{ModelConfig, Variant};
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub mixture: MixtureSpec,
    pub noise: NoiseKind,
    pub count: usize,
    pub valid_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub bidi: ConformerConfig,
    pub causal: ConformerConfig,
    pub depth: ConformerConfig,
    pub quantize_feedback: bool,
    pub staged_ft: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub fft: usize,
    pub hop: usize,
}

/// File-system inputs consumed by commands that chain on earlier artifacts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub codec_checkpoint: Option<PathBuf>,
    pub model_checkpoint: Option<PathBuf>,
    pub dataset_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    pub codec: CodecConfig,
    pub codec_pretrain: CodecPretrainConfig,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl Config {
    pub fn desk() -> Self {
        Self {
            version: CONFIG_VERSION,
            codec: CodecConfig::desk(),
            codec_pretrain: CodecPretrainConfig::desk(),
            dataset: DatasetSection {
                mixture: MixtureSpec {
                    snr_db_low: -6.0,
                    snr_db_high: 3.0,
                    segment_seconds: 0.5,
                    sample_rate: 8000,
                    seed: 11,
                },
                noise: NoiseKind::default(),
                count: 200,
                valid_fraction: 0.1,
            },
            model: ModelSection {
                bidi: ConformerConfig::desk(false),
                causal: ConformerConfig::desk(true),
                depth: ConformerConfig::desk(true),
                quantize_feedback: true,
                staged_ft: false,
                seed: 7,
            },
            train: TrainConfig::desk(),
            eval: EvalSection { fft: 256, hop: 64 },
            paths: PathsSection::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.codec.validate()?;
        self.dataset.mixture.validate()?;
        self.train.validate()?;
        if self.dataset.count == 0 {
            return Err(Error::Config("dataset.count must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dataset.valid_fraction) {
            return Err(Error::Config("dataset.valid_fraction must be in [0, 1)".into()));
        }
        if self.dataset.mixture.sample_rate != self.codec.sample_rate {
            return Err(Error::Config(
                "dataset sample rate must match the codec sample rate".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        let config: Config = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    /// Override every seed with one value (the CLI --seed flag).
    pub fn override_seed(&mut self, seed: u64) {
        self.dataset.mixture.seed = seed;
        self.codec_pretrain.seed = seed.wrapping_add(1);
        self.model.seed = seed.wrapping_add(2);
        self.train.seed = seed.wrapping_add(3);
    }

    /// Short content hash of the canonical serialization.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex_prefix(&digest, 8)
    }

    /// Assemble the full model configuration for one variant.
    pub fn model_config(&self, variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            codec: self.codec.clone(),
            bidi: self.model.bidi.clone(),
            causal: self.model.causal.clone(),
            depth: self.model.depth.clone(),
            quantize_feedback: self.model.quantize_feedback,
            staged_ft: self.model.staged_ft,
            seed: self.model.seed,
        }
    }
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut out = String::new();
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
        if out.len() >= chars {
            break;
        }
    }
    out.truncate(chars);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn desk_config_roundtrips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("desk.json");
        let config = Config::desk();
        config.validate().unwrap();
        config.save(&path).unwrap();
        let back = Config::load(&path).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let mut value: serde_json::Value =
            serde_json::to_value(Config::desk()).unwrap();
        value["surprise"] = serde_json::json!(1);
        std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        assert!(matches!(Config::load(&path), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v9.json");
        let mut value: serde_json::Value = serde_json::to_value(Config::desk()).unwrap();
        value["version"] = serde_json::json!(9);
        std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        assert!(matches!(Config::load(&path), Err(Error::Config(_))));
    }

    #[test]
    fn content_hash_tracks_content() {
        let a = Config::desk();
        let mut b = Config::desk();
        assert_eq!(a.content_hash(), b.content_hash());
        b.train.seed += 1;
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash().len(), 8);
    }

    #[test]
    fn missing_config_is_a_data_error() {
        let err = Config::load("/nonexistent/x.json").unwrap_err();
        assert_eq!(err.category(), crate::error::ErrorCategory::Data);
    }
}
