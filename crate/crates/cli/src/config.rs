//! Declarative run configuration (TOML) with command-line overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sfanet_core::heads::{EncoderConfig, ExtractorPreset, HeadConfig, ModelConfig, ModelKind};
use sfanet_core::metrics::DcfParams;
use sfanet_core::trainsched::TrainConfig;
use sfanet_core::{DecisionPolicy, EmotionGroup};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CONFIG_ENV: &str = "SFANET_CONFIG";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub provider: ProviderSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub name: ModelKind,
    /// `[rows, cols]`
    pub dims: [usize; 2],
    pub patch_size: usize,
    pub extractor: ExtractorPreset,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub aggregator_dim: Option<usize>,
    pub attention_heads: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            name: ModelKind::Sfnet,
            dims: [256, 256],
            patch_size: 32,
            extractor: ExtractorPreset::PatchMeanStd { grid: None },
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            aggregator_dim: None,
            attention_heads: 1,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.name, self.dims, self.extractor.clone());
        cfg.patch_size = self.patch_size;
        cfg.encoder = self.encoder.clone();
        cfg.head = self.head.clone();
        cfg.aggregator_dim = self.aggregator_dim;
        cfg.attention_heads = self.attention_heads;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    /// Raw emotion label -> group, overriding the built-in table.
    pub category_map: BTreeMap<String, EmotionGroup>,
    pub k: usize,
    pub seed: u64,
    /// JSONL embeddings; the downsampling stub is used when unset.
    pub embeddings: Option<PathBuf>,
    pub embedding_side: u32,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            validation: None,
            category_map: BTreeMap::new(),
            k: 5,
            seed: 0,
            embeddings: None,
            embedding_side: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub threshold: f64,
    pub dcf: DcfParams,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            threshold: DecisionPolicy::default().threshold(),
            dcf: DcfParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FacePartsSource {
    /// Fixed face layout for aligned crops.
    #[default]
    Stub,
    MaskDir,
    PresenceCsv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeSource {
    #[default]
    Stub,
    File,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub face_parts: FacePartsSource,
    pub face_parts_path: Option<PathBuf>,
    pub attributes: AttributeSource,
    pub attributes_path: Option<PathBuf>,
}

/// Values given on the command line; `None` keeps the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threshold: Option<f64>,
    pub k: Option<usize>,
    pub stub_providers: bool,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// Reads `path`, or the file named by `SFANET_CONFIG`, or the defaults.
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        let from_env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        match path.map(Path::to_path_buf).or(from_env) {
            Some(p) => {
                let text = fs::read_to_string(&p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                RunConfig::parse(&text)
            }
            None => Ok(RunConfig::default()),
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.data.seed = seed;
            self.train.seed = seed;
        }
        if let Some(t) = o.threshold {
            self.eval.threshold = t;
        }
        if let Some(k) = o.k {
            self.data.k = k;
        }
        if o.stub_providers {
            self.provider.face_parts = FacePartsSource::Stub;
            self.provider.attributes = AttributeSource::Stub;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: sfanet_core::Error| CliError::Usage(format!("invalid config: {e}"));
        DecisionPolicy::new(self.eval.threshold).map_err(bad)?;
        self.eval.dcf.validate().map_err(bad)?;
        self.train.validate().map_err(bad)?;
        if self.data.k == 0 {
            return Err(CliError::Usage("invalid config: k must be at least 1".into()));
        }
        if self.data.embedding_side == 0 {
            return Err(CliError::Usage(
                "invalid config: embedding_side must be at least 1".into(),
            ));
        }
        if self.provider.face_parts != FacePartsSource::Stub && self.provider.face_parts_path.is_none() {
            return Err(CliError::Usage(
                "invalid config: provider.face_parts_path is required".into(),
            ));
        }
        if self.provider.attributes != AttributeSource::Stub && self.provider.attributes_path.is_none() {
            return Err(CliError::Usage(
                "invalid config: provider.attributes_path is required".into(),
            ));
        }
        Ok(())
    }

    pub fn policy(&self) -> DecisionPolicy {
        DecisionPolicy::new(self.eval.threshold).expect("validated")
    }

    /// Hex SHA-256 of the resolved configuration's canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_parse() {
        let cfg = RunConfig::parse(
            r#"
            [model]
            name = "swinatten"
            dims = [64, 64]
            patch_size = 16
            extractor = { type = "patch_mean", grid = 4 }

            [data]
            k = 3
            category_map = { contempt = "negative" }

            [train]
            learning_rate = 0.001
            batch_size = 8

            [eval]
            threshold = 0.4
            dcf = { c_miss = 1.0, c_fa = 2.0, p_target = 0.5 }

            [provider]
            face_parts = "presence_csv"
            face_parts_path = "parts.csv"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.model.name, ModelKind::Swinatten);
        assert_eq!(cfg.data.k, 3);
        assert_eq!(cfg.data.category_map["contempt"], EmotionGroup::Negative);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.eval.dcf.c_fa, 2.0);
        cfg.validate().unwrap();
        assert_eq!(cfg.model.model_config().patch_size, 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[train]\nlearning_rat = 0.1").is_err());
        assert!(RunConfig::parse("[extra]\nx = 1").is_err());
        assert!(RunConfig::parse("[model]\nextractor = { type = \"patch_mean\", gird = 2 }").is_err());
    }

    #[test]
    fn overrides_and_validation() {
        let mut cfg = RunConfig::default();
        let h = cfg.hash();
        cfg.apply(&Overrides {
            seed: Some(4),
            threshold: Some(0.5),
            k: Some(2),
            stub_providers: true,
        });
        assert_eq!((cfg.train.seed, cfg.data.seed, cfg.data.k), (4, 4, 2));
        assert_ne!(cfg.hash(), h);
        cfg.eval.threshold = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.provider.attributes = AttributeSource::File;
        assert!(cfg.validate().is_err());
    }
}
