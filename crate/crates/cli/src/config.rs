//! Run configuration: one strict JSON document.

use std::fs;
use std::path::{Path, PathBuf};

use mla_core::model::ModelConfig;
use mla_core::objectives::LossConfig;
use mla_core::pipeline::CorpusSizes;
use mla_core::synthworld::{Split, WorldConfig};
use mla_core::training::{language_seed, ExtensionPolicy, StageConfig, StageKind};
use mla_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtensionConfig {
    pub language: String,
    pub policy: ExtensionPolicy,
    pub nlt: StageConfig,
    pub le: Option<StageConfig>,
}

impl Default for ExtensionConfig {
    fn default() -> Self {
        Self {
            language: "xd".into(),
            policy: ExtensionPolicy::RowsOnly,
            nlt: StageConfig::new(StageKind::Nlt, 600, 1e-4, 64),
            le: Some(StageConfig::new(StageKind::Le, 60, 1e-4, 64)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { split: Split::Test }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// A `world-gen` output directory to read corpora from instead of
    /// generating them in memory.
    pub corpora: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    /// Languages trained by the main schedule.
    pub languages: Vec<String>,
    pub corpus: CorpusSizes,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub stages: Vec<StageConfig>,
    pub extension: ExtensionConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            world: WorldConfig::default(),
            languages: ["xa", "xb", "xc"].map(String::from).to_vec(),
            corpus: CorpusSizes::default(),
            model: ModelConfig {
                num_layers: 2,
                ..ModelConfig::default()
            },
            loss: LossConfig::default(),
            stages: vec![
                StageConfig::new(StageKind::VlpPretrain, 1600, 1e-3, 64),
                StageConfig::new(StageKind::Nlt, 600, 1e-4, 64),
                StageConfig::new(StageKind::Le, 60, 1e-4, 64),
            ],
            extension: ExtensionConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        for s in &self.stages {
            s.validate()?;
        }
        self.extension.nlt.validate()?;
        if let Some(le) = &self.extension.le {
            le.validate()?;
        }
        for l in self.languages.iter().chain([&self.extension.language]) {
            if !self.world.languages.iter().any(|w| &w.tag == l) {
                return Err(Error::Config(format!(
                    "language {l:?} is not defined in world.languages"
                )));
            }
        }
        if self.languages.contains(&self.extension.language) {
            return Err(Error::Config(format!(
                "extension.language {:?} is also a main language",
                self.extension.language
            )));
        }
        if let Some(dir) = &self.paths.corpora {
            if !dir.is_dir() {
                return Err(Error::Config(format!(
                    "paths.corpora {} is not a directory",
                    dir.display()
                )));
            }
        }
        Ok(())
    }

    /// Stage `index` with its seed tied to the run seed.
    pub fn resolved_stage(&self, index: usize) -> StageConfig {
        let s = &self.stages[index];
        StageConfig {
            seed: language_seed(self.seed ^ s.seed, s.kind.as_str()),
            ..s.clone()
        }
    }

    /// First stage of `kind`, seeded as in [`RunConfig::resolved_stage`].
    pub fn stage(&self, kind: StageKind) -> Result<StageConfig> {
        let i = self
            .stages
            .iter()
            .position(|s| s.kind == kind)
            .ok_or_else(|| Error::Config(format!("no {} stage in config.stages", kind.as_str())))?;
        Ok(self.resolved_stage(i))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex prefix of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        short_hash(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    /// Hash of everything that determines the generated corpora.
    pub fn world_hash(&self) -> String {
        let key = serde_json::json!({
            "seed": self.seed,
            "world": self.world,
            "corpus": self.corpus,
        });
        short_hash(key.to_string().as_bytes())
    }
}

pub fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(6)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Parses a config document; blank input means all defaults.
pub fn parse_config(text: &str, path: &Path) -> Result<RunConfig> {
    let text = if text.trim().is_empty() { "{}" } else { text };
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let inner = e.into_inner();
        Error::Parse {
            path: path.to_path_buf(),
            line: inner.line(),
            msg: format!("key {key}: {inner}"),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}
