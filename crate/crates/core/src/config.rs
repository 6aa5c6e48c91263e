//! Pipeline configuration, loaded from TOML.
//!
//! Everything that can change a result must be written out: seeds, fold
//! count, stratification, augmentation and training settings. Only
//! `cache_dir` is optional. Relative paths resolve against the config
//! file's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::head::TrainConfig;
use crate::imageproc::AugmentConfig;
use crate::label::Label;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub split: u64,
    pub init: u64,
    pub train: u64,
    pub augment: u64,
}

/// Training hyperparameters; the shuffle seed comes from [`Seeds::train`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shuffle: bool,
}

impl TrainSettings {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            shuffle: self.shuffle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberConfig {
    pub name: String,
    /// `toypool` or a path to backbone metadata JSON.
    pub backbone: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub folds: usize,
    pub stratified: bool,
    pub positive_class: String,
    /// Augmented views per training sample per fold.
    pub augment_copies: usize,
    pub members: Vec<MemberConfig>,
    pub seeds: Seeds,
    pub augment: AugmentConfig,
    pub train: TrainSettings,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Parse a TOML file and resolve relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest);
        fix(&mut self.output_dir);
        if let Some(c) = self.cache_dir.as_mut() {
            fix(c);
        }
        for m in &mut self.members {
            if m.backbone != crate::extractor::TOYPOOL && Path::new(&m.backbone).is_relative() {
                m.backbone = base.join(&m.backbone).to_string_lossy().into_owned();
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.folds < 2 {
            return invalid(format!("folds must be >= 2, got {}", self.folds));
        }
        if self.positive_class.parse::<Label>().ok() != Some(Label::Positive) {
            return invalid(format!("positive_class must be \"covid\", got {:?}", self.positive_class));
        }
        if self.members.is_empty() {
            return invalid("at least one member is required".into());
        }
        let mut names = HashSet::new();
        for m in &self.members {
            if !names.insert(m.name.as_str()) {
                return invalid(format!("duplicate member name {:?}", m.name));
            }
            if m.name == "ensemble" {
                return invalid("member name \"ensemble\" is reserved".into());
            }
        }
        if self.augment_copies == 0 {
            return invalid("augment_copies must be >= 1".into());
        }
        self.augment.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.with_seed(0).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Hash of the result-affecting settings. Paths are excluded; inputs are
    /// identified by content hashes in the run provenance instead.
    pub fn settings_hash(&self) -> String {
        #[derive(Serialize)]
        struct Settings<'a> {
            folds: usize,
            stratified: bool,
            positive_class: &'a str,
            augment_copies: usize,
            members: Vec<&'a str>,
            seeds: &'a Seeds,
            augment: &'a AugmentConfig,
            train: &'a TrainSettings,
        }
        let s = Settings {
            folds: self.folds,
            stratified: self.stratified,
            positive_class: &self.positive_class,
            augment_copies: self.augment_copies,
            members: self.members.iter().map(|m| m.name.as_str()).collect(),
            seeds: &self.seeds,
            augment: &self.augment,
            train: &self.train,
        };
        hex::encode(Sha256::digest(serde_json::to_vec(&s).expect("settings serialize")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
manifest = "corpus/manifest.csv"
output_dir = "out"
folds = 5
stratified = true
positive_class = "covid"
augment_copies = 1

[[members]]
name = "resnet18"
backbone = "models/resnet18.json"

[[members]]
name = "pool"
backbone = "toypool"

[seeds]
split = 1
init = 2
train = 3
augment = 4

[augment]
enabled = true
flip_x_prob = 0.5
flip_y_prob = 0.5
rotation_range_deg = 10.0
shear_range = 0.3

[train]
epochs = 15
batch_size = 8
learning_rate = 5e-5
shuffle = true
"#;

    #[test]
    fn parses_and_resolves() {
        let mut cfg = PipelineConfig::from_toml_str(SAMPLE).unwrap();
        cfg.validate().unwrap();
        cfg.resolve_paths(Path::new("/base"));
        assert_eq!(cfg.manifest, PathBuf::from("/base/corpus/manifest.csv"));
        assert_eq!(cfg.members[0].backbone, "/base/models/resnet18.json");
        assert_eq!(cfg.members[1].backbone, "toypool");
        assert_eq!(cfg.augment, AugmentConfig::published());
        assert_eq!(cfg.train.with_seed(3), TrainConfig::published(3));
    }

    #[test]
    fn missing_seed_is_rejected() {
        let text = SAMPLE.replace("augment = 4\n", "");
        assert!(matches!(PipelineConfig::from_toml_str(&text), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn validation_failures() {
        let base = PipelineConfig::from_toml_str(SAMPLE).unwrap();
        let mut c = base.clone();
        c.folds = 1;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.positive_class = "normal".into();
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.members[1].name = "resnet18".into();
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.train.learning_rate = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_paths_but_not_seeds() {
        let a = PipelineConfig::from_toml_str(SAMPLE).unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.settings_hash(), b.settings_hash());
        b.seeds.train = 99;
        assert_ne!(a.settings_hash(), b.settings_hash());
    }
}
