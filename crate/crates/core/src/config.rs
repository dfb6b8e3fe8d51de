//! One TOML document describing a whole experiment.
//!
//! Nested `training.mode`, `training.seed` and `eval.seed` default to the
//! top-level `model.mode` and `seed` when the document leaves them out.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_synth, load_dataset, split_dataset, Dataset, DatasetFormat, Split, SynthSpec};
use crate::evaluation::EvalConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// File name of the fully expanded config written beside outputs.
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Synth(SynthSpec),
    /// One subdirectory per class.  Without `test_path` the images are
    /// split by `train_fraction`.
    ImageDirectory {
        path: PathBuf,
        #[serde(default)]
        test_path: Option<PathBuf>,
    },
    CifarBinary {
        path: PathBuf,
        #[serde(default)]
        test_path: Option<PathBuf>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub path: PathBuf,
    pub format: DatasetFormat,
    pub train_fraction: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::new(),
            format: DatasetFormat::ImageDirectory,
            train_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub transfer: Option<TransferConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::default(),
            train_fraction: 0.8,
            split_seed: 7,
            transfer: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: default_output_dir(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Train/test splits ready for pretraining and probing.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

fn has_key(raw: &toml::Table, table: &str, key: &str) -> bool {
    raw.get(table)
        .and_then(|t| t.as_table())
        .is_some_and(|t| t.contains_key(key))
}

fn scoped(prefix: &str, problems: Vec<String>) -> impl Iterator<Item = String> + '_ {
    problems.into_iter().map(move |p| {
        if p.starts_with(prefix) {
            p
        } else {
            format!("{prefix}{p}")
        }
    })
}

impl ExperimentConfig {
    /// Parses a document and fills the derived nested fields.  Syntax
    /// errors and unknown keys are reported here; semantic checks are left
    /// to [`ExperimentConfig::validate`].
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        if !has_key(&raw, "training", "mode") {
            cfg.training.mode = cfg.model.mode;
        }
        if !has_key(&raw, "training", "seed") {
            cfg.training.seed = cfg.seed;
        }
        if !has_key(&raw, "eval", "seed") {
            cfg.eval.seed = cfg.seed;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(p) => Error::Config(p.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            other => other,
        })
    }

    /// Overrides the top-level seed and every seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.training.seed = seed;
        self.eval.seed = seed;
    }

    /// Every problem found, in document order.  Checks that need the
    /// loaded images (batch remainders, channel counts) happen later in
    /// [`crate::training::validate_setup`].
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            problems.push(format!(
                "schema_version must be {SCHEMA_VERSION}, got {}",
                self.schema_version
            ));
        }
        if self.output_dir.as_os_str().is_empty() {
            problems.push("output_dir must not be empty".into());
        }
        problems.extend(self.validate_data());
        problems.extend(scoped("model.", self.model.validate()));
        problems.extend(scoped("training.", self.training.validate()));
        if self.training.mode != self.model.mode {
            problems.push(format!(
                "training.mode {:?} disagrees with model.mode {:?}",
                self.training.mode, self.model.mode
            ));
        }
        if self.training.strategy.output_size != self.model.encoder.input_size {
            problems.push(format!(
                "training.strategy.output_size {} must equal model.encoder.input_size {}",
                self.training.strategy.output_size, self.model.encoder.input_size
            ));
        }
        problems.extend(scoped("eval.", self.eval.validate()));
        problems
    }

    fn validate_data(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let needs_split = match &self.data.source {
            DataSource::Synth(spec) => {
                problems.extend(scoped("data.source.", spec.validate()));
                true
            }
            DataSource::ImageDirectory { path, test_path } | DataSource::CifarBinary { path, test_path } => {
                for (key, p) in [("path", Some(path)), ("test_path", test_path.as_ref())] {
                    if let Some(p) = p {
                        if p.as_os_str().is_empty() {
                            problems.push(format!("data.source.{key} must not be empty"));
                        } else if !p.exists() {
                            problems.push(format!("data.source.{key}: {} does not exist", p.display()));
                        }
                    }
                }
                test_path.is_none()
            }
        };
        if needs_split && !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            problems.push(format!(
                "data.train_fraction must lie strictly between 0 and 1, got {}",
                self.data.train_fraction
            ));
        }
        if let Some(t) = &self.data.transfer {
            if !t.path.exists() {
                problems.push(format!("data.transfer.path: {} does not exist", t.path.display()));
            }
            if !(t.train_fraction > 0.0 && t.train_fraction < 1.0) {
                problems.push(format!(
                    "data.transfer.train_fraction must lie strictly between 0 and 1, got {}",
                    t.train_fraction
                ));
            }
        }
        problems
    }

    /// Fails with the full problem list when anything is off.
    pub fn check(&self) -> Result<()> {
        let problems = self.validate();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// The document with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the resolved document.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load_splits(&self) -> Result<Splits> {
        let (format, path, test_path) = match &self.data.source {
            DataSource::Synth(spec) => {
                let all = generate_synth(spec)?;
                let (train, test) = split_dataset(&all, self.data.train_fraction, self.data.split_seed)?;
                return Ok(Splits { train, test });
            }
            DataSource::ImageDirectory { path, test_path } => (DatasetFormat::ImageDirectory, path, test_path),
            DataSource::CifarBinary { path, test_path } => (DatasetFormat::CifarBinary, path, test_path),
        };
        let all = load_dataset(path, format)?;
        match test_path {
            Some(tp) => {
                let mut test = load_dataset(tp, format)?;
                if test.class_names != all.class_names {
                    return Err(Error::Dataset(format!(
                        "{} and {} name different classes",
                        path.display(),
                        tp.display()
                    )));
                }
                let mut train = all;
                train.split = Split::Train;
                test.split = Split::Test;
                Ok(Splits { train, test })
            }
            None => {
                let (train, test) = split_dataset(&all, self.data.train_fraction, self.data.split_seed)?;
                Ok(Splits { train, test })
            }
        }
    }

    pub fn load_transfer(&self) -> Result<Option<Dataset>> {
        match &self.data.transfer {
            Some(t) => Ok(Some(load_dataset(&t.path, t.format)?)),
            None => Ok(None),
        }
    }
}
