//! Run configuration: one TOML document with a section per module.
//!
//! ```toml
//! seed = 7
//!
//! [corpus]
//! languages = 4
//! train_per_language = 400
//!
//! [model]
//! variant = "gen"
//! embedding_dim = 32
//!
//! [train]
//! steps = 3000
//! ```
//!
//! Every section and key is optional and falls back to the defaults of
//! [`RunConfig::default`]; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CleanConfig, CorpusConfig};
use crate::error::{Error, Result};
use crate::eval::compare::CompareConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds corpus generation and model initialization.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub clean: CleanConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub compare: CompareConfig,
    pub eval: EvalConfig,
}

/// Settings of the `eval` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generated code-switching sentences per base language.
    pub code_switch_per_language: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            code_switch_per_language: 10,
        }
    }
}

impl Default for RunConfig {
    /// The desk-scale setup.
    fn default() -> Self {
        RunConfig {
            seed: 0,
            corpus: CorpusConfig::default(),
            clean: CleanConfig::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            compare: CompareConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text` as overrides on top of [`RunConfig::default`]. A partial
    /// section keeps the desk values for the keys it leaves out.
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let overrides: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(RunConfig::default()).expect("run config serializes");
        merge(&mut merged, overrides);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text)
    }

    /// The fully resolved configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Checks the sections that do not depend on the corpus. The model's
    /// language and speaker counts are taken from the corpus at run time.
    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit, so larger seeds could not be recorded.
        if self.seed > i64::MAX as u64 || self.compare.seeds.iter().any(|&s| s > i64::MAX as u64) {
            return Err(Error::Config(format!("seeds must not exceed {}", i64::MAX)));
        }
        self.corpus.validate()?;
        self.train.validate()?;
        self.compare.validate()?;
        let mut model = self.model.clone();
        if model.variant == crate::model::Variant::Sgl {
            model.languages = 1;
        }
        model.validate()
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (key, value) in overrides {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(inner)), toml::Value::Table(over)) => merge(inner, over),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}
