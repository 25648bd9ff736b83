//! Run configuration: documented defaults, overridden by a config file,
//! overridden by command-line values.
//!
//! The file uses flat dotted keys:
//!
//! ```text
//! model.d_model = 64
//! model.k = 2
//! train.base_lr = 0.001
//! paths.checkpoint = "toy.ckpt"
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::Value;

use crate::inference::DecodeMode;
use crate::model::ModelConfig;
use crate::training::TrainingConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "CTC_NMT_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("unknown config key `{key}` (from {origin})")]
    UnknownKey { key: String, origin: Origin },
    #[error("config key `{key}`: cannot use `{value}` ({origin}): {message}")]
    BadValue {
        key: String,
        value: String,
        origin: Origin,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Where an effective value came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Default,
    File(PathBuf),
    Flag,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Default => f.write_str("default"),
            Self::File(p) => write!(f, "file {}", p.display()),
            Self::Flag => f.write_str("command line"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Split factor.
    pub k: usize,
    pub max_source_len: usize,
    pub seed: u64,
    pub split_positions: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = ModelConfig::toy(1);
        Self {
            d_model: t.d_model,
            n_heads: t.n_heads,
            d_ff: t.d_ff,
            enc_layers: t.enc_layers,
            dec_layers: t.dec_layers,
            k: t.split_factor,
            max_source_len: t.max_source_len,
            seed: t.seed,
            split_positions: t.split_positions,
        }
    }
}

impl ModelSection {
    /// Architecture for a vocabulary of `vocab_len` entries including the
    /// reserved ones.
    pub fn model_config(&self, vocab_len: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            split_factor: self.k,
            vocab_size: vocab_len.saturating_sub(1),
            max_source_len: self.max_source_len,
            seed: self.seed,
            split_positions: self.split_positions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Vocabulary size including the reserved entries.
    pub vocab_max_size: usize,
    pub vocab_min_freq: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            vocab_max_size: 32000,
            vocab_min_freq: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub mode: DecodeMode,
    pub batch_size: usize,
    /// Untimed sentences before a benchmark's timed region.
    pub warmup: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Batched,
            batch_size: 32,
            warmup: 16,
        }
    }
}

/// File locations; an empty string means unset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub source: String,
    pub target: String,
    pub vocab: String,
    pub checkpoint: String,
    pub input: String,
    pub output: String,
    pub log: String,
    pub report: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainingConfig,
    pub data: DataSection,
    pub decode: DecodeSection,
    pub paths: PathsSection,
}

/// Effective configuration plus the origin of every key.
#[derive(Clone, Debug)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub origins: BTreeMap<String, Origin>,
    values: BTreeMap<String, Value>,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = toml::Table::new();
    for (key, v) in flat {
        let mut table = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            table = table
                .entry(part.to_string())
                .or_insert_with(|| Value::Table(toml::Table::new()))
                .as_table_mut()
                .expect("sections are tables");
        }
        table.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Table(root)
}

/// Parses `raw` as the same kind of value as `like`.
fn parse_like(like: &Value, raw: &str) -> Result<Value, String> {
    match like {
        Value::Integer(_) => raw.parse::<i64>().map(Value::Integer).map_err(|e| e.to_string()),
        Value::Float(_) => raw.parse::<f64>().map(Value::Float).map_err(|e| e.to_string()),
        Value::Boolean(_) => raw.parse::<bool>().map(Value::Boolean).map_err(|e| e.to_string()),
        _ => Ok(Value::String(raw.to_string())),
    }
}

fn coerce(like: &Value, v: Value) -> Value {
    match (like, v) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (_, v) => v,
    }
}

impl RunConfig {
    /// Applies `file` (if any) and then `overrides` (`key`, `value`) on top of
    /// the defaults.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<ResolvedConfig, ConfigError> {
        let defaults = Value::try_from(RunConfig::default()).expect("defaults serialize");
        let mut values = BTreeMap::new();
        flatten("", &defaults, &mut values);
        let mut origins: BTreeMap<String, Origin> = values.keys().map(|k| (k.clone(), Origin::Default)).collect();

        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            let parsed: toml::Table = toml::from_str(&text).map_err(|e| ConfigError::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            let mut from_file = BTreeMap::new();
            flatten("", &Value::Table(parsed), &mut from_file);
            for (key, v) in from_file {
                let origin = Origin::File(path.to_path_buf());
                let Some(like) = values.get(&key) else {
                    return Err(ConfigError::UnknownKey { key, origin });
                };
                let v = coerce(like, v);
                values.insert(key.clone(), v);
                origins.insert(key, origin);
            }
        }

        for (key, raw) in overrides {
            let Some(like) = values.get(key) else {
                return Err(ConfigError::UnknownKey {
                    key: key.clone(),
                    origin: Origin::Flag,
                });
            };
            let v = parse_like(like, raw).map_err(|message| ConfigError::BadValue {
                key: key.clone(),
                value: raw.clone(),
                origin: Origin::Flag,
                message,
            })?;
            values.insert(key.clone(), v);
            origins.insert(key.clone(), Origin::Flag);
        }

        let config: RunConfig = unflatten(&values).try_into().map_err(|e: toml::de::Error| {
            let key = values
                .keys()
                .find(|k| e.message().contains(k.rsplit('.').next().unwrap_or(k)))
                .cloned()
                .unwrap_or_default();
            ConfigError::BadValue {
                value: values.get(&key).map(|v| v.to_string()).unwrap_or_default(),
                origin: origins.get(&key).cloned().unwrap_or(Origin::Default),
                key,
                message: e.message().to_string(),
            }
        })?;
        config
            .train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(ResolvedConfig {
            config,
            origins,
            values,
        })
    }
}

impl ResolvedConfig {
    /// SHA-256 over the sorted `key = value` lines, leaving out file paths.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.values.iter().filter(|(k, _)| !k.starts_with("paths.")) {
            h.update(format!("{k} = {v}\n").as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Every effective value with its origin, one per line.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}  # {}\n", self.origins[k]));
        }
        out
    }

    /// The path stored under `paths.<name>`, if set.
    pub fn path(&self, name: &str) -> Option<PathBuf> {
        let p = match name {
            "source" => &self.config.paths.source,
            "target" => &self.config.paths.target,
            "vocab" => &self.config.paths.vocab,
            "checkpoint" => &self.config.paths.checkpoint,
            "input" => &self.config.paths.input,
            "output" => &self.config.paths.output,
            "log" => &self.config.paths.log,
            "report" => &self.config.paths.report,
            _ => return None,
        };
        (!p.is_empty()).then(|| PathBuf::from(p))
    }
}
