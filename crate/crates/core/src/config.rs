//! Simulation configuration.
//!
//! A [`SimConfig`] can be built in code, or loaded from a plain-text
//! `key = value` file (one entry per line, `#` starts a comment). Keys use
//! the same names as the command-line flags, e.g. `workers`, `batch-size`,
//! `cache-capacity`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where working embedding parameters live during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Every parameter stays in host memory; workers read embeddings and
    /// send gradients back on every step.
    Host,
    /// Next-batch parameters are copied to the workers ahead of time with no
    /// consistency guarantee.
    Prefetch,
    /// Working parameters are admitted into per-worker cache buffers and
    /// updated there.
    Cache,
}

/// Whether the three stages overlap or run one after the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pipelined,
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Criteo(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub num_workers: usize,
    pub embedding_dim: usize,
    pub num_fields: usize,
    pub batch_size_per_worker: usize,
    pub vocabulary_size: u64,
    /// Slots per worker buffer.
    pub cache_capacity: usize,
    /// Number of future global batches the manager inspects; also the depth
    /// of both inter-stage queues.
    pub lookahead_depth: usize,
    pub strategy: Strategy,
    pub mode: Mode,
    pub seed: u64,
    pub adam: AdamConfig,
    pub zipf_exponent: f64,
    pub hidden_units: usize,
    pub data: DataSource,
    /// Also charge a shadow ledger with the traffic the run would cause
    /// without batch deduplication.
    pub track_no_vsi: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_workers: 4,
            embedding_dim: 16,
            num_fields: 26,
            batch_size_per_worker: 256,
            vocabulary_size: 100_000,
            cache_capacity: 8192,
            lookahead_depth: 1,
            strategy: Strategy::Cache,
            mode: Mode::Pipelined,
            seed: 7,
            adam: AdamConfig::default(),
            zipf_exponent: 1.2,
            hidden_units: 64,
            data: DataSource::Synthetic,
            track_no_vsi: false,
        }
    }
}

impl SimConfig {
    /// Rows in one global batch.
    pub fn global_batch_size(&self) -> usize {
        self.num_workers * self.batch_size_per_worker
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("workers", self.num_workers),
            ("dim", self.embedding_dim),
            ("fields", self.num_fields),
            ("batch-size", self.batch_size_per_worker),
            ("cache-capacity", self.cache_capacity),
            ("lookahead", self.lookahead_depth),
            ("hidden", self.hidden_units),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("`{name}` must be positive")));
            }
        }
        if self.vocabulary_size < self.num_fields as u64 {
            return Err(Error::InvalidConfig(format!(
                "`vocab` ({}) must be at least the number of fields ({})",
                self.vocabulary_size, self.num_fields
            )));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent > 0.0) {
            return Err(Error::InvalidConfig("`zipf` must be a positive real".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.epsilon > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::InvalidConfig(
                "adam needs lr > 0, epsilon > 0 and betas in [0, 1)".into(),
            ));
        }
        if matches!(self.data, DataSource::Criteo(_)) && self.num_fields != crate::dataio::CRITEO_CATEGORICAL {
            return Err(Error::InvalidConfig(format!(
                "criteo data has {} categorical fields, config has {}",
                crate::dataio::CRITEO_CATEGORICAL,
                self.num_fields
            )));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        match key.as_str() {
            "workers" => self.num_workers = parse(&key, value)?,
            "dim" => self.embedding_dim = parse(&key, value)?,
            "fields" => self.num_fields = parse(&key, value)?,
            "batch-size" => self.batch_size_per_worker = parse(&key, value)?,
            "vocab" => self.vocabulary_size = parse(&key, value)?,
            "cache-capacity" => self.cache_capacity = parse(&key, value)?,
            "lookahead" => self.lookahead_depth = parse(&key, value)?,
            "strategy" => self.strategy = parse(&key, value)?,
            "mode" => self.mode = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "lr" => self.adam.lr = parse(&key, value)?,
            "beta1" => self.adam.beta1 = parse(&key, value)?,
            "beta2" => self.adam.beta2 = parse(&key, value)?,
            "epsilon" => self.adam.epsilon = parse(&key, value)?,
            "zipf" => self.zipf_exponent = parse(&key, value)?,
            "hidden" => self.hidden_units = parse(&key, value)?,
            "data" => self.data = parse(&key, value)?,
            "no-vsi" => self.track_no_vsi = parse(&key, value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`", n + 1))
            })?;
            self.set(key, value)
                .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Loads a config file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut config = Self::default();
        config.apply_kv_text(&text)?;
        Ok(config)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("`{key}`: cannot parse `{value}`: {e}")))
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "host" => Ok(Self::Host),
            "prefetch" => Ok(Self::Prefetch),
            "cache" => Ok(Self::Cache),
            _ => Err(format!("unknown strategy `{s}` (host, prefetch, cache)")),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Host => "host",
            Self::Prefetch => "prefetch",
            Self::Cache => "cache",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "pipelined" => Ok(Self::Pipelined),
            "sequential" => Ok(Self::Sequential),
            _ => Err(format!("unknown mode `{s}` (pipelined, sequential)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pipelined => "pipelined",
            Self::Sequential => "sequential",
        })
    }
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "synthetic" {
            Ok(Self::Synthetic)
        } else if let Some(path) = s.strip_prefix("criteo:") {
            if path.is_empty() {
                Err("`criteo:` needs a file path".into())
            } else {
                Ok(Self::Criteo(PathBuf::from(path)))
            }
        } else {
            Err(format!("unknown data source `{s}` (synthetic, criteo:<path>)"))
        }
    }
}
