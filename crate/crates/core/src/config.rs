//! Run configuration: one JSON document, overridable key by key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::compile::CompileConfig;
use crate::corpus::{DEFAULT_MAX_HISTORY, DEFAULT_MIN_ITEM_COUNT, DEFAULT_MIN_USER_COUNT};
use crate::eval::DEFAULT_KS;
use crate::generate::BeamConfig;
use crate::ktree::MAX_HOPS;
use crate::model::{ModelConfig, TrainConfig};

/// The only environment variable consulted.
pub const SEED_ENV: &str = "KPROMPT_SEED";

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
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("`{key}`: {message}")]
    Field { key: String, message: String },
}

fn field(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        key: key.into(),
        message: message.into(),
    }
}

/// Input files. `dir` supplies defaults for any path left unset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub dir: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    pub triples: Option<PathBuf>,
    pub names: Option<PathBuf>,
    pub item_entities: Option<PathBuf>,
    pub relation_templates: Option<PathBuf>,
    pub mpp_templates: Option<PathBuf>,
}

impl DataPaths {
    pub fn resolve(
        &self,
        explicit: &Option<PathBuf>,
        default_name: &str,
        key: &str,
    ) -> Result<PathBuf, ConfigError> {
        match (explicit, &self.dir) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(d)) => Ok(d.join(default_name)),
            (None, None) => Err(field(
                &format!("data.{key}"),
                "not set and no data.dir to default from",
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataPaths,
    /// MPP template to use; the first in the file when unset.
    pub template_id: Option<u32>,
    pub min_user_count: usize,
    pub min_item_count: usize,
    pub max_history: usize,
    pub compile: CompileConfig,
    /// Knowledge-tree mask in the encoder; off means full attention.
    pub mask: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: BeamConfig,
    pub ks: Vec<usize>,
    /// Master seed; model initialization and batch order derive from it.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataPaths::default(),
            template_id: None,
            min_user_count: DEFAULT_MIN_USER_COUNT,
            min_item_count: DEFAULT_MIN_ITEM_COUNT,
            max_history: DEFAULT_MAX_HISTORY,
            compile: CompileConfig::default(),
            mask: true,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            beam: BeamConfig::default(),
            ks: DEFAULT_KS.to_vec(),
            seed: 0,
        }
    }
}

/// Short flag names for the common knobs.
const ALIASES: &[(&str, &str)] = &[
    ("hops", "compile.hops"),
    ("degree", "compile.degree"),
    ("max-input-tokens", "compile.max_input_tokens"),
    ("max-history", "max_history"),
    ("mask-cross", "model.mask_cross"),
    ("exclude-seen", "beam.exclude_seen"),
    ("beam-width", "beam.beam_width"),
    ("epochs", "train.epochs"),
    ("batch-size", "train.batch_size"),
    ("lr", "train.optim.peak_lr"),
    ("warmup", "train.optim.warmup_steps"),
    ("dropout", "model.dropout"),
    ("data-dir", "data.dir"),
];

fn canonical(key: &str) -> String {
    ALIASES
        .iter()
        .find(|(a, _)| *a == key)
        .map(|(_, k)| k.to_string())
        .unwrap_or_else(|| key.replace('-', "_"))
}

/// Parses an override value: JSON if it parses, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = serde_json::to_string_pretty(self).expect("serializable") + "\n";
        std::fs::write(path, text).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Sets one dotted key (or alias) to `raw`.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        let path = canonical(key);
        let mut doc = serde_json::to_value(&*self).expect("serializable");
        let mut slot = &mut doc;
        for part in path.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| ConfigError::UnknownKey(key.to_owned()))?;
        }
        let mut value = parse_value(raw);
        // Paths and ids stay strings even when they look numeric.
        if path.starts_with("data.") {
            value = Value::String(raw.to_owned());
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| field(key, e.to_string()))?;
        Ok(())
    }

    /// Applies `KPROMPT_SEED` if set.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                self.seed = v
                    .trim()
                    .parse()
                    .map_err(|_| field(SEED_ENV, format!("`{v}` is not an unsigned integer")))?;
                Ok(())
            }
            Err(_) => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.compile.hops > MAX_HOPS {
            return Err(field("compile.hops", format!("must be at most {MAX_HOPS}")));
        }
        if self.compile.degree == 0 {
            return Err(field("compile.degree", "must be at least 1"));
        }
        if self.max_history == 0 {
            return Err(field("max_history", "must be at least 1"));
        }
        if self.compile.max_input_tokens < 4 {
            return Err(field(
                "compile.max_input_tokens",
                "must leave room for three separators",
            ));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(field("ks", "must be a non-empty list of positive cutoffs"));
        }
        if let Some(&k) = self.ks.iter().max() {
            if self.beam.k < k {
                return Err(field(
                    "beam.k",
                    format!("must cover the largest cutoff {k}"),
                ));
            }
        }
        self.beam
            .validate()
            .map_err(|e| field("beam", e.to_string()))?;
        self.train
            .optim
            .validate()
            .map_err(|e| field("train.optim", e.to_string()))?;
        if self.train.batch_size == 0 {
            return Err(field("train.batch_size", "must be positive"));
        }
        let mut m = self.model.clone();
        m.vocab_size = m.vocab_size.max(crate::prompts::SPECIALS.len());
        m.validate().map_err(|e| field("model", e.to_string()))
    }

    /// Model and training seeds derived from the master seed.
    pub fn seeded(&self) -> (ModelConfig, TrainConfig) {
        let mut model = self.model.clone();
        let mut train = self.train.clone();
        model.seed = self.seed;
        train.seed = self.seed.wrapping_add(0x5EED);
        (model, train)
    }
}
