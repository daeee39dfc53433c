//! Run configuration: defaults, overridden by a `key = value` file, then by
//! command-line flags.
//!
//! File format: one `key = value` per line; blank lines and lines starting
//! with `#` are ignored. Keys are the field names of [`RunConfig`]; unknown
//! keys are an error.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prior::{LrSchedule, Objective, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {message}")]
    Syntax { path: String, line: usize, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {message}")]
    InvalidValue { key: String, value: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraderKind {
    Oracle,
    Remote,
}

/// Every setting of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `None` uses the built-in taxonomy.
    pub taxonomy: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub model: String,
    pub corpus_n: usize,
    pub corpus_seed: u64,
    pub mix_ratio: f64,
    pub world_seed: u64,
    pub dim: usize,
    pub train_n: usize,
    pub heldout_n: usize,
    pub objective: Objective,
    pub steps: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub cond_dropout: f64,
    pub train_seed: u64,
    pub sample_steps: usize,
    pub cfg_scale: f64,
    pub sample_seed: u64,
    pub kid_subset_size: usize,
    pub kid_subsets: usize,
    pub kid_seed: u64,
    pub grader: GraderKind,
    pub grader_endpoint: Option<String>,
    /// Name of the environment variable holding the grader token.
    pub grader_token_env: Option<String>,
    pub grader_cache: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            taxonomy: None,
            out_dir: PathBuf::from("run"),
            model: "prior".into(),
            corpus_n: 10_200,
            corpus_seed: 0,
            mix_ratio: 0.5,
            world_seed: 0,
            dim: 64,
            train_n: 10_000,
            heldout_n: 200,
            objective: t.objective,
            steps: t.steps,
            lr: t.lr,
            lr_schedule: t.lr_schedule,
            batch_size: t.batch_size,
            hidden: t.hidden,
            cond_dropout: t.cond_dropout,
            train_seed: 0,
            sample_steps: 50,
            cfg_scale: t.cfg_scale,
            sample_seed: 0,
            kid_subset_size: 100,
            kid_subsets: 10,
            kid_seed: 0,
            grader: GraderKind::Oracle,
            grader_endpoint: None,
            grader_token_env: None,
            grader_cache: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        message: e.to_string(),
    })
}

fn optional(value: &str) -> Option<String> {
    let v = value.trim();
    (!v.is_empty() && v != "none").then(|| v.to_string())
}

impl RunConfig {
    pub const KEYS: [&'static str; 28] = [
        "taxonomy",
        "out_dir",
        "model",
        "corpus_n",
        "corpus_seed",
        "mix_ratio",
        "world_seed",
        "dim",
        "train_n",
        "heldout_n",
        "objective",
        "steps",
        "lr",
        "lr_schedule",
        "batch_size",
        "hidden",
        "cond_dropout",
        "train_seed",
        "sample_steps",
        "cfg_scale",
        "sample_seed",
        "kid_subset_size",
        "kid_subsets",
        "kid_seed",
        "grader",
        "grader_endpoint",
        "grader_token_env",
        "grader_cache",
    ];

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "taxonomy" => self.taxonomy = optional(v).map(PathBuf::from),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "model" => self.model = v.to_string(),
            "corpus_n" => self.corpus_n = parse(key, v)?,
            "corpus_seed" => self.corpus_seed = parse(key, v)?,
            "mix_ratio" => self.mix_ratio = parse(key, v)?,
            "world_seed" => self.world_seed = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "train_n" => self.train_n = parse(key, v)?,
            "heldout_n" => self.heldout_n = parse(key, v)?,
            "objective" => self.objective = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_schedule" => {
                self.lr_schedule = match v {
                    "constant" => LrSchedule::Constant,
                    "cosine" => LrSchedule::Cosine,
                    _ => {
                        return Err(ConfigError::InvalidValue {
                            key: key.into(),
                            value: v.into(),
                            message: "expected constant or cosine".into(),
                        })
                    }
                }
            }
            "batch_size" => self.batch_size = parse(key, v)?,
            "hidden" => {
                self.hidden = v.split(',').map(|w| parse(key, w.trim())).collect::<Result<_, _>>()?;
            }
            "cond_dropout" => self.cond_dropout = parse(key, v)?,
            "train_seed" => self.train_seed = parse(key, v)?,
            "sample_steps" => self.sample_steps = parse(key, v)?,
            "cfg_scale" => self.cfg_scale = parse(key, v)?,
            "sample_seed" => self.sample_seed = parse(key, v)?,
            "kid_subset_size" => self.kid_subset_size = parse(key, v)?,
            "kid_subsets" => self.kid_subsets = parse(key, v)?,
            "kid_seed" => self.kid_seed = parse(key, v)?,
            "grader" => {
                self.grader = match v {
                    "oracle" => GraderKind::Oracle,
                    "remote" => GraderKind::Remote,
                    _ => {
                        return Err(ConfigError::InvalidValue {
                            key: key.into(),
                            value: v.into(),
                            message: "expected oracle or remote".into(),
                        })
                    }
                }
            }
            "grader_endpoint" => self.grader_endpoint = optional(v),
            "grader_token_env" => self.grader_token_env = optional(v),
            "grader_cache" => self.grader_cache = optional(v).map(PathBuf::from),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies every line of a config file's text.
    pub fn apply_str(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: origin.to_string(),
                line: i + 1,
                message: "expected `key = value`".into(),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)?;
        self.apply_str(&text, &path.display().to_string())
    }

    /// Checks the cross-field constraints.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, message: &str| {
            Err(ConfigError::InvalidValue { key: key.into(), value: String::new(), message: message.into() })
        };
        if self.train_n == 0 || self.heldout_n == 0 {
            return bad("train_n", "train_n and heldout_n must be positive");
        }
        if self.train_n + self.heldout_n > self.corpus_n {
            return bad("corpus_n", "corpus_n must cover train_n + heldout_n");
        }
        if self.dim == 0 {
            return bad("dim", "must be positive");
        }
        if self.sample_steps == 0 {
            return bad("sample_steps", "must be positive");
        }
        if self.grader == GraderKind::Remote && self.grader_endpoint.is_none() {
            return bad("grader_endpoint", "required when grader = remote");
        }
        if self.kid_subset_size > self.heldout_n {
            return bad("kid_subset_size", "must not exceed heldout_n");
        }
        self.train_config().validate().map_err(|e| ConfigError::InvalidValue {
            key: "train".into(),
            value: String::new(),
            message: e.to_string(),
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            objective: self.objective,
            lr: self.lr,
            lr_schedule: self.lr_schedule,
            batch_size: self.batch_size,
            steps: self.steps,
            cond_dropout: self.cond_dropout,
            cfg_scale: self.cfg_scale,
            seed: self.train_seed,
            hidden: self.hidden.clone(),
            ..TrainConfig::default()
        }
    }

    /// The resolved configuration as config-file text.
    pub fn to_config_string(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for key in Self::KEYS {
            let text = match &v[key] {
                serde_json::Value::Null => "none".to_string(),
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Array(a) => a.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
                other => other.to_string(),
            };
            out.push_str(&format!("{key} = {text}\n"));
        }
        out
    }
}
