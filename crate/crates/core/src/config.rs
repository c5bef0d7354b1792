//! Flat key-value run configuration. Three layers with fixed precedence:
//! command-line `--key value` pairs beat the config file, which beats
//! built-in defaults. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::data::SyntheticConfig;
use crate::mtl::{SchemeKind, TaskKind};
use crate::trainer::{Sampling, TrainConfig};

/// Environment variable naming the default config file, used when no
/// `--config` is given.
pub const CONFIG_ENV: &str = "ATTNMTL_CONFIG";

#[derive(Debug)]
pub enum ConfigError {
    Parse { line: usize, reason: String },
    UnknownKey { key: String },
    BadValue { key: String, reason: String },
    Missing { key: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Parse { line, reason } => {
                write!(f, "config line {line}: {reason}")
            }
            ConfigError::UnknownKey { key } => write!(f, "unknown config key '{key}'"),
            ConfigError::BadValue { key, reason } => {
                write!(f, "bad value for '{key}': {reason}")
            }
            ConfigError::Missing { key } => write!(f, "missing required key '{key}'"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Where a value came from; file-sourced relative paths resolve against the
/// config file's directory, CLI-sourced ones against the working directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    File,
    Cli,
}

/// Scalar keys every command accepts.
const KNOWN_KEYS: &[&str] = &[
    "scheme",
    "d_e",
    "d_h",
    "init_range",
    "lr",
    "batch_size",
    "dropout",
    "max_epochs",
    "dev_interval",
    "seed",
    "dc_weight",
    "sampling",
    "fine_tune_embeddings",
    "embeddings",
    "checkpoint",
    "out",
    "log",
    "out_dir",
    "eval_split",
    "export_split",
    "export_limit",
    "finetune_task",
    "param_tasks",
    "param_labels",
    "synthetic.domains",
    "synthetic.domain_lexicon",
    "synthetic.sentiment_lexicon",
    "synthetic.len_min",
    "synthetic.len_max",
    "synthetic.noise_ratio",
    "synthetic.train_per_domain",
    "synthetic.dev_per_domain",
    "synthetic.test_per_domain",
    "synthetic.labeling_train",
    "synthetic.labeling_dev",
    "synthetic.labeling_test",
];

/// Fields allowed under `task.<name>.<field>`.
const TASK_FIELDS: &[&str] = &["kind", "train", "dev", "test", "weight", "tag_column"];

fn validate_key(key: &str) -> Result<(), ConfigError> {
    if key.is_empty()
        || !key
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || "._-".contains(c))
    {
        return Err(ConfigError::UnknownKey {
            key: key.to_string(),
        });
    }
    if KNOWN_KEYS.contains(&key) {
        return Ok(());
    }
    if let Some(rest) = key.strip_prefix("task.") {
        if let Some((name, field)) = rest.rsplit_once('.') {
            if !name.is_empty() && TASK_FIELDS.contains(&field) && !name.contains('.') {
                return Ok(());
            }
        }
    }
    Err(ConfigError::UnknownKey {
        key: key.to_string(),
    })
}

/// Merged configuration with insertion order preserved (task declaration
/// order is meaningful: it fixes task ids).
#[derive(Debug, Default)]
pub struct Settings {
    entries: Vec<(String, String, Origin)>,
    map: BTreeMap<String, (String, Origin)>,
    file_dir: PathBuf,
}

/// Parses `key = value` lines; `#` starts a comment, blank lines ignored.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
            line: i + 1,
            reason: format!("expected 'key = value', got '{line}'"),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        validate_key(&key)?;
        if out.iter().any(|(k, _)| *k == key) {
            return Err(ConfigError::Parse {
                line: i + 1,
                reason: format!("duplicate key '{key}'"),
            });
        }
        out.push((key, value));
    }
    Ok(out)
}

impl Settings {
    /// Builds the merged view: defaults, then the file, then CLI pairs.
    pub fn assemble(
        file: Option<(&Path, &str)>,
        cli_pairs: &[(String, String)],
    ) -> Result<Settings, ConfigError> {
        let mut s = Settings::default();
        if let Some((path, text)) = file {
            s.file_dir = path
                .parent()
                .map(|p| p.to_path_buf())
                .unwrap_or_else(|| PathBuf::from("."));
            for (k, v) in parse_config_text(text)? {
                s.insert(k, v, Origin::File);
            }
        }
        for (k, v) in cli_pairs {
            validate_key(k)?;
            s.insert(k.clone(), v.clone(), Origin::Cli);
        }
        Ok(s)
    }

    fn insert(&mut self, key: String, value: String, origin: Origin) {
        self.entries.push((key.clone(), value.clone(), origin));
        self.map.insert(key, (value, origin));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|(v, _)| v.as_str())
    }

    fn bad(&self, key: &str, reason: impl Into<String>) -> ConfigError {
        ConfigError::BadValue {
            key: key.to_string(),
            reason: reason.into(),
        }
    }

    pub fn get_string(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.bad(key, "expected a number")),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| self.bad(key, "expected a non-negative integer")),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| self.bad(key, "expected a non-negative integer")),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(_) => Err(self.bad(key, "expected true or false")),
        }
    }

    /// Resolves a path value against the directory it was declared in.
    pub fn get_path(&self, key: &str) -> Option<PathBuf> {
        let (value, origin) = self.map.get(key)?;
        let p = PathBuf::from(value);
        if p.is_relative() && *origin == Origin::File {
            Some(self.file_dir.join(p))
        } else {
            Some(p)
        }
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf, ConfigError> {
        self.get_path(key).ok_or(ConfigError::Missing {
            key: key.to_string(),
        })
    }

    pub fn scheme(&self) -> Result<SchemeKind, ConfigError> {
        let v = self.get_string("scheme", "sa");
        SchemeKind::parse(&v).ok_or_else(|| self.bad("scheme", "expected fs|ssp|psp|sa|da"))
    }

    pub fn d_e(&self) -> Result<usize, ConfigError> {
        self.get_usize("d_e", 200)
    }

    pub fn d_h(&self) -> Result<usize, ConfigError> {
        self.get_usize("d_h", 200)
    }

    pub fn init_range(&self) -> Result<f64, ConfigError> {
        self.get_f64("init_range", 0.1)
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let d = TrainConfig::default();
        let sampling = match self.get_string("sampling", "uniform").as_str() {
            "uniform" => Sampling::Uniform,
            "proportional" => Sampling::Proportional,
            _ => return Err(self.bad("sampling", "expected uniform or proportional")),
        };
        Ok(TrainConfig {
            lr: self.get_f64("lr", d.lr)?,
            batch_size: self.get_usize("batch_size", d.batch_size)?,
            dropout: self.get_f64("dropout", d.dropout)?,
            max_epochs: self.get_usize("max_epochs", d.max_epochs)?,
            dev_interval: self.get_usize("dev_interval", d.dev_interval)?,
            seed: self.get_u64("seed", d.seed)?,
            dc_weight: self.get_f64("dc_weight", d.dc_weight)?,
            sampling,
            fine_tune_embeddings: self.get_bool("fine_tune_embeddings", d.fine_tune_embeddings)?,
            init_range: self.init_range()?,
        })
    }

    pub fn synthetic_config(&self) -> Result<SyntheticConfig, ConfigError> {
        let d = SyntheticConfig::default();
        Ok(SyntheticConfig {
            domains: self.get_usize("synthetic.domains", d.domains)?,
            domain_lexicon: self.get_usize("synthetic.domain_lexicon", d.domain_lexicon)?,
            sentiment_lexicon: self
                .get_usize("synthetic.sentiment_lexicon", d.sentiment_lexicon)?,
            len_range: (
                self.get_usize("synthetic.len_min", d.len_range.0)?,
                self.get_usize("synthetic.len_max", d.len_range.1)?,
            ),
            noise_ratio: self.get_f64("synthetic.noise_ratio", d.noise_ratio)?,
            train_per_domain: self.get_usize("synthetic.train_per_domain", d.train_per_domain)?,
            dev_per_domain: self.get_usize("synthetic.dev_per_domain", d.dev_per_domain)?,
            test_per_domain: self.get_usize("synthetic.test_per_domain", d.test_per_domain)?,
            labeling_train: self.get_usize("synthetic.labeling_train", d.labeling_train)?,
            labeling_dev: self.get_usize("synthetic.labeling_dev", d.labeling_dev)?,
            labeling_test: self.get_usize("synthetic.labeling_test", d.labeling_test)?,
            seed: self.get_u64("seed", d.seed)?,
        })
    }

    /// Declared tasks in first-appearance order (this order fixes task ids).
    pub fn tasks(&self) -> Result<Vec<TaskFiles>, ConfigError> {
        let mut names: Vec<String> = Vec::new();
        for (key, _, _) in &self.entries {
            if let Some(rest) = key.strip_prefix("task.") {
                if let Some((name, _)) = rest.rsplit_once('.') {
                    if !names.iter().any(|n| n == name) {
                        names.push(name.to_string());
                    }
                }
            }
        }
        names.iter().map(|name| self.task_files(name)).collect()
    }

    fn task_files(&self, name: &str) -> Result<TaskFiles, ConfigError> {
        let field = |f: &str| format!("task.{name}.{f}");
        let kind = match self.get_string(&field("kind"), "classification").as_str() {
            "classification" => TaskKind::Classification,
            "labeling" => TaskKind::SequenceLabeling,
            _ => {
                return Err(self.bad(&field("kind"), "expected classification or labeling"));
            }
        };
        let tag_column = match self.get(&field("tag_column")) {
            None | Some("pos") => crate::data::TagColumn::Pos,
            Some("chunk") => crate::data::TagColumn::Chunk,
            Some(_) => return Err(self.bad(&field("tag_column"), "expected pos or chunk")),
        };
        Ok(TaskFiles {
            name: name.to_string(),
            kind,
            train: self.require_path(&field("train"))?,
            dev: self.require_path(&field("dev"))?,
            test: self.get_path(&field("test")),
            weight: self.get_f64(&field("weight"), 1.0)?,
            tag_column,
        })
    }
}

/// One task's declared datasets.
#[derive(Debug, Clone)]
pub struct TaskFiles {
    pub name: String,
    pub kind: TaskKind,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: Option<PathBuf>,
    pub weight: f64,
    pub tag_column: crate::data::TagColumn,
}
